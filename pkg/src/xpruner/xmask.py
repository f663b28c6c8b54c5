"""Class-conditional explainability masks.

Per layer a :class:`MaskSet` holds four tensors:

* ``head``  (heads, C, head_dim): gates each head's output slice,
* ``proj``  (C, d, heads*head_dim): Hadamard mask on the attention output projection,
* ``fc1``   (C, hidden, d) and ``fc2`` (C, d, hidden): Hadamard masks on the MLP.

Every entry belongs to exactly one prunable unit: head ``i`` owns
``head[i]`` and the ``i``-th column block of ``proj``; neuron ``j`` owns row
``j`` of ``fc1`` and column ``j`` of ``fc2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import Tape, Tensor, ops
from .errors import FrozenWeightsError, ShapeError
from .optim import SGD
from .vit import Model, PrunableUnit, run_blocks

logger = logging.getLogger(__name__)

MASK_KEYS = ("head", "proj", "fc1", "fc2")
CLASS_AXIS = {"head": 1, "proj": 0, "fc1": 0, "fc2": 0}


@dataclass
class MaskSet:
    layers: list[dict[str, Tensor]]
    num_classes: int

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for layer, group in enumerate(self.layers):
            for key in MASK_KEYS:
                yield f"{layer}.{key}", group[key]

    def tensors(self) -> dict[str, Tensor]:
        return dict(self.named())

    def num_entries(self) -> int:
        return sum(t.size for _, t in self.named())

    def clone(self, requires_grad: bool | None = None) -> "MaskSet":
        layers = []
        for group in self.layers:
            layers.append(
                {
                    k: Tensor(t.data.copy(), requires_grad=t.requires_grad if requires_grad is None else requires_grad)
                    for k, t in group.items()
                }
            )
        return MaskSet(layers, self.num_classes)

    def detached(self) -> "MaskSet":
        return self.clone(requires_grad=False)


@dataclass(frozen=True)
class MaskLossWeights:
    smooth: float = 0.01
    sparse: float = 0.01

    def __post_init__(self):
        if self.smooth < 0 or self.sparse < 0:
            raise ValueError("mask loss weights must be non-negative")


def mask_shapes(model: Model, layer: int) -> dict[str, tuple[int, ...]]:
    C, d, dh = model.config.num_classes, model.config.embed_dim, model.head_dim
    h, hid = model.heads[layer], model.hidden[layer]
    return {"head": (h, C, dh), "proj": (C, d, h * dh), "fc1": (C, hid, d), "fc2": (C, d, hid)}


def init_masks(model: Model) -> MaskSet:
    """All-ones masks with gradients enabled; freezes the model weights."""
    model.freeze()
    layers = []
    for layer in range(model.depth):
        layers.append({k: Tensor(np.ones(s), requires_grad=True) for k, s in mask_shapes(model, layer).items()})
    return MaskSet(layers, model.config.num_classes)


def check_compatible(model: Model, masks: MaskSet) -> None:
    if len(masks.layers) != model.depth or masks.num_classes != model.config.num_classes:
        raise ShapeError("mask set does not match model depth or class count")
    for layer in range(model.depth):
        for key, shape in mask_shapes(model, layer).items():
            if masks.layers[layer][key].shape != shape:
                raise ShapeError(f"mask {layer}.{key} has shape {masks.layers[layer][key].shape}, model needs {shape}")


def gather_gates(masks: MaskSet, class_select) -> dict[int, dict[str, Tensor]]:
    """Select each sample's class slice of every mask tensor."""
    class_select = np.asarray(class_select, dtype=np.int64)
    if class_select.size and (class_select.min() < 0 or class_select.max() >= masks.num_classes):
        raise ShapeError(f"class index out of range for {masks.num_classes} classes")
    return {
        layer: {key: ops.gather(group[key], class_select, CLASS_AXIS[key]) for key in MASK_KEYS}
        for layer, group in enumerate(masks.layers)
    }


def masked_forward(model: Model, masks: MaskSet, images, class_select) -> Tensor:
    """Logits with each sample's class slice of the masks applied.

    Head outputs are multiplied elementwise by their gathered head mask before
    the output projection; masked linear layers use ``(mask * W)``.
    """
    check_compatible(model, masks)
    class_select = np.asarray(class_select, dtype=np.int64)
    n = images.shape[0]
    if class_select.shape != (n,):
        raise ShapeError(f"class_select must have shape ({n},), got {class_select.shape}")
    return run_blocks(model, images, gather_gates(masks, class_select))


def smoothness_loss(masks: MaskSet) -> Tensor:
    """Sum of |second difference along the class axis| over all mask entries."""
    if masks.num_classes < 2:
        logger.warning("smoothness loss needs at least two classes; returning 0")
        return Tensor(0.0)
    total = None
    for group in masks.layers:
        for key in MASK_KEYS:
            term = ops.l1_norm(ops.second_difference(group[key], CLASS_AXIS[key]))
            total = term if total is None else total + term
    return total


def class_major(masks: MaskSet, layer: int) -> Tensor:
    """All masks of ``layer`` flattened to (C, entries_per_class)."""
    C = masks.num_classes
    group = masks.layers[layer]
    parts = [ops.reshape(ops.transpose(group["head"], (1, 0, 2)), (C, -1))]
    parts += [ops.reshape(group[k], (C, -1)) for k in ("proj", "fc1", "fc2")]
    return ops.concat(parts, axis=1)


def sparsity_loss(masks: MaskSet) -> Tensor:
    """Sum over layers and classes of the L2 norm of that class's mask entries."""
    total = None
    for layer in range(len(masks.layers)):
        term = ops.sum(ops.l2_norm(class_major(masks, layer), axis=1))
        total = term if total is None else total + term
    return total


def mask_loss(model: Model, masks: MaskSet, images, labels, weights: MaskLossWeights) -> tuple[Tensor, dict[str, float]]:
    ce = ops.cross_entropy(masked_forward(model, masks, images, labels), labels)
    smooth = smoothness_loss(masks)
    sparse = sparsity_loss(masks)
    total = ce + ops.scale(smooth, weights.smooth) + ops.scale(sparse, weights.sparse)
    return total, {"ce": ce.item(), "smooth": smooth.item(), "sparse": sparse.item()}


def mask_optimizer(masks: MaskSet, lr: float = 0.01, momentum: float = 0.9) -> SGD:
    return SGD(masks.tensors(), lr=lr, momentum=momentum)


def mask_training_step(
    model: Model,
    masks: MaskSet,
    images,
    labels,
    weights: MaskLossWeights,
    optimizer: SGD,
) -> tuple[float, dict[str, float]]:
    """One SGD step on the masks only. The model must be frozen."""
    if not model.frozen or any(p.requires_grad for p in model.params.values()):
        raise FrozenWeightsError("mask training requires frozen model weights")
    optimizer.zero_grad()
    total, parts = mask_loss(model, masks, images, labels, weights)
    Tape(total).backward()
    optimizer.step()
    return total.item(), parts


# -- unit scores -----------------------------------------------------------------------

def unit_entry_count(masks: MaskSet, layer: int, kind: str) -> int:
    group = masks.layers[layer]
    C = masks.num_classes
    if kind == "head":
        h, _, dh = group["head"].shape
        d = group["proj"].shape[1]
        return C * dh + C * d * dh
    d = group["fc1"].shape[2]
    return 2 * C * d


def unit_class_sums(masks: MaskSet, layer: int, kind: str) -> Tensor:
    """Differentiable per-unit, per-class sums of the unit's mask entries, shape (units, C)."""
    group = masks.layers[layer]
    C = masks.num_classes
    if kind == "head":
        h, _, dh = group["head"].shape
        d = group["proj"].shape[1]
        head = ops.sum(group["head"], axis=2)
        proj = ops.sum(ops.reshape(group["proj"], (C, d, h, dh)), axis=(1, 3))
        return head + ops.transpose(proj, (1, 0))
    if kind == "neuron":
        fc1 = ops.sum(group["fc1"], axis=2)
        fc2 = ops.sum(group["fc2"], axis=1)
        return ops.transpose(fc1 + fc2, (1, 0))
    raise ShapeError(f"unknown unit kind {kind!r}")


def unit_scores(masks: MaskSet, layer: int, kind: str) -> Tensor:
    """Mean mask value of every unit of one kind in ``layer`` (differentiable)."""
    total = ops.sum(unit_class_sums(masks, layer, kind), axis=1)
    return ops.scale(total, 1.0 / unit_entry_count(masks, layer, kind))


def unit_class_means(masks: MaskSet, layer: int, kind: str) -> np.ndarray:
    per_class = unit_entry_count(masks, layer, kind) // masks.num_classes
    return unit_class_sums(masks.detached(), layer, kind).data / per_class


def unit_score(masks: MaskSet, unit: PrunableUnit) -> float:
    if not 0 <= unit.layer < len(masks.layers):
        raise ShapeError(f"unknown unit: layer {unit.layer}")
    scores = unit_scores(masks.detached(), unit.layer, unit.kind).data
    if not 0 <= unit.index < scores.size:
        raise ShapeError(f"unknown unit: {unit.kind} {unit.index} in layer {unit.layer}")
    return float(scores[unit.index])
