"""Tiny DeiT-style Vision Transformer with a registry of prunable units.

Blocks are pre-norm: ``x + Attn(LN(x))`` then ``x + MLP(LN(x))``. Query, key
and value projections carry no bias, so a head's parameters are exactly its
Q/K/V row slices plus its column slice of the output projection.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Literal, Mapping, NamedTuple, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .errors import ConfigError, DegenerateArchitectureError, ShapeError

UnitKind = Literal["head", "neuron"]

INIT_STREAM = 0


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 2.0
    num_classes: int = 3
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.patch_size > 0 and self.image_size > 0, "image_size", "image and patch sizes must be positive"),
            (self.image_size % self.patch_size == 0, "image_size", "image_size must be divisible by patch_size"),
            (self.num_heads > 0 and self.embed_dim % self.num_heads == 0, "num_heads", "num_heads must divide embed_dim"),
            (self.depth >= 1, "depth", "depth must be at least 1"),
            (self.num_classes >= 2, "num_classes", "num_classes must be at least 2"),
            (self.channels >= 1, "channels", "channels must be at least 1"),
            (self.mlp_ratio > 0 and self.hidden_dim >= 1, "mlp_ratio", "mlp_ratio must give a positive hidden width"),
        ]
        for ok, name, message in checks:
            if not ok:
                raise ConfigError(message, field=name)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PrunableUnit:
    layer: int
    kind: UnitKind
    index: int
    param_count: int

    @property
    def group(self) -> tuple[int, str]:
        return (self.layer, self.kind)


class Keep(NamedTuple):
    heads: Sequence[int]
    neurons: Sequence[int]


@dataclass
class Model:
    """Weights plus the (possibly pruned) per-block widths.

    ``heads[l]`` and ``hidden[l]`` give the number of attention heads and MLP
    neurons still present in block ``l``; ``head_dim`` never changes.
    """

    config: ModelConfig
    params: dict[str, Tensor]
    heads: list[int]
    hidden: list[int]
    frozen: bool = False
    unit_ids: dict[str, list[int]] = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return self.config.depth

    @property
    def head_dim(self) -> int:
        return self.config.head_dim

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def freeze(self) -> None:
        self.frozen = True
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None

    def unfreeze(self) -> None:
        self.frozen = False
        for t in self.params.values():
            t.requires_grad = True

    def num_params(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def clone(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return Model(self.config, params, list(self.heads), list(self.hidden), self.frozen, copy.deepcopy(self.unit_ids))

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def block_param_names(layer: int) -> dict[str, str]:
    b = f"blocks.{layer}"
    return {
        "norm1.weight": f"{b}.norm1.weight",
        "norm1.bias": f"{b}.norm1.bias",
        "q": f"{b}.attn.q.weight",
        "k": f"{b}.attn.k.weight",
        "v": f"{b}.attn.v.weight",
        "proj.weight": f"{b}.attn.proj.weight",
        "proj.bias": f"{b}.attn.proj.bias",
        "norm2.weight": f"{b}.norm2.weight",
        "norm2.bias": f"{b}.norm2.bias",
        "fc1.weight": f"{b}.mlp.fc1.weight",
        "fc1.bias": f"{b}.mlp.fc1.bias",
        "fc2.weight": f"{b}.mlp.fc2.weight",
        "fc2.bias": f"{b}.mlp.fc2.bias",
    }


def build_model(config: ModelConfig) -> Model:
    """Initialise weights deterministically from ``config.seed``."""
    rng = np.random.default_rng([config.seed, INIT_STREAM])
    d, dh, H, hid = config.embed_dim, config.head_dim, config.num_heads, config.hidden_dim
    patch_in = config.channels * config.patch_size**2
    arrays: dict[str, np.ndarray] = {
        "patch_embed.weight": _trunc_normal(rng, (d, patch_in)),
        "patch_embed.bias": np.zeros(d),
        "cls_token": _trunc_normal(rng, (d,)),
        "pos_embed": _trunc_normal(rng, (config.num_tokens, d)),
    }
    for layer in range(config.depth):
        n = block_param_names(layer)
        arrays[n["norm1.weight"]] = np.ones(d)
        arrays[n["norm1.bias"]] = np.zeros(d)
        arrays[n["q"]] = _trunc_normal(rng, (H * dh, d))
        arrays[n["k"]] = _trunc_normal(rng, (H * dh, d))
        arrays[n["v"]] = _trunc_normal(rng, (H * dh, d))
        arrays[n["proj.weight"]] = _trunc_normal(rng, (d, H * dh))
        arrays[n["proj.bias"]] = np.zeros(d)
        arrays[n["norm2.weight"]] = np.ones(d)
        arrays[n["norm2.bias"]] = np.zeros(d)
        arrays[n["fc1.weight"]] = _trunc_normal(rng, (hid, d))
        arrays[n["fc1.bias"]] = np.zeros(hid)
        arrays[n["fc2.weight"]] = _trunc_normal(rng, (d, hid))
        arrays[n["fc2.bias"]] = np.zeros(d)
    arrays["norm.weight"] = np.ones(d)
    arrays["norm.bias"] = np.zeros(d)
    arrays["head.weight"] = _trunc_normal(rng, (config.num_classes, d))
    arrays["head.bias"] = np.zeros(config.num_classes)

    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    unit_ids = {}
    for layer in range(config.depth):
        unit_ids[f"{layer}.head"] = list(range(H))
        unit_ids[f"{layer}.neuron"] = list(range(hid))
    return Model(config, params, [H] * config.depth, [hid] * config.depth, unit_ids=unit_ids)


def closed_form_param_count(config: ModelConfig) -> int:
    d, hid, T, C = config.embed_dim, config.hidden_dim, config.num_tokens, config.num_classes
    patch_in = config.channels * config.patch_size**2
    per_block = 2 * d + 3 * d * d + (d * d + d) + 2 * d + (hid * d + hid) + (d * hid + d)
    return (d * patch_in + d) + d + T * d + config.depth * per_block + 2 * d + (C * d + C)


# -- forward ------------------------------------------------------------------------

def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, ch, H, W) -> (B, num_patches, ch*p*p), patches in row-major order."""
    B, ch, Hh, Ww = images.shape
    p = patch_size
    x = images.reshape(B, ch, Hh // p, p, Ww // p, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, (Hh // p) * (Ww // p), ch * p * p)


def attention_forward(model: Model, layer: int, x: Tensor) -> Tensor:
    """Per-head attention outputs, shape (batch, heads, tokens, head_dim).

    Each head computes ``softmax(q k^T / sqrt(head_dim)) v``; heads are not
    merged here.
    """
    if x.ndim != 3 or x.shape[-1] != model.config.embed_dim:
        raise ShapeError(f"attention_forward: expected (batch, tokens, {model.config.embed_dim}), got {x.shape}")
    B, T, _ = x.shape
    h, dh = model.heads[layer], model.head_dim
    n = block_param_names(layer)

    def split(w: Tensor) -> Tensor:
        y = x @ ops.transpose(w, (1, 0))
        return ops.transpose(ops.reshape(y, (B, T, h, dh)), (0, 2, 1, 3))

    q, k, v = split(model.p(n["q"])), split(model.p(n["k"])), split(model.p(n["v"]))
    scores = ops.scale(q @ ops.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    return ops.softmax(scores) @ v


def _embed(model: Model, images) -> Tensor:
    cfg = model.config
    data = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if data.ndim != 4 or data.shape[1:] != expected:
        raise ShapeError(f"forward: expected images (batch, {expected[0]}, {expected[1]}, {expected[2]}), got {data.shape}")
    B = data.shape[0]
    patches = Tensor(patchify(data, cfg.patch_size))
    x = patches @ ops.transpose(model.p("patch_embed.weight"), (1, 0)) + model.p("patch_embed.bias")
    cls = ops.broadcast_to(ops.reshape(model.p("cls_token"), (1, 1, cfg.embed_dim)), (B, 1, cfg.embed_dim))
    return ops.concat([cls, x], axis=1) + model.p("pos_embed")


def _linear(x: Tensor, weight: Tensor, bias: Tensor, mask: Tensor | None) -> Tensor:
    """``x W^T + b``; with a per-sample ``mask`` (batch, out, in) uses ``(mask * W)``."""
    if mask is None:
        return x @ ops.transpose(weight, (1, 0)) + bias
    w = mask * weight
    return x @ ops.transpose(w, (0, 2, 1)) + bias


def run_blocks(model: Model, images, gates: Mapping[int, Mapping[str, Tensor]] | None = None) -> Tensor:
    """Shared forward. ``gates[layer]`` may hold per-sample tensors:

    ``head`` (batch, heads, head_dim) multiplying each head's output slice,
    and ``proj``/``fc1``/``fc2`` (batch, out, in) multiplying the weights.
    """
    x = _embed(model, images)
    B, T, _ = x.shape
    dh = model.head_dim
    for layer in range(model.depth):
        n = block_param_names(layer)
        g = gates.get(layer, {}) if gates else {}
        h = model.heads[layer]

        y = ops.layer_norm(x, model.p(n["norm1.weight"]), model.p(n["norm1.bias"]))
        per_head = attention_forward(model, layer, y)
        if g.get("head") is not None:
            per_head = per_head * ops.reshape(g["head"], (B, h, 1, dh))
        merged = ops.reshape(ops.transpose(per_head, (0, 2, 1, 3)), (B, T, h * dh))
        x = x + _linear(merged, model.p(n["proj.weight"]), model.p(n["proj.bias"]), g.get("proj"))

        y = ops.layer_norm(x, model.p(n["norm2.weight"]), model.p(n["norm2.bias"]))
        y = ops.gelu(_linear(y, model.p(n["fc1.weight"]), model.p(n["fc1.bias"]), g.get("fc1")))
        x = x + _linear(y, model.p(n["fc2.weight"]), model.p(n["fc2.bias"]), g.get("fc2"))

    x = ops.layer_norm(x, model.p("norm.weight"), model.p("norm.bias"))
    cls = ops.reshape(x[:, 0, :], (B, model.config.embed_dim))
    return cls @ ops.transpose(model.p("head.weight"), (1, 0)) + model.p("head.bias")


def forward(model: Model, images) -> Tensor:
    """Logits (batch, num_classes) of the unmasked model."""
    return run_blocks(model, images)


def predict(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        out.append(forward(model, images[start : start + batch_size]).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    return float((predict(model, images) == np.asarray(labels)).mean())


# -- prunable units -------------------------------------------------------------------

def head_param_count(model: Model) -> int:
    d, dh = model.config.embed_dim, model.head_dim
    return 3 * d * dh + dh * d


def neuron_param_count(model: Model) -> int:
    # fc1 row + fc1 bias + fc2 column
    return 2 * model.config.embed_dim + 1


def prunable_units(model: Model) -> list[PrunableUnit]:
    """Every attention head and MLP neuron, ordered by layer then kind then index."""
    units = []
    hp, npc = head_param_count(model), neuron_param_count(model)
    for layer in range(model.depth):
        units.extend(PrunableUnit(layer, "head", i, hp) for i in range(model.heads[layer]))
        units.extend(PrunableUnit(layer, "neuron", j, npc) for j in range(model.hidden[layer]))
    return units


def unit_groups(units: Sequence[PrunableUnit]) -> list[tuple[int, str]]:
    """Distinct (layer, kind) groups in first-seen order; each gets its own threshold and rate."""
    seen: dict[tuple[int, str], None] = {}
    for u in units:
        seen.setdefault(u.group, None)
    return list(seen)


def apply_structural_prune(model: Model, keep: Mapping[int, Keep]) -> Model:
    """Return a physically smaller copy keeping only the listed heads/neurons.

    Layers absent from ``keep`` are copied unchanged. Indices refer to the
    current (possibly already pruned) model.
    """
    out = model.clone()
    dh = model.head_dim
    for layer, spec in keep.items():
        heads = sorted(set(int(i) for i in spec.heads))
        neurons = sorted(set(int(j) for j in spec.neurons))
        if not heads or not neurons:
            raise DegenerateArchitectureError(f"layer {layer} would keep {len(heads)} heads and {len(neurons)} neurons")
        if heads[-1] >= model.heads[layer] or heads[0] < 0:
            raise ShapeError(f"layer {layer}: head index out of range for {model.heads[layer]} heads")
        if neurons[-1] >= model.hidden[layer] or neurons[0] < 0:
            raise ShapeError(f"layer {layer}: neuron index out of range for {model.hidden[layer]} neurons")
        n = block_param_names(layer)
        cols = np.concatenate([np.arange(i * dh, (i + 1) * dh) for i in heads])
        P = out.params

        def sliced(name: str, index) -> Tensor:
            src = model.p(name)
            return Tensor(src.data[index], requires_grad=src.requires_grad)

        for key in ("q", "k", "v"):
            P[n[key]] = sliced(n[key], cols)
        P[n["proj.weight"]] = sliced(n["proj.weight"], (slice(None), cols))
        P[n["fc1.weight"]] = sliced(n["fc1.weight"], neurons)
        P[n["fc1.bias"]] = sliced(n["fc1.bias"], neurons)
        P[n["fc2.weight"]] = sliced(n["fc2.weight"], (slice(None), neurons))
        out.heads[layer] = len(heads)
        out.hidden[layer] = len(neurons)
        out.unit_ids[f"{layer}.head"] = [model.unit_ids[f"{layer}.head"][i] for i in heads]
        out.unit_ids[f"{layer}.neuron"] = [model.unit_ids[f"{layer}.neuron"][j] for j in neurons]
    return out
