"""Differentiable threshold/rate search, hard structural pruning and mask folding.

Pruning groups are (layer, kind) pairs: the heads of one block form a group,
the MLP neurons of the same block form another. Each group has its own
threshold and rate. The budget ``alpha`` is the fraction of prunable
parameters to remove.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .autodiff import Tape, Tensor, ops
from .errors import DegenerateArchitectureError, NonFiniteError, NonFiniteLossError, ShapeError
from .optim import SGD, AdamW
from .resources import count_flops
from .training import History, train_classifier
from .vit import Keep, Model, PrunableUnit, apply_structural_prune, block_param_names, unit_groups
from .xmask import MaskSet, check_compatible, masked_forward, unit_scores

logger = logging.getLogger(__name__)

GateVariant = Literal["verbatim", "rectified"]
Granularity = Literal["unit", "elementwise"]


def kept_count(rate: float, units: int) -> int:
    """ceil((1 - rate) * units), never below one."""
    return max(1, math.ceil((1.0 - rate) * units - 1e-9))


def max_rate(units: int) -> float:
    """Largest rate that still keeps one unit."""
    return 1.0 - 1.0 / units


@dataclass
class PruneState:
    groups: list[tuple[int, str]]
    group_units: list[int]
    group_params: list[int]
    theta: Tensor
    rate: Tensor
    beta: Tensor
    gamma: Tensor
    alpha: float
    sharpness: float = 10.0
    suppression: float = 500.0
    variant: GateVariant = "verbatim"
    granularity: Granularity = "unit"
    step: int = 0

    @property
    def total_params(self) -> int:
        return int(sum(self.group_params))

    def group_index(self, layer: int, kind: str) -> int:
        return self.groups.index((layer, kind))

    def rate_bounds(self) -> np.ndarray:
        return np.array([max_rate(u) for u in self.group_units])

    def clamp(self) -> None:
        self.rate.data = np.clip(self.rate.data, 0.0, self.rate_bounds())
        self.beta.data = np.maximum(self.beta.data, 0.0)

    def trainable(self) -> dict[str, Tensor]:
        return {"theta": self.theta, "rate": self.rate}

    def scalars(self) -> dict:
        return {
            "groups": [list(g) for g in self.groups],
            "group_units": list(self.group_units),
            "group_params": list(self.group_params),
            "alpha": self.alpha,
            "sharpness": self.sharpness,
            "suppression": self.suppression,
            "variant": self.variant,
            "granularity": self.granularity,
            "step": self.step,
        }

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "theta": self.theta.data,
            "rate": self.rate.data,
            "beta": self.beta.data.reshape(1),
            "gamma": self.gamma.data.reshape(1),
        }

    @classmethod
    def from_parts(cls, scalars: dict, arrays: dict[str, np.ndarray]) -> "PruneState":
        return cls(
            groups=[tuple(g) for g in scalars["groups"]],
            group_units=list(scalars["group_units"]),
            group_params=list(scalars["group_params"]),
            theta=Tensor(arrays["theta"], requires_grad=True),
            rate=Tensor(arrays["rate"], requires_grad=True),
            beta=Tensor(arrays["beta"].reshape(()), requires_grad=True),
            gamma=Tensor(arrays["gamma"].reshape(()), requires_grad=True),
            alpha=scalars["alpha"],
            sharpness=scalars["sharpness"],
            suppression=scalars["suppression"],
            variant=scalars["variant"],
            granularity=scalars["granularity"],
            step=scalars["step"],
        )


def init_prune_state(
    masks: MaskSet,
    units: Sequence[PrunableUnit],
    alpha: float,
    sharpness: float = 10.0,
    suppression: float = 500.0,
    variant: GateVariant = "verbatim",
    granularity: Granularity = "unit",
    theta_init: float | Literal["boundary"] = "boundary",
) -> PruneState:
    """Rates start at ``alpha`` and the multipliers at zero.

    ``theta_init="boundary"`` places each group's threshold halfway between the
    lowest kept and the highest dropped unit score under the initial rate, so
    kept units start with positive gates and dropped ones with negative gates.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    groups = unit_groups(units)
    group_units = [sum(1 for u in units if u.group == g) for g in groups]
    group_params = [sum(u.param_count for u in units if u.group == g) for g in groups]
    if min(group_units, default=0) == 0:
        raise ShapeError("every pruning group needs at least one unit")
    rates = np.minimum(np.full(len(groups), alpha), [max_rate(u) for u in group_units])
    if theta_init == "boundary":
        theta = np.array([_boundary_threshold(masks, g, r, granularity) for g, r in zip(groups, rates)])
    else:
        theta = np.full(len(groups), float(theta_init))
    return PruneState(
        groups=groups,
        group_units=group_units,
        group_params=group_params,
        theta=Tensor(theta, requires_grad=True),
        rate=Tensor(rates, requires_grad=True),
        beta=Tensor(0.0, requires_grad=True),
        gamma=Tensor(0.0, requires_grad=True),
        alpha=float(alpha),
        sharpness=sharpness,
        suppression=suppression,
        variant=variant,
        granularity=granularity,
    )


def _boundary_threshold(masks: MaskSet, group, rate: float, granularity: str) -> float:
    layer, kind = group
    if granularity == "elementwise":
        values = np.sort(np.concatenate([t.data.ravel() for t in _group_tensors(masks, layer, kind)]))[::-1]
    else:
        values = np.sort(unit_scores(masks.detached(), layer, kind).data)[::-1]
    k = kept_count(rate, values.size)
    if k >= values.size:
        return float(values[-1]) - 0.5
    return 0.5 * float(values[k - 1] + values[k])


# -- soft pruning ------------------------------------------------------------------------

@dataclass
class GroupDecision:
    layer: int
    kind: str
    scores: np.ndarray
    kept: np.ndarray
    gates: np.ndarray


@dataclass
class GateDecision:
    groups: list[GroupDecision] = field(default_factory=list)

    def group(self, layer: int, kind: str) -> GroupDecision:
        for g in self.groups:
            if g.layer == layer and g.kind == kind:
                return g
        raise KeyError((layer, kind))


def top_k_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` highest scores; ties go to the lower index."""
    order = np.lexsort((np.arange(scores.size), -scores))
    kept = np.zeros(scores.size, dtype=bool)
    kept[order[:k]] = True
    return kept


def _group_tensors(masks: MaskSet, layer: int, kind: str) -> list[Tensor]:
    group = masks.layers[layer]
    return [group["head"], group["proj"]] if kind == "head" else [group["fc1"], group["fc2"]]


def _gate_factors(state: PruneState, gate: Tensor, kept: np.ndarray) -> tuple[Tensor, Tensor]:
    """Multiplicative factor for kept entries and additive value for dropped ones."""
    keep = kept.astype(np.float64)
    drop = 1.0 - keep
    suppressed = ops.relu(gate) if state.variant == "rectified" else gate
    return gate * keep, ops.scale(suppressed, state.suppression) * drop


def soft_prune(masks: MaskSet, state: PruneState, units: Sequence[PrunableUnit] | None = None) -> tuple[MaskSet, GateDecision]:
    """Gate every mask entry by its unit's score relative to the group threshold.

    With ``g = tanh(n (s - theta))``, entries of kept units become ``e * g``
    and entries of dropped units become ``p * g`` (``p * max(g, 0)`` for the
    rectified variant). The kept set is the top ``ceil((1 - r) * units)`` by
    score and is held constant for differentiation.
    """
    if units is not None and unit_groups(units) != state.groups:
        raise ShapeError("unit list does not match the prune state's groups")
    out_layers = [dict(group) for group in masks.layers]
    decision = GateDecision()
    for g, (layer, kind) in enumerate(state.groups):
        if state.group_units[g] == 0:
            raise ShapeError(f"layer {layer} has no {kind} units")
        theta = ops.getitem(state.theta, g)
        rate = float(state.rate.data[g])
        if state.granularity == "elementwise":
            decision.groups.append(_soft_prune_elementwise(masks, state, layer, kind, theta, rate, out_layers))
            continue
        scores = unit_scores(masks, layer, kind)
        u = scores.shape[0]
        kept = top_k_mask(scores.data, kept_count(rate, u))
        gate = ops.tanh(ops.scale(scores - theta, state.sharpness))
        keep_f, drop_v = _gate_factors(state, gate, kept)
        group = masks.layers[layer]
        if kind == "head":
            h, C, dh = group["head"].shape
            d = group["proj"].shape[1]
            out_layers[layer]["head"] = group["head"] * ops.reshape(keep_f, (h, 1, 1)) + ops.reshape(drop_v, (h, 1, 1))
            proj = ops.reshape(group["proj"], (C, d, h, dh))
            proj = proj * ops.reshape(keep_f, (1, 1, h, 1)) + ops.reshape(drop_v, (1, 1, h, 1))
            out_layers[layer]["proj"] = ops.reshape(proj, (C, d, h * dh))
        else:
            out_layers[layer]["fc1"] = group["fc1"] * ops.reshape(keep_f, (1, u, 1)) + ops.reshape(drop_v, (1, u, 1))
            out_layers[layer]["fc2"] = group["fc2"] * ops.reshape(keep_f, (1, 1, u)) + ops.reshape(drop_v, (1, 1, u))
        decision.groups.append(GroupDecision(layer, kind, scores.data.copy(), kept, gate.data.copy()))
    return MaskSet(out_layers, masks.num_classes), decision


def _soft_prune_elementwise(masks, state, layer, kind, theta, rate, out_layers) -> GroupDecision:
    tensors = _group_tensors(masks, layer, kind)
    keys = ("head", "proj") if kind == "head" else ("fc1", "fc2")
    values = np.concatenate([t.data.ravel() for t in tensors])
    kept_all = top_k_mask(values, kept_count(rate, values.size))
    gates, offset = [], 0
    for key, t in zip(keys, tensors):
        kept = kept_all[offset : offset + t.size].reshape(t.shape)
        offset += t.size
        gate = ops.tanh(ops.scale(t - theta, state.sharpness))
        keep_f, drop_v = _gate_factors(state, gate, kept)
        out_layers[layer][key] = t * keep_f + drop_v
        gates.append(gate.data.ravel())
    return GroupDecision(layer, kind, values, kept_all, np.concatenate(gates))


# -- budget ------------------------------------------------------------------------------

def accumulated_rate(state: PruneState, units: Sequence[PrunableUnit] | None = None) -> Tensor:
    """Parameter-weighted mean of the group rates, sum_l r_l n_l / N."""
    if units is not None:
        groups = unit_groups(units)
        if groups != state.groups:
            raise ShapeError("unit list does not match the prune state's groups")
        params = np.array([sum(u.param_count for u in units if u.group == g) for g in groups], dtype=np.float64)
    else:
        params = np.asarray(state.group_params, dtype=np.float64)
    total = params.sum()
    if total == 0:
        raise ZeroDivisionError("no prunable parameters")
    return ops.sum(state.rate * (params / total))


def lagrangian(state: PruneState, R) -> Tensor:
    """beta (alpha - R)^2 + gamma (alpha - R)."""
    gap = ops.sub(state.alpha, R)
    return state.beta * (gap * gap) + state.gamma * gap


# -- threshold search --------------------------------------------------------------------

class ThresholdSearch:
    """Joint optimisation of thresholds, rates, masks and weights.

    Thresholds and rates descend with AdamW at ``lr_prune``; masks and model
    weights descend with SGD (momentum) at ``lr_other``; the multipliers take
    a plain gradient-ascent step at ``lr_dual`` with beta kept non-negative.
    """

    def __init__(
        self,
        model: Model,
        masks: MaskSet,
        state: PruneState,
        lr_prune: float = 0.02,
        lr_other: float = 5e-4,
        momentum: float = 0.9,
        lr_dual: float | None = None,
    ):
        check_compatible(model, masks)
        model.unfreeze()
        for t in masks.tensors().values():
            t.requires_grad = True
        for t in (state.theta, state.rate, state.beta, state.gamma):
            t.requires_grad = True
        self.model, self.masks, self.state = model, masks, state
        self.lr_dual = lr_prune if lr_dual is None else lr_dual
        self.prune_opt = AdamW(state.trainable(), lr=lr_prune)
        other = {f"model.{k}": v for k, v in model.params.items()}
        other.update({f"masks.{k}": v for k, v in masks.tensors().items()})
        self.other_opt = SGD(other, lr=lr_other, momentum=momentum)

    def loss(self, images, labels) -> tuple[Tensor, dict[str, float]]:
        """Total objective ce + L_R at the current state; raises on non-finite terms."""
        try:
            gated, _ = soft_prune(self.masks, self.state)
            ce = ops.cross_entropy(masked_forward(self.model, gated, images, labels), labels)
        except NonFiniteError as exc:
            raise NonFiniteLossError("ce", float("nan")) from exc
        R = accumulated_rate(self.state)
        penalty = lagrangian(self.state, R)
        for term, value in (("ce", ce.item()), ("lagrangian", penalty.item())):
            if not math.isfinite(value):
                raise NonFiniteLossError(term, value)
        total = ce + penalty
        return total, {"loss": total.item(), "ce": ce.item(), "lagrangian": penalty.item(), "R": R.item()}

    def step(self, images, labels) -> dict[str, float]:
        st = self.state
        self.zero_grad()
        total, metrics = self.loss(images, labels)
        Tape(total).backward()
        self.prune_opt.step()
        self.other_opt.step()
        # dual ascent on the multipliers
        if st.beta.grad is not None:
            st.beta.data = st.beta.data + self.lr_dual * st.beta.grad
        if st.gamma.grad is not None:
            st.gamma.data = st.gamma.data + self.lr_dual * st.gamma.grad
        st.clamp()
        st.step += 1
        metrics.update(
            R_after=accumulated_rate(st).item(),
            beta=float(st.beta.data),
            gamma=float(st.gamma.data),
            step=st.step,
        )
        return metrics

    def zero_grad(self) -> None:
        self.prune_opt.zero_grad()
        self.other_opt.zero_grad()
        self.state.beta.grad = None
        self.state.gamma.grad = None

    def optimizer_arrays(self) -> dict[str, np.ndarray]:
        out = {f"prune.{k}": v for k, v in self.prune_opt.state_arrays().items()}
        out.update({f"other.{k}": v for k, v in self.other_opt.state_arrays().items()})
        return out

    def load_optimizer_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.prune_opt.load_state_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("prune.")})
        self.other_opt.load_state_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("other.")})


def converged(state: PruneState, tolerance: float = 0.02) -> bool:
    return abs(accumulated_rate(state).item() - state.alpha) <= tolerance


def check_budget_feasible(state: PruneState) -> None:
    """Raise if alpha exceeds what can be removed while keeping one unit per group."""
    bounds = state.rate_bounds()
    reachable = float(np.dot(bounds, state.group_params) / state.total_params)
    if state.alpha > reachable:
        raise DegenerateArchitectureError(
            f"alpha={state.alpha} needs removing more than the {reachable:.4f} fraction that leaves every layer with a head and a neuron"
        )


# -- hard pruning ------------------------------------------------------------------------

def fold_masks(model: Model, gated: MaskSet) -> Model:
    """Multiply class-averaged gated masks into the weights (``W <- W * mean_c(M)``)."""
    out = model.clone()
    for layer, group in enumerate(gated.layers):
        n = block_param_names(layer)
        head = group["head"].data.mean(axis=1)  # (heads, head_dim)
        v = out.params[n["v"]]
        v.data = v.data * head.reshape(-1, 1)
        for key, name in (("proj", "proj.weight"), ("fc1", "fc1.weight"), ("fc2", "fc2.weight")):
            w = out.params[n[name]]
            w.data = w.data * group[key].data.mean(axis=0)
    return out


@dataclass
class FoldReport:
    alpha: float
    target_rate: float
    achieved_rate: float
    layers: list[dict]
    params_before: int
    params_after: int
    prunable_before: int
    prunable_after: int
    flops_before: int
    flops_after: int
    input_shape: list[int]

    @property
    def flops_ratio(self) -> float:
        return self.flops_after / self.flops_before

    @property
    def params_ratio(self) -> float:
        return self.params_after / self.params_before

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "target_rate": self.target_rate,
            "achieved_rate": self.achieved_rate,
            "params_before": self.params_before,
            "params_after": self.params_after,
            "prunable_before": self.prunable_before,
            "prunable_after": self.prunable_after,
            "flops_before": self.flops_before,
            "flops_after": self.flops_after,
            "flops_ratio": self.flops_ratio,
            "params_ratio": self.params_ratio,
            "input_shape": list(self.input_shape),
            "layers": self.layers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldReport":
        keys = ("alpha", "target_rate", "achieved_rate", "layers", "params_before", "params_after",
                "prunable_before", "prunable_after", "flops_before", "flops_after", "input_shape")
        return cls(**{k: d[k] for k in keys})


def hard_prune(model: Model, masks: MaskSet, state: PruneState, units: Sequence[PrunableUnit] | None = None) -> tuple[Model, FoldReport]:
    """Remove the lowest-scoring units per group and fold the surviving gated masks into the weights."""
    check_compatible(model, masks)
    gated, decision = soft_prune(masks.detached(), _frozen_state(state), units)
    if state.granularity == "elementwise":
        return _hard_prune_elementwise(model, gated, decision, state)
    keep: dict[int, Keep] = {}
    for layer in range(model.depth):
        heads = np.flatnonzero(decision.group(layer, "head").kept)
        neurons = np.flatnonzero(decision.group(layer, "neuron").kept)
        if heads.size == 0 or neurons.size == 0:
            raise DegenerateArchitectureError(f"layer {layer} would be left without heads or neurons")
        keep[layer] = Keep(heads.tolist(), neurons.tolist())

    pruned = apply_structural_prune(fold_masks(model, gated), keep)
    before = count_flops(model)
    after = count_flops(pruned)
    R = accumulated_rate(state).item()
    layers = []
    for layer in range(model.depth):
        gh, gn = state.group_index(layer, "head"), state.group_index(layer, "neuron")
        layers.append(
            {
                "layer": layer,
                "rate": {"heads": float(state.rate.data[gh]), "neurons": float(state.rate.data[gn])},
                "threshold": {"heads": float(state.theta.data[gh]), "neurons": float(state.theta.data[gn])},
                "kept_heads": pruned.unit_ids[f"{layer}.head"],
                "kept_neurons": pruned.unit_ids[f"{layer}.neuron"],
                "params_before": before.per_layer[gh] + before.per_layer[gn],
                "params_after": after.per_layer[gh] + after.per_layer[gn],
                "flops_before": before.flops_per_block[layer]["total"],
                "flops_after": after.flops_per_block[layer]["total"],
            }
        )
    report = FoldReport(
        alpha=state.alpha,
        target_rate=R,
        achieved_rate=1.0 - after.prunable_params / before.prunable_params,
        layers=layers,
        params_before=before.total_params,
        params_after=after.total_params,
        prunable_before=before.prunable_params,
        prunable_after=after.prunable_params,
        flops_before=before.flops_total,
        flops_after=after.flops_total,
        input_shape=list(before.input_shape),
    )
    return pruned, report


def _hard_prune_elementwise(model: Model, gated: MaskSet, decision: GateDecision, state: PruneState):
    """Unstructured variant: zero dropped mask entries, fold, keep every unit."""
    zeroed = gated.detached()
    for dec in decision.groups:
        keys = ("head", "proj") if dec.kind == "head" else ("fc1", "fc2")
        offset = 0
        for key in keys:
            t = zeroed.layers[dec.layer][key]
            kept = dec.kept[offset : offset + t.size].reshape(t.shape)
            offset += t.size
            t.data = np.where(kept, t.data, 0.0)
    folded = fold_masks(model, zeroed)
    before = count_flops(model)
    zeros = 0
    layers = []
    for layer in range(model.depth):
        n = block_param_names(layer)
        dropped = {k: int(np.count_nonzero(folded.p(n[w]).data == 0)) for k, w in
                   (("v", "v"), ("proj", "proj.weight"), ("fc1", "fc1.weight"), ("fc2", "fc2.weight"))}
        zeros += sum(dropped.values())
        gh, gn = state.group_index(layer, "head"), state.group_index(layer, "neuron")
        layers.append(
            {
                "layer": layer,
                "rate": {"heads": float(state.rate.data[gh]), "neurons": float(state.rate.data[gn])},
                "threshold": {"heads": float(state.theta.data[gh]), "neurons": float(state.theta.data[gn])},
                "kept_heads": folded.unit_ids[f"{layer}.head"],
                "kept_neurons": folded.unit_ids[f"{layer}.neuron"],
                "params_before": before.per_layer[gh] + before.per_layer[gn],
                "params_after": before.per_layer[gh] + before.per_layer[gn],
                "flops_before": before.flops_per_block[layer]["total"],
                "flops_after": before.flops_per_block[layer]["total"],
                "zeroed_weights": dropped,
            }
        )
    report = FoldReport(
        alpha=state.alpha,
        target_rate=accumulated_rate(state).item(),
        achieved_rate=zeros / before.prunable_params,
        layers=layers,
        params_before=before.total_params,
        params_after=before.total_params,
        prunable_before=before.prunable_params,
        prunable_after=before.prunable_params,
        flops_before=before.flops_total,
        flops_after=before.flops_total,
        input_shape=list(before.input_shape),
    )
    return folded, report


def _frozen_state(state: PruneState) -> PruneState:
    return PruneState(
        groups=state.groups,
        group_units=state.group_units,
        group_params=state.group_params,
        theta=Tensor(state.theta.data.copy()),
        rate=Tensor(state.rate.data.copy()),
        beta=Tensor(state.beta.data.copy()),
        gamma=Tensor(state.gamma.data.copy()),
        alpha=state.alpha,
        sharpness=state.sharpness,
        suppression=state.suppression,
        variant=state.variant,
        granularity=state.granularity,
        step=state.step,
    )


def finetune(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int = 32,
    seed: int = 0,
    eval_images: np.ndarray | None = None,
    eval_labels: np.ndarray | None = None,
) -> tuple[Model, History]:
    """Cross-entropy training of all remaining weights; returns a new model."""
    tuned = model.clone()
    history = train_classifier(
        tuned, images, labels, epochs, lr, batch_size=batch_size, seed=seed,
        eval_images=eval_images, eval_labels=eval_labels,
    )
    return tuned, history
