"""Parameter and FLOP accounting.

FLOP convention: one multiply-accumulate counts as one FLOP, which is how the
usual DeiT tables report their "GFLOPs"; softmax, layer norm and GELU cost
five operations per element. Bias additions and residual adds are ignored.
Counts depend only on the architecture, never on weight values.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .vit import Model, ModelConfig, prunable_units, unit_groups

ELEMENTWISE_COST = 5


@dataclass
class ResourceReport:
    total_params: int
    prunable_params: int
    per_layer: list[int]
    groups: list[tuple[int, str]]
    flops_total: int = 0
    flops_per_block: list[dict[str, int]] = field(default_factory=list)
    flops_other: dict[str, int] = field(default_factory=dict)
    input_shape: tuple[int, int, int] | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["groups"] = [list(g) for g in self.groups]
        out["input_shape"] = list(self.input_shape) if self.input_shape else None
        return out


def count_params(model: Model) -> ResourceReport:
    """Exact parameter counts by enumerating the model's tensors and prunable units."""
    units = prunable_units(model)
    groups = unit_groups(units)
    per_layer = [sum(u.param_count for u in units if u.group == g) for g in groups]
    return ResourceReport(
        total_params=sum(t.size for t in model.params.values()),
        prunable_params=sum(per_layer),
        per_layer=per_layer,
        groups=groups,
    )


def _architecture(model_or_config):
    if isinstance(model_or_config, ModelConfig):
        cfg = model_or_config
        return cfg, [cfg.num_heads] * cfg.depth, [cfg.hidden_dim] * cfg.depth
    return model_or_config.config, model_or_config.heads, model_or_config.hidden


def block_flops(tokens: int, d: int, heads: int, head_dim: int, hidden: int) -> dict[str, int]:
    inner = heads * head_dim
    attention = (
        3 * tokens * d * inner  # q, k, v projections
        + heads * tokens * tokens * head_dim  # scores
        + ELEMENTWISE_COST * heads * tokens * tokens  # softmax
        + heads * tokens * tokens * head_dim  # weighted values
        + tokens * inner * d  # output projection
    )
    mlp = 2 * tokens * d * hidden + ELEMENTWISE_COST * tokens * hidden
    norm = 2 * ELEMENTWISE_COST * tokens * d
    return {"attention": attention, "mlp": mlp, "norm": norm, "total": attention + mlp + norm}


def count_flops(model, input_shape: tuple[int, int, int] | None = None) -> ResourceReport:
    """Analytic FLOPs for one image of ``input_shape`` = (channels, height, width).

    Accepts a :class:`Model` (possibly pruned) or a bare :class:`ModelConfig`
    (unpruned architecture; parameter fields are then closed-form).
    """
    cfg, heads, hidden = _architecture(model)
    if input_shape is None:
        input_shape = (cfg.channels, cfg.image_size, cfg.image_size)
    ch, height, width = input_shape
    p = cfg.patch_size
    patches = (height // p) * (width // p)
    tokens = patches + 1
    d = cfg.embed_dim

    per_block = [block_flops(tokens, d, heads[l], cfg.head_dim, hidden[l]) for l in range(cfg.depth)]
    other = {
        "patch_embed": patches * ch * p * p * d,
        "final_norm": ELEMENTWISE_COST * tokens * d,
        "classifier": d * cfg.num_classes,
    }
    total = sum(b["total"] for b in per_block) + sum(other.values())

    if isinstance(model, Model):
        report = count_params(model)
    else:
        report = _closed_form_params(cfg)
    report.flops_total = total
    report.flops_per_block = per_block
    report.flops_other = other
    report.input_shape = tuple(input_shape)
    return report


def _closed_form_params(cfg: ModelConfig) -> ResourceReport:
    from .vit import closed_form_param_count

    d, dh = cfg.embed_dim, cfg.head_dim
    groups, per_layer = [], []
    for layer in range(cfg.depth):
        groups += [(layer, "head"), (layer, "neuron")]
        per_layer += [cfg.num_heads * 4 * d * dh, cfg.hidden_dim * (2 * d + 1)]
    return ResourceReport(closed_form_param_count(cfg), sum(per_layer), per_layer, groups)


def remaining_ratio(pruned: ResourceReport | float, baseline: ResourceReport | float) -> float:
    """FLOPs of ``pruned`` relative to ``baseline``."""
    num = pruned.flops_total if isinstance(pruned, ResourceReport) else float(pruned)
    den = baseline.flops_total if isinstance(baseline, ResourceReport) else float(baseline)
    if den == 0:
        raise ZeroDivisionError("baseline FLOPs are zero")
    return num / den
