"""Run configuration: one flat set of fields, loadable from a key=value file.

Config files hold one ``key = value`` pair per line; ``#`` starts a comment,
keys may be written in snake_case or kebab-case. Later sources win:
defaults < config file < command-line flags.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .vit import ModelConfig

OUT_ENV = "XPRUNER_OUT"


def _f(default, help: str):
    return field(default=default, metadata={"help": help})


@dataclass
class RunConfig:
    # model
    image_size: int = _f(32, "input height/width in pixels")
    patch_size: int = _f(8, "patch side in pixels")
    embed_dim: int = _f(64, "token width d")
    depth: int = _f(2, "number of transformer blocks")
    num_heads: int = _f(4, "attention heads per block")
    mlp_ratio: float = _f(2.0, "MLP hidden width as a multiple of embed_dim")
    num_classes: int = _f(3, "number of classes")
    channels: int = _f(1, "image channels")
    # data
    dataset: str = _f("synthetic", "'synthetic' or 'idx'")
    train_images: str = _f("", "IDX image file for training (dataset=idx)")
    train_labels: str = _f("", "IDX label file for training (dataset=idx)")
    test_images: str = _f("", "IDX image file for evaluation (dataset=idx)")
    test_labels: str = _f("", "IDX label file for evaluation (dataset=idx)")
    samples_per_class: int = _f(200, "synthetic training samples per class")
    test_samples_per_class: int = _f(50, "synthetic test samples per class")
    noise: float = _f(0.1, "synthetic pixel noise std")
    # pruning objective
    alpha: float = _f(0.5, "fraction of prunable parameters to remove")
    lambda_sm: float = _f(0.01, "weight of the class-smoothness mask penalty")
    lambda_sp: float = _f(0.01, "weight of the group-sparsity mask penalty")
    gate_sharpness: float = _f(10.0, "n in tanh(n (s - theta))")
    suppression: float = _f(500.0, "p, scale of dropped-unit entries")
    gate_variant: str = _f("verbatim", "'verbatim' or 'rectified' (dropped entries floored at 0)")
    granularity: str = _f("unit", "'unit' (structured) or 'elementwise' (unstructured)")
    theta_init: str = _f("boundary", "'boundary' or a number: initial per-layer threshold")
    tolerance: float = _f(0.02, "search stops once |R - alpha| is within this")
    # optimisation
    baseline_lr: float = _f(1e-3, "AdamW learning rate for baseline training")
    mask_lr: float = _f(0.01, "SGD learning rate for masks")
    mask_momentum: float = _f(0.9, "SGD momentum for masks and the search phase")
    prune_lr: float = _f(0.02, "AdamW learning rate for thresholds and rates (also the dual step)")
    other_lr: float = _f(5e-4, "SGD learning rate for masks and weights during the search")
    finetune_lr: float = _f(5e-4, "AdamW learning rate for fine-tuning")
    batch_size: int = _f(32, "mini-batch size for every phase")
    baseline_epochs: int = _f(30, "baseline training epochs")
    mask_epochs: int = _f(20, "mask training epochs")
    prune_steps: int = _f(200, "maximum threshold-search steps")
    prune_min_steps: int = _f(50, "search steps before the tolerance may end the search")
    finetune_epochs: int = _f(10, "fine-tuning epochs")
    # run
    seed: int = _f(0, "master seed; init/data/shuffle use separate sub-streams")
    out_dir: str = _f("runs", "output directory (overridden by $XPRUNER_OUT)")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            depth=self.depth,
            num_heads=self.num_heads,
            mlp_ratio=self.mlp_ratio,
            num_classes=self.num_classes,
            channels=self.channels,
            seed=self.seed,
        )

    @property
    def output_dir(self) -> Path:
        return Path(os.environ.get(OUT_ENV) or self.out_dir)

    @property
    def theta_init_value(self) -> float | str:
        return "boundary" if self.theta_init == "boundary" else float(self.theta_init)

    def validate(self) -> "RunConfig":
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)", field="alpha")
        for name in ("baseline_lr", "mask_lr", "prune_lr", "other_lr", "finetune_lr", "gate_sharpness",
                     "suppression", "tolerance", "batch_size"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive", field=name)
        for name in ("baseline_epochs", "mask_epochs", "prune_steps", "prune_min_steps", "finetune_epochs",
                     "lambda_sm", "lambda_sp", "noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative", field=name)
        if not 0.0 <= self.mask_momentum < 1.0:
            raise ConfigError("mask_momentum must lie in [0, 1)", field="mask_momentum")
        choices = {"dataset": ("synthetic", "idx"), "gate_variant": ("verbatim", "rectified"),
                   "granularity": ("unit", "elementwise")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}", field=name)
        if self.theta_init != "boundary":
            try:
                float(self.theta_init)
            except ValueError:
                raise ConfigError("theta_init must be 'boundary' or a number", field="theta_init") from None
        if self.dataset == "idx":
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                path = getattr(self, name)
                if not path:
                    raise ConfigError(f"{name} is required when dataset=idx", field=name)
                if not Path(path).is_file():
                    raise ConfigError(f"{name}: no such file {path}", field=name)
        self.model_config()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        return dataclasses.replace(self, **coerce(overrides))


def field_types() -> dict[str, type]:
    hints = typing.get_type_hints(RunConfig)
    return {f.name: hints[f.name] for f in fields(RunConfig)}


def coerce(values: dict) -> dict:
    """Convert string values to the field types; unknown keys raise ConfigError."""
    types = field_types()
    out = {}
    for raw_key, value in values.items():
        key = raw_key.replace("-", "_")
        if key not in types:
            raise ConfigError(f"unknown config key {raw_key!r}", field=raw_key)
        kind = types[key]
        if isinstance(value, str) and kind is not str:
            try:
                value = kind(value)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}", field=key) from None
        out[key] = value
    return out


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return coerce(values)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}", field="config") from exc
        cfg = cfg.with_overrides(parse_config_text(text, str(path)))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
