"""The three training phases plus reporting, as file-to-file commands.

Every command reads its inputs from checkpoints and writes its artifacts into
the run's output directory. Artifacts never embed paths, timestamps or other
run-local state, so the same config and seed give byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Dataset, load_idx, synth_dataset
from .errors import ConfigError, NonConvergenceError, PipelineOrderError
from .prune import (
    FoldReport,
    ThresholdSearch,
    accumulated_rate,
    check_budget_feasible,
    converged,
    finetune,
    hard_prune,
    init_prune_state,
)
from .resources import count_flops
from .training import epoch_order, iterate_batches, train_classifier
from .vit import Model, accuracy, build_model, prunable_units
from .xmask import (
    MaskLossWeights,
    check_compatible,
    init_masks,
    mask_optimizer,
    mask_training_step,
    unit_class_means,
    unit_scores,
)

logger = logging.getLogger(__name__)

MASK_STREAM = 3
SEARCH_STREAM = 4

BASELINE_CKPT = "baseline.ckpt"
MASKS_CKPT = "masks.ckpt"
SEARCH_CKPT = "search.ckpt"
PRUNED_CKPT = "pruned.ckpt"
FINETUNED_CKPT = "finetuned.ckpt"

# fields that describe where a run lives rather than what it computes
_LOCAL_FIELDS = ("out_dir", "train_images", "train_labels", "test_images", "test_labels")


# -- helpers ---------------------------------------------------------------------------------

def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "synthetic":
        if cfg.channels != 1:
            raise ConfigError("the synthetic dataset is single-channel", field="channels")
        common = dict(num_classes=cfg.num_classes, image_size=cfg.image_size, noise=cfg.noise)
        train = synth_dataset(cfg.seed, samples_per_class=cfg.samples_per_class, split="train", **common)
        test = synth_dataset(cfg.seed, samples_per_class=cfg.test_samples_per_class, split="test", **common)
    else:
        train = load_idx(cfg.train_images, cfg.train_labels, cfg.num_classes, "train")
        test = load_idx(cfg.test_images, cfg.test_labels, cfg.num_classes, "test")
    for ds in (train, test):
        if ds.images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ConfigError(
                f"{ds.split} images have shape {ds.images.shape[1:]}, config expects "
                f"{(cfg.channels, cfg.image_size, cfg.image_size)}",
                field="image_size",
            )
    return train, test


def run_settings(cfg: RunConfig) -> dict:
    return {k: v for k, v in cfg.to_dict().items() if k not in _LOCAL_FIELDS}


def _architecture_key(config) -> dict:
    d = config.to_dict()
    d.pop("seed", None)
    return d


def _out(cfg: RunConfig) -> Path:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_csv(path: Path, rows: list[dict], columns: list[str] | None = None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    Path(path).write_text(buf.getvalue())


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _phase(ckpt: Checkpoint) -> str:
    return ckpt.metadata.get("phase", "")


# -- baseline --------------------------------------------------------------------------------

def cmd_train_baseline(cfg: RunConfig) -> Path:
    """Train the unmasked model with cross-entropy; writes baseline.ckpt and baseline_metrics.csv."""
    cfg.validate()
    train, test = load_data(cfg)
    out = _out(cfg)
    model = build_model(cfg.model_config())
    history = train_classifier(
        model, train.images, train.labels, cfg.baseline_epochs, cfg.baseline_lr,
        batch_size=cfg.batch_size, seed=cfg.seed, eval_images=test.images, eval_labels=test.labels,
    )
    last = history.rows[-1]
    write_csv(out / "baseline_metrics.csv", history.rows,
              ["epoch", "loss", "train_accuracy", "best_train_accuracy", "test_accuracy"])
    meta = {
        "phase": "baseline",
        "seed": cfg.seed,
        "epoch": cfg.baseline_epochs,
        "history": history.rows,
        "train_accuracy": last["train_accuracy"],
        "test_accuracy": last["test_accuracy"],
        "settings": run_settings(cfg),
    }
    path = out / BASELINE_CKPT
    save_checkpoint(path, Checkpoint(model, metadata=meta))
    logger.info("baseline: train acc %.4f test acc %.4f -> %s", last["train_accuracy"], last["test_accuracy"], path)
    return path


# -- masks -----------------------------------------------------------------------------------

def mask_statistics(masks, model: Model) -> list[dict]:
    rows = []
    for layer in range(model.depth):
        for kind in ("head", "neuron"):
            means = unit_class_means(masks, layer, kind)
            scores = unit_scores(masks.detached(), layer, kind).data
            ids = model.unit_ids[f"{layer}.{kind}"]
            for i in range(scores.size):
                row = {"layer": layer, "kind": kind, "unit": ids[i]}
                row.update({f"class_{c}_mean": float(means[i, c]) for c in range(masks.num_classes)})
                row["score"] = float(scores[i])
                rows.append(row)
    return rows


def cmd_train_masks(cfg: RunConfig, baseline_ckpt=None) -> Path:
    """Learn class-wise masks on the frozen baseline; writes masks.ckpt and mask_stats.csv."""
    cfg.validate()
    out = _out(cfg)
    ckpt = load_checkpoint(baseline_ckpt or out / BASELINE_CKPT)
    if _phase(ckpt) != "baseline":
        raise PipelineOrderError(f"train-masks needs a baseline checkpoint, got phase {_phase(ckpt)!r}")
    if _architecture_key(ckpt.config) != _architecture_key(cfg.model_config()):
        raise ConfigError("baseline checkpoint architecture does not match the config", field="architecture")
    train, _ = load_data(cfg)
    model = ckpt.model
    before = model.weight_hash()
    masks = init_masks(model)
    opt = mask_optimizer(masks, lr=cfg.mask_lr, momentum=cfg.mask_momentum)
    weights = MaskLossWeights(smooth=cfg.lambda_sm, sparse=cfg.lambda_sp)
    history = []
    for epoch in range(1, cfg.mask_epochs + 1):
        sums, seen = {"loss": 0.0, "ce": 0.0, "smooth": 0.0, "sparse": 0.0}, 0
        for idx in iterate_batches(len(train), cfg.batch_size, cfg.seed, epoch, stream=MASK_STREAM):
            total, parts = mask_training_step(model, masks, train.images[idx], train.labels[idx], weights, opt)
            sums["loss"] += total * len(idx)
            for k in ("ce", "smooth", "sparse"):
                sums[k] += parts[k] * len(idx)
            seen += len(idx)
        history.append({"epoch": epoch, **{k: v / seen for k, v in sums.items()}})
        logger.info("masks epoch %d loss %.5f", epoch, history[-1]["loss"])
    if model.weight_hash() != before:
        raise RuntimeError("model weights changed during mask training")
    stats = mask_statistics(masks, model)
    columns = ["layer", "kind", "unit"] + [f"class_{c}_mean" for c in range(cfg.num_classes)] + ["score"]
    write_csv(out / "mask_stats.csv", stats, columns)
    write_csv(out / "mask_metrics.csv", history, ["epoch", "loss", "ce", "smooth", "sparse"])
    meta = dict(ckpt.metadata)
    meta.update(phase="masks", mask_history=history, weight_hash=before, settings=run_settings(cfg))
    path = out / MASKS_CKPT
    save_checkpoint(path, Checkpoint(model, masks, metadata=meta))
    return path


# -- threshold search and hard prune ---------------------------------------------------------

def search_batch(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices of the mini-batch used at search step ``step`` (a pure function of the step)."""
    per_epoch = math.ceil(n / batch_size)
    epoch, k = divmod(step, per_epoch)
    return epoch_order(n, seed, epoch, SEARCH_STREAM)[k * batch_size : (k + 1) * batch_size]


def cmd_prune(cfg: RunConfig, mask_ckpt=None) -> Path:
    """Search thresholds and rates, then hard-prune and fold.

    Accepts a masks checkpoint, or a search checkpoint to resume an
    interrupted search. Writes search.ckpt (resumable state), pruned.ckpt,
    fold_report.json and search_metrics.csv. Raises NonConvergenceError when
    the step cap is hit with |R - alpha| above the tolerance.
    """
    cfg.validate()
    out = _out(cfg)
    ckpt = load_checkpoint(mask_ckpt or out / MASKS_CKPT)
    if ckpt.masks is None or _phase(ckpt) not in ("masks", "search"):
        raise PipelineOrderError("prune needs a checkpoint with trained masks (run train-masks first)")
    train, test = load_data(cfg)
    model, masks = ckpt.model, ckpt.masks
    check_compatible(model, masks)
    units = prunable_units(model)

    resuming = _phase(ckpt) == "search"
    if resuming:
        state = ckpt.prune_state
        if state.alpha != cfg.alpha:
            raise ConfigError(f"search checkpoint was started with alpha={state.alpha}", field="alpha")
        history = list(ckpt.metadata.get("search_history", []))
    else:
        state = init_prune_state(
            masks, units, cfg.alpha, sharpness=cfg.gate_sharpness, suppression=cfg.suppression,
            variant=cfg.gate_variant, granularity=cfg.granularity, theta_init=cfg.theta_init_value,
        )
        history = []
    check_budget_feasible(state)
    search = ThresholdSearch(model, masks, state, lr_prune=cfg.prune_lr, lr_other=cfg.other_lr,
                             momentum=cfg.mask_momentum)
    if resuming:
        search.load_optimizer_arrays(ckpt.optimizer)

    done = state.step >= cfg.prune_min_steps and converged(state, cfg.tolerance)
    while not done and state.step < cfg.prune_steps:
        idx = search_batch(len(train), cfg.batch_size, cfg.seed, state.step)
        metrics = search.step(train.images[idx], train.labels[idx])
        history.append(metrics)
        done = state.step >= cfg.prune_min_steps and converged(state, cfg.tolerance)
    write_csv(out / "search_metrics.csv", history,
              ["step", "loss", "ce", "lagrangian", "R", "R_after", "beta", "gamma"])

    meta = dict(ckpt.metadata)
    meta.update(phase="search", search_history=history, settings=run_settings(cfg))
    save_checkpoint(out / SEARCH_CKPT,
                    Checkpoint(model, masks, state, metadata=meta, optimizer=search.optimizer_arrays()))
    R = accumulated_rate(state).item()
    if not done:
        write_json(out / "search_report.json",
                   {"alpha": cfg.alpha, "achieved_R": R, "steps": state.step, "tolerance": cfg.tolerance})
        raise NonConvergenceError(R, cfg.alpha, state.step)

    pruned, report = hard_prune(model, masks, state, units)
    report_dict = report.to_dict()
    report_dict.update(
        search_steps=state.step,
        train_accuracy=accuracy(pruned, train.images, train.labels),
        test_accuracy=accuracy(pruned, test.images, test.labels),
        gate_variant=cfg.gate_variant,
        granularity=cfg.granularity,
    )
    write_json(out / "fold_report.json", report_dict)
    meta = {
        "phase": "pruned",
        "seed": cfg.seed,
        "alpha": cfg.alpha,
        "fold_report": report_dict,
        "train_accuracy": report_dict["train_accuracy"],
        "test_accuracy": report_dict["test_accuracy"],
        "baseline_test_accuracy": ckpt.metadata.get("test_accuracy"),
        "settings": run_settings(cfg),
    }
    path = out / PRUNED_CKPT
    save_checkpoint(path, Checkpoint(pruned, metadata=meta))
    logger.info("pruned: R %.4f achieved %.4f flops ratio %.4f test acc %.4f",
                R, report.achieved_rate, report.flops_ratio, report_dict["test_accuracy"])
    return path


# -- fine-tune -------------------------------------------------------------------------------

def cmd_finetune(cfg: RunConfig, pruned_ckpt=None) -> Path:
    """Fine-tune a pruned model; writes finetuned.ckpt and finetune_metrics.csv."""
    cfg.validate()
    out = _out(cfg)
    ckpt = load_checkpoint(pruned_ckpt or out / PRUNED_CKPT)
    if _phase(ckpt) not in ("pruned", "finetuned"):
        raise PipelineOrderError(f"finetune needs a pruned checkpoint, got phase {_phase(ckpt)!r}")
    train, test = load_data(cfg)
    tuned, history = finetune(ckpt.model, train.images, train.labels, cfg.finetune_epochs, cfg.finetune_lr,
                              batch_size=cfg.batch_size, seed=cfg.seed,
                              eval_images=test.images, eval_labels=test.labels)
    write_csv(out / "finetune_metrics.csv", history.rows,
              ["epoch", "loss", "train_accuracy", "best_train_accuracy", "test_accuracy"])
    meta = dict(ckpt.metadata)
    meta.update(
        phase="finetuned",
        finetune_history=history.rows,
        train_accuracy=history.rows[-1]["train_accuracy"],
        test_accuracy=history.rows[-1]["test_accuracy"],
        pruned_test_accuracy=ckpt.metadata.get("test_accuracy"),
        settings=run_settings(cfg),
    )
    path = out / FINETUNED_CKPT
    save_checkpoint(path, Checkpoint(tuned, metadata=meta))
    return path


# -- report ----------------------------------------------------------------------------------

REPORT_COLUMNS = [
    "checkpoint", "phase", "alpha", "target_rate", "achieved_rate", "params_after", "params_ratio",
    "flops_after", "flops_ratio", "train_accuracy", "test_accuracy",
]
LAYER_COLUMNS = [
    "layer", "rate_heads", "rate_neurons", "threshold_heads", "threshold_neurons", "kept_heads",
    "kept_neurons", "params_before", "params_after", "flops_before", "flops_after",
]


def _report_row(name: str, ckpt: Checkpoint) -> dict:
    fold = ckpt.metadata.get("fold_report")
    if fold is None:
        flops = count_flops(ckpt.model)
        fold = {"alpha": 0.0, "target_rate": 0.0, "achieved_rate": 0.0,
                "params_after": flops.total_params, "params_ratio": 1.0,
                "flops_after": flops.flops_total, "flops_ratio": 1.0}
    row = {"checkpoint": name, "phase": _phase(ckpt)}
    row.update({k: fold[k] for k in REPORT_COLUMNS[2:9]})
    row["train_accuracy"] = ckpt.metadata.get("train_accuracy")
    row["test_accuracy"] = ckpt.metadata.get("test_accuracy")
    return row


def layer_table(fold: dict) -> list[dict]:
    rows = []
    for entry in fold["layers"]:
        rows.append({
            "layer": entry["layer"],
            "rate_heads": entry["rate"]["heads"],
            "rate_neurons": entry["rate"]["neurons"],
            "threshold_heads": entry["threshold"]["heads"],
            "threshold_neurons": entry["threshold"]["neurons"],
            "kept_heads": len(entry["kept_heads"]),
            "kept_neurons": len(entry["kept_neurons"]),
            **{k: entry[k] for k in ("params_before", "params_after", "flops_before", "flops_after")},
        })
    return rows


def cmd_report(cfg: RunConfig, checkpoints) -> dict:
    """Consolidate checkpoints into report.json / report.csv.

    Rows are sorted by alpha. With a single pruned checkpoint the per-layer
    table is written to report_layers.csv as well.
    """
    paths = [Path(p) for p in checkpoints]
    if not paths:
        raise ConfigError("report needs at least one checkpoint", field="checkpoints")
    loaded = [(p, load_checkpoint(p)) for p in paths]
    reference = _architecture_key(loaded[0][1].config)
    for p, ck in loaded[1:]:
        if _architecture_key(ck.config) != reference:
            raise ConfigError(f"{p.name}: architecture differs from {paths[0].name}", field="checkpoints")
    rows = sorted((_report_row(p.name, ck) for p, ck in loaded), key=lambda r: (r["alpha"], r["checkpoint"]))
    result = {"architecture": reference, "rows": rows}
    out = _out(cfg)
    write_csv(out / "report.csv", rows, REPORT_COLUMNS)
    if len(loaded) == 1 and "fold_report" in loaded[0][1].metadata:
        layers = layer_table(loaded[0][1].metadata["fold_report"])
        result["layers"] = layers
        write_csv(out / "report_layers.csv", layers, LAYER_COLUMNS)
    write_json(out / "report.json", result)
    return result
