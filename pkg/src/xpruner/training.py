"""Batching and the plain cross-entropy training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .autodiff import Tape, ops
from .optim import AdamW
from .vit import Model, accuracy, forward

logger = logging.getLogger(__name__)

SHUFFLE_STREAM = 2


def epoch_order(n: int, seed: int, epoch: int, stream: int = SHUFFLE_STREAM) -> np.ndarray:
    """Permutation of ``range(n)`` for one epoch; a pure function of (seed, epoch, stream)."""
    return np.random.default_rng([seed, stream, epoch]).permutation(n)


def iterate_batches(n: int, batch_size: int, seed: int, epoch: int, stream: int = SHUFFLE_STREAM) -> Iterator[np.ndarray]:
    order = epoch_order(n, seed, epoch, stream)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    @property
    def best_train_accuracy(self) -> float:
        return max((r["train_accuracy"] for r in self.rows), default=0.0)


def train_classifier(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int = 32,
    seed: int = 0,
    weight_decay: float = 0.0,
    eval_images: np.ndarray | None = None,
    eval_labels: np.ndarray | None = None,
    history: History | None = None,
) -> History:
    """Cross-entropy training of every model weight with AdamW.

    One history row per epoch (epoch, loss, train_accuracy, best_train_accuracy
    and test_accuracy when an eval split is given). Epoch 0 records the
    starting point before any update.
    """
    history = history or History()
    model.unfreeze()
    opt = AdamW(model.params, lr=lr, weight_decay=weight_decay)

    def record(epoch: int, loss: float) -> None:
        train_acc = accuracy(model, images, labels)
        best = max(history.best_train_accuracy, train_acc)
        row = {"epoch": epoch, "loss": loss, "train_accuracy": train_acc, "best_train_accuracy": best}
        if eval_images is not None:
            row["test_accuracy"] = accuracy(model, eval_images, eval_labels)
        history.append(**row)
        logger.info("epoch %d loss %.4f train_acc %.4f", epoch, loss, train_acc)

    if not history.rows:
        record(0, _eval_loss(model, images, labels))
    for epoch in range(1, epochs + 1):
        total, seen = 0.0, 0
        for idx in iterate_batches(len(labels), batch_size, seed, epoch):
            opt.zero_grad()
            loss = ops.cross_entropy(forward(model, images[idx]), labels[idx])
            Tape(loss).backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        record(epoch, total / max(seen, 1))
    return history


def _eval_loss(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    total = 0.0
    for start in range(0, len(labels), batch_size):
        sl = slice(start, start + batch_size)
        total += ops.cross_entropy(forward(model, images[sl]), labels[sl]).item() * len(labels[sl])
    return total / max(len(labels), 1)
