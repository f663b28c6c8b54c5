"""Datasets: seeded synthetic gratings and IDX (MNIST-style) files."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, CountMismatchError, TruncatedFileError

DATA_STREAM = 1

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (count, channels, H, W) in [0, 1]
    labels: np.ndarray  # (count,) ints in [0, num_classes)
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) == 0:
            raise ValueError(f"{self.split} split is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("images must be normalised to [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)


def class_templates(num_classes: int, image_size: int) -> np.ndarray:
    """One sinusoidal grating per class; class c has its own orientation and frequency."""
    coords = (np.arange(image_size) + 0.5) / image_size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    out = np.empty((num_classes, image_size, image_size))
    for c in range(num_classes):
        angle = np.pi * c / num_classes
        freq = 2.0 + c
        phase = xx * np.cos(angle) + yy * np.sin(angle)
        out[c] = 0.5 + 0.4 * np.sin(2.0 * np.pi * freq * phase)
    return out


def synth_dataset(
    seed: int,
    num_classes: int = 3,
    samples_per_class: int = 200,
    image_size: int = 32,
    noise: float = 0.1,
    split: str = "train",
) -> Dataset:
    """Balanced grating images plus seeded Gaussian noise, clipped to [0, 1].

    Samples are ordered class-major (all of class 0 first). Different splits
    draw noise from different sub-streams of ``seed``.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    split_id = {"train": 0, "test": 1}.get(split, 2)
    rng = np.random.default_rng([seed, DATA_STREAM, split_id])
    templates = class_templates(num_classes, image_size)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    images = templates[labels] + noise * rng.standard_normal((labels.size, image_size, image_size))
    images = np.clip(images, 0.0, 1.0)[:, None, :, :]
    return Dataset(images, labels, num_classes, split)


def nearest_template_accuracy(dataset: Dataset) -> float:
    templates = class_templates(dataset.num_classes, dataset.images.shape[-1]).reshape(dataset.num_classes, -1)
    flat = dataset.images.reshape(len(dataset), -1)
    dist = ((flat[:, None, :] - templates[None]) ** 2).sum(axis=2)
    return float((dist.argmin(axis=1) == dataset.labels).mean())


# -- IDX ------------------------------------------------------------------------------------

def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(path: Path, magic: int, ndim: int) -> tuple[tuple[int, ...], np.ndarray]:
    raw = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise TruncatedFileError(path, len(raw), "file ends inside the magic number")
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise BadMagicError(path, 0, f"expected magic 0x{magic:08x}, found 0x{found:08x}")
    if len(raw) < header:
        raise TruncatedFileError(path, len(raw), f"file ends inside the {header}-byte header")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise TruncatedFileError(path, len(raw), f"payload truncated: need {expected} bytes, file has {len(raw)}")
    payload = np.frombuffer(raw, dtype=np.uint8, count=int(np.prod(dims)), offset=header)
    return dims, payload


def load_idx(images_path, labels_path, num_classes: int | None = None, split: str = "train") -> Dataset:
    """Read an IDX image/label pair (unsigned-byte payloads) into a [0, 1] dataset."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    (count, rows, cols), pixels = _parse_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,), labels = _parse_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if count != n_labels:
        raise CountMismatchError(labels_path, 4, f"{n_labels} labels for {count} images in {images_path}")
    images = pixels.reshape(count, 1, rows, cols).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = max(int(labels.max()) + 1, 2) if labels.size else 2
    return Dataset(images, labels, num_classes, split)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (count, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.size))
        fh.write(labels.tobytes())
