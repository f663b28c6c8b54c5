"""Binary checkpoints: JSON header plus little-endian float64 sections.

Layout::

    8 bytes   magic b"XPRCKPT\\0"
    4 bytes   format version (uint32 LE)
    4 bytes   CRC-32 of header + payload (uint32 LE)
    8 bytes   header length in bytes (uint64 LE)
    header    UTF-8 JSON, keys sorted, no whitespace
    payload   concatenated '<f8' arrays in the order listed by header["tensors"]

Writing the same checkpoint twice yields identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import CheckpointError, ChecksumError, VersionMismatchError
from .prune import PruneState
from .vit import Model, ModelConfig
from .xmask import MASK_KEYS, MaskSet

MAGIC = b"XPRCKPT\0"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<IIQ")


@dataclass
class Checkpoint:
    model: Model
    masks: MaskSet | None = None
    prune_state: PruneState | None = None
    metadata: dict = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.config


def _sections(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"model.{k}", t.data) for k, t in sorted(ckpt.model.params.items())]
    if ckpt.masks is not None:
        out += [(f"masks.{k}", t.data) for k, t in ckpt.masks.named()]
    if ckpt.prune_state is not None:
        out += [(f"prune.{k}", v) for k, v in sorted(ckpt.prune_state.arrays().items())]
    out += [(f"optim.{k}", v) for k, v in sorted(ckpt.optimizer.items())]
    return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    sections = _sections(ckpt)
    index, chunks, offset = [], [], 0
    for name, arr in sections:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "config": ckpt.model.config.to_dict(),
        "architecture": {
            "heads": list(ckpt.model.heads),
            "hidden": list(ckpt.model.hidden),
            "unit_ids": ckpt.model.unit_ids,
        },
        "masks": None if ckpt.masks is None else {"num_classes": ckpt.masks.num_classes, "layers": len(ckpt.masks.layers)},
        "prune_state": None if ckpt.prune_state is None else ckpt.prune_state.scalars(),
        "metadata": ckpt.metadata,
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    payload = b"".join(chunks)
    crc = zlib.crc32(header_bytes + payload) & 0xFFFFFFFF
    return MAGIC + _PREAMBLE.pack(FORMAT_VERSION, crc, len(header_bytes)) + header_bytes + payload


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    start = len(MAGIC) + _PREAMBLE.size
    if len(raw) < start or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file")
    version, crc, header_len = _PREAMBLE.unpack_from(raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{source}: format version {version}, expected {FORMAT_VERSION}")
    body = raw[start:]
    if (zlib.crc32(body) & 0xFFFFFFFF) != crc:
        raise ChecksumError(f"{source}: checksum mismatch")
    try:
        header = json.loads(body[:header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable header") from exc
    payload = body[header_len:]

    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        chunk = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointError(f"{source}: section {entry['name']} truncated")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(entry["shape"])

    config = ModelConfig(**header["config"])
    arch = header["architecture"]
    params = {k[len("model.") :]: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith("model.")}
    model = Model(config, params, list(arch["heads"]), list(arch["hidden"]), unit_ids=arch["unit_ids"])

    masks = None
    if header["masks"] is not None:
        layers = [
            {key: Tensor(arrays[f"masks.{layer}.{key}"], requires_grad=True) for key in MASK_KEYS}
            for layer in range(header["masks"]["layers"])
        ]
        masks = MaskSet(layers, header["masks"]["num_classes"])

    state = None
    if header["prune_state"] is not None:
        state = PruneState.from_parts(
            header["prune_state"], {k[len("prune.") :]: v for k, v in arrays.items() if k.startswith("prune.")}
        )
    optimizer = {k[len("optim.") :]: v for k, v in arrays.items() if k.startswith("optim.")}
    return Checkpoint(model, masks, state, header["metadata"], optimizer)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    data = to_bytes(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(raw, str(path))
