from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import NonFiniteError, XPrunerError
from .tensor import Tensor, Tape


def tape_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    leaf = Tensor(x, requires_grad=True)
    loss = f(leaf)
    Tape(loss).backward()
    return np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-5,
    coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences.

    The relative error of coordinate i is ``|g_i - fd_i| / max(|g_i|, |fd_i|, floor)``
    where ``floor = 1e-3 * max|g| + 1e-12`` keeps coordinates whose true
    derivative is zero from dividing round-off by round-off.

    ``coords`` limits the check to that many coordinates drawn without
    replacement (seeded); by default every coordinate is checked.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    analytic = tape_gradient(f, x)

    flat = x.reshape(-1)
    if coords is None or coords >= flat.size:
        indices = np.arange(flat.size)
    else:
        indices = np.sort(np.random.default_rng(seed).choice(flat.size, size=coords, replace=False))

    numeric = np.empty(indices.size)
    for k, i in enumerate(indices):
        numeric[k] = (_eval(f, flat, x.shape, i, eps) - _eval(f, flat, x.shape, i, -eps)) / (2.0 * eps)

    g = analytic.reshape(-1)[indices]
    floor = 1e-3 * float(np.max(np.abs(analytic))) + 1e-12
    denom = np.maximum(np.maximum(np.abs(g), np.abs(numeric)), floor)
    return float(np.max(np.abs(g - numeric) / denom)) if indices.size else 0.0


def _eval(f, flat: np.ndarray, shape, i: int, delta: float) -> float:
    probe = flat.copy()
    probe[i] += delta
    try:
        v = f(Tensor(probe.reshape(shape))).item()
    except NonFiniteError as exc:
        raise XPrunerError(f"function is non-finite near coordinate {i}") from exc
    if not np.isfinite(v):
        raise XPrunerError(f"function is non-finite near coordinate {i}")
    return v
