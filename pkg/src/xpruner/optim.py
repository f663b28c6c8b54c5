"""Small first-order optimizers over named tensors.

State is kept as plain arrays keyed by parameter name so checkpoints can
restore a run mid-phase.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import Tensor


class SGD:
    """SGD with heavy-ball momentum (PyTorch convention: v = mu*v + g; p -= lr*v)."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v = self.velocity.get(name)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[name] = v
                g = v
            p.data = p.data - self.lr * g

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"velocity.{k}": v for k, v in sorted(self.velocity.items())}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.velocity = {k[len("velocity."):]: np.array(v) for k, v in arrays.items() if k.startswith("velocity.")}


class AdamW:
    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = b1 * self.m.get(name, np.zeros_like(g)) + (1 - b1) * g
            v = b2 * self.v.get(name, np.zeros_like(g)) + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            data = p.data
            if self.weight_decay:
                data = data * (1.0 - self.lr * self.weight_decay)
            p.data = data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)])}
        out.update({f"m.{k}": v for k, v in sorted(self.m.items())})
        out.update({f"v.{k}": v for k, v in sorted(self.v.items())})
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.t = int(arrays["t"][0]) if "t" in arrays else 0
        self.m = {k[2:]: np.array(a) for k, a in arrays.items() if k.startswith("m.")}
        self.v = {k[2:]: np.array(a) for k, a in arrays.items() if k.startswith("v.")}
