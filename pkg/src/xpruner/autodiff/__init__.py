"""Minimal reverse-mode automatic differentiation over float64 arrays."""

from . import ops
from .gradcheck import grad_check, tape_gradient
from .tensor import Tape, Tensor, as_tensor, backward, zero_grad

__all__ = ["Tape", "Tensor", "as_tensor", "backward", "grad_check", "ops", "tape_gradient", "zero_grad"]
