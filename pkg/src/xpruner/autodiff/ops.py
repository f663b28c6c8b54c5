"""Differentiable primitives.

Each primitive computes its forward value with numpy, checks it is finite and
registers a closure that maps the output adjoint to the parent adjoints.
Broadcasting follows numpy; adjoints of broadcast operands are summed back to
the operand's shape.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, as_tensor

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product; a python scalar operand gives scalar multiplication."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)

    def backward(g):
        return (g * k,)

    return Tensor._from_op(a.data * k, (a,), backward, "scale")


def abs(a: Tensor) -> Tensor:  # noqa: A001
    """|a| with subgradient 0 at 0."""
    sign = np.sign(a.data)

    def backward(g):
        return (g * sign,)

    return Tensor._from_op(np.abs(a.data), (a,), backward, "abs")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return Tensor._from_op(out, (a,), backward, "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), backward, "relu")


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._from_op(out, (a,), backward, "gelu")


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "matmul")


# -- shape manipulation ----------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor._from_op(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return Tensor._from_op(np.transpose(a.data, axes), (a,), backward, "transpose")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(out, dtype=np.float64), (a,), backward, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tensors, backward, "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None

    def backward(g):
        return (unbroadcast(g, a.shape),)

    return Tensor._from_op(out, (a,), backward, "broadcast_to")


# -- reductions ------------------------------------------------------------------

def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def l1_norm(a: Tensor) -> Tensor:
    return sum(abs(a))


def l2_norm(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm over ``axis`` (an axis group). Gradient at a zero group is 0."""
    axes = _normalize_axes(axis, a.ndim)
    norm = np.sqrt((a.data * a.data).sum(axis=axes, keepdims=True))
    out = norm if keepdims else np.squeeze(norm, axis=axes)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        safe = np.where(norm > 0, norm, 1.0)
        return (np.where(norm > 0, g * a.data / safe, 0.0),)

    return Tensor._from_op(np.asarray(out), (a,), backward, "l2_norm")


# -- normalisation and losses ------------------------------------------------------

def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(out, (a,), backward, "softmax")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Layer normalisation over the last axis with affine weight and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data
    width = x.shape[-1]

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = unbroadcast(g * xhat, weight.shape)
        if bias.requires_grad:
            gb = unbroadcast(g, bias.shape)
        if x.requires_grad:
            gxhat = g * weight.data
            gx = inv / width * (
                width * gxhat
                - gxhat.sum(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
            )
        return gx, gw, gb

    return Tensor._from_op(out, (x, weight, bias), backward, "layer_norm")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (batch, C) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"cross_entropy: labels out of range for {logits.shape[1]} classes")
    batch = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    rows = np.arange(batch)
    out = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return Tensor._from_op(np.asarray(out), (logits,), backward, "cross_entropy")


# -- indexing along a class axis ------------------------------------------------------

def gather(a: Tensor, index, axis: int) -> Tensor:
    """Select one slice along ``axis`` per batch element.

    ``out[i] = a.take(index[i], axis)``, so the result has shape
    ``(len(index),) + a.shape`` without ``axis``. The adjoint scatter-adds
    back into the selected slices.
    """
    index = np.asarray(index, dtype=np.int64)
    axis = axis % a.ndim
    if index.ndim != 1:
        raise ShapeError(f"gather: index must be 1-D, got shape {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[axis]):
        raise ShapeError(f"gather: index out of range for axis {axis} of shape {a.shape}")
    moved = np.moveaxis(a.data, axis, 0)
    out = moved[index]

    def backward(g):
        acc = np.zeros_like(moved)
        np.add.at(acc, index, g)
        return (np.moveaxis(acc, 0, axis),)

    return Tensor._from_op(out, (a,), backward, "gather")


def second_difference(a: Tensor, axis: int) -> Tensor:
    """Discrete second difference along ``axis`` with replicate padding.

    ``d[c] = a[c+1] - 2 a[c] + a[c-1]`` where ``a[-1] = a[0]`` and
    ``a[n] = a[n-1]``; the output has the input's shape.
    """
    axis = axis % a.ndim
    x = np.moveaxis(a.data, axis, 0)
    n = x.shape[0]
    prev = np.concatenate([x[:1], x[:-1]], axis=0)
    nxt = np.concatenate([x[1:], x[-1:]], axis=0)
    out = np.moveaxis(nxt - 2.0 * x + prev, 0, axis)

    def backward(g):
        gm = np.moveaxis(g, axis, 0)
        acc = -2.0 * gm
        # adjoint of the "next" gather: slot c+1 feeds d[c], last slot also feeds d[n-1]
        acc[1:] += gm[:-1]
        acc[n - 1] += gm[n - 1]
        # adjoint of the "prev" gather: slot c-1 feeds d[c], first slot also feeds d[0]
        acc[:-1] += gm[1:]
        acc[0] += gm[0]
        return (np.moveaxis(acc, 0, axis),)

    return Tensor._from_op(out, (a,), backward, "second_difference")
