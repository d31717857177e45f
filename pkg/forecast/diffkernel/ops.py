"""Differentiable primitives.

Every function accepts tensors or array-likes and returns a Tensor. When a tape
is active and at least one input requires gradients, the result is recorded
together with its vector-Jacobian product.
"""

from __future__ import annotations

from typing import Any, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError
from .tape import Tensor, current_tape


def as_tensor(x: Any) -> Tensor:
    """Wrap constants; tensors pass through unchanged."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value: np.ndarray, parents: tuple[Tensor, ...], vjp: Any) -> Tensor:
    out = Tensor(value)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.vjp = vjp
        tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# Elementwise arithmetic


def add(a: Any, b: Any) -> Tensor:
    """a + b with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Any, b: Any) -> Tensor:
    """a - b with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Any, b: Any) -> Tensor:
    """a * b with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def div(a: Any, b: Any) -> Tensor:
    """a / b with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.value / b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.shape),
        ),
    )


def neg(a: Any) -> Tensor:
    """-a."""
    a = as_tensor(a)
    return _result(-a.value, (a,), lambda g: (-g,))


def square(a: Any) -> Tensor:
    """a ** 2."""
    a = as_tensor(a)
    return _result(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def sqrt(a: Any) -> Tensor:
    """Square root."""
    a = as_tensor(a)
    value = np.sqrt(a.value)
    return _result(value, (a,), lambda g: (0.5 * g / value,))


def exp(a: Any) -> Tensor:
    """Exponential."""
    a = as_tensor(a)
    value = np.exp(a.value)
    return _result(value, (a,), lambda g: (g * value,))


def log(a: Any) -> Tensor:
    """Natural logarithm."""
    a = as_tensor(a)
    return _result(np.log(a.value), (a,), lambda g: (g / a.value,))


def tanh(a: Any) -> Tensor:
    """Hyperbolic tangent."""
    a = as_tensor(a)
    value = np.tanh(a.value)
    return _result(value, (a,), lambda g: (g * (1.0 - value * value),))


def sigmoid(a: Any) -> Tensor:
    """Logistic function, computed through tanh for stability."""
    a = as_tensor(a)
    value = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _result(value, (a,), lambda g: (g * value * (1.0 - value),))


def relu(a: Any) -> Tensor:
    """max(a, 0)."""
    a = as_tensor(a)
    return _result(np.maximum(a.value, 0.0), (a,), lambda g: (g * (a.value > 0.0),))


def sin(a: Any) -> Tensor:
    """Sine."""
    a = as_tensor(a)
    return _result(np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),))


def cos(a: Any) -> Tensor:
    """Cosine."""
    a = as_tensor(a)
    return _result(np.cos(a.value), (a,), lambda g: (-g * np.sin(a.value),))


def where(condition: Any, a: Any, b: Any) -> Tensor:
    """Select from `a` where `condition` holds, else from `b`; condition is constant."""
    cond = np.asarray(condition, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        np.where(cond, a.value, b.value),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        ),
    )


def clip(a: Any, low: Any, high: Any) -> Tensor:
    """Clamp into [low, high]; the gradient passes only where no clamping happened."""
    a = as_tensor(a)
    lo, hi = np.asarray(low, dtype=np.float64), np.asarray(high, dtype=np.float64)
    inside = (a.value >= lo) & (a.value <= hi)
    return _result(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


# Reductions and shape manipulation


def sum(  # pylint: disable=redefined-builtin
    a: Any, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    """Sum over `axis` (all axes when None)."""
    a = as_tensor(a)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: Any, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over `axis`."""
    a = as_tensor(a)
    count = a.value.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Any, shape: tuple[int, ...]) -> Tensor:
    """View with a new shape."""
    a = as_tensor(a)
    return _result(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a: Any, axis1: int = -1, axis2: int = -2) -> Tensor:
    """Exchange two axes."""
    a = as_tensor(a)
    return _result(np.swapaxes(a.value, axis1, axis2), (a,), lambda g: (np.swapaxes(g, axis1, axis2),))


def _is_basic(index: Any) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def index(a: Any, idx: Any) -> Tensor:
    """a[idx] for basic or integer-array indices."""
    a = as_tensor(a)
    basic = _is_basic(idx)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.value)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(a.value[idx], (a,), vjp)


def concat(tensors: Sequence[Any], axis: int = -1) -> Tensor:
    """Join along an existing axis."""
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, splits, axis=axis)

    return _result(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), vjp)


def stack(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    """Join along a new axis."""
    parts = [as_tensor(t) for t in tensors]

    def vjp(g: np.ndarray) -> list[np.ndarray]:
        return [np.take(g, i, axis=axis) for i in range(len(parts))]

    return _result(np.stack([p.value for p in parts], axis=axis), tuple(parts), vjp)


# Linear algebra


def matmul(a: Any, b: Any) -> Tensor:
    """Batched matrix product of operands with at least two dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands with >= 2 dims, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _result(
        a.value @ b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape),
            _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape),
        ),
    )


def affine(x: Any, weight: Any, bias: Any) -> Tensor:
    """x @ weight.T + bias for `x` of shape (..., in) and `weight` of shape (out, in)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"affine input of size {x.shape[-1]} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"affine bias {bias.shape} does not match weight {weight.shape}")

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g2 = g.reshape(-1, weight.shape[0])
        x2 = x.value.reshape(-1, weight.shape[1])
        return g @ weight.value, g2.T @ x2, g2.sum(axis=0)

    return _result(x.value @ weight.value.T + bias.value, (x, weight, bias), vjp)


def conv2d(x: Any, weight: Any, bias: Any, stride: int = 1) -> Tensor:
    """Valid cross-correlation of (N, C, H, W) inputs with (F, C, k, k) kernels."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernel {weight.shape}")
    k = weight.shape[2]
    windows = sliding_window_view(x.value, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    value = np.einsum("nchwij,fcij->nfhw", windows, weight.value, optimize=True)
    value = value + bias.value[None, :, None, None]

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_w = np.einsum("nfhw,nchwij->fcij", g, windows, optimize=True)
        grad_x = np.zeros_like(x.value)
        for i in range(k):
            for j in range(k):
                grad_x[:, :, i : i + stride * (out_h - 1) + 1 : stride, j : j + stride * (out_w - 1) + 1 : stride] += (
                    np.einsum("nfhw,fc->nchw", g, weight.value[:, :, i, j], optimize=True)
                )
        return grad_x, grad_w, g.sum(axis=(0, 2, 3))

    return _result(value, (x, weight, bias), vjp)


# Normalisers


def _softmax_values(values: np.ndarray, axis: int) -> np.ndarray:
    shifted = values - np.max(values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(a: Any, axis: int = -1) -> Tensor:
    """Normalised exponential along `axis`."""
    a = as_tensor(a)
    s = _softmax_values(a.value, axis)
    return _result(s, (a,), lambda g: (s * (g - np.sum(g * s, axis=axis, keepdims=True)),))


def log_softmax(a: Any, axis: int = -1) -> Tensor:
    """log(softmax(a)) without forming the softmax explicitly."""
    a = as_tensor(a)
    peak = np.max(a.value, axis=axis, keepdims=True)
    shifted = a.value - peak
    value = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    return _result(
        value,
        (a,),
        lambda g: (g - np.exp(value) * np.sum(g, axis=axis, keepdims=True),),
    )


def logsumexp(a: Any, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(a))) along `axis`, shifted by the maximum."""
    a = as_tensor(a)
    peak = np.max(a.value, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    total = np.log(np.sum(np.exp(a.value - peak), axis=axis, keepdims=True)) + peak
    value = total if keepdims else np.squeeze(total, axis=axis)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(a.value - total),)

    return _result(value, (a,), vjp)
