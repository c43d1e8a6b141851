"""Differentiable operations over `Tensor`.

Every op validates operand shapes, computes the forward result with numpy,
and attaches a backward closure when any input participates in the graph.
Broadcasting follows numpy rules; gradients of broadcast inputs are summed
back to the original shape.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError, NumericError
from .tensor import Tensor, constant, strict_enabled


def _coerce(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return constant(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn) -> Tensor:
    if strict_enabled() and not np.isfinite(data).all():
        raise NumericError("non-finite values produced by a forward operation")
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, like=a)
    out = a.data + b.data

    def bw(g):
        a.accumulate_grad(_unbroadcast(g, a.data.shape))
        b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, like=a)
    out = a.data - b.data

    def bw(g):
        a.accumulate_grad(_unbroadcast(g, a.data.shape))
        b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, like=a)
    out = a.data * b.data

    def bw(g):
        a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bw)


def div(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, like=a)
    # Division by zero yields inf/nan here and is caught by the finiteness
    # checks (strict mode per op, otherwise at step granularity).
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _coerce(a)

    def bw(g):
        a.accumulate_grad(-g)

    return _make(-a.data, (a,), bw)


def square(a) -> Tensor:
    a = _coerce(a)

    def bw(g):
        a.accumulate_grad(g * (2.0 * a.data))

    return _make(a.data * a.data, (a,), bw)


def absolute(a) -> Tensor:
    a = _coerce(a)
    sign = np.sign(a.data)

    def bw(g):
        a.accumulate_grad(g * sign)

    return _make(np.abs(a.data), (a,), bw)


def exp(a) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.data)

    def bw(g):
        a.accumulate_grad(g * out)

    return _make(out, (a,), bw)


def log(a) -> Tensor:
    a = _coerce(a)

    def bw(g):
        a.accumulate_grad(g / a.data)

    return _make(np.log(a.data), (a,), bw)


def tanh(a) -> Tensor:
    a = _coerce(a)
    out = np.tanh(a.data)

    def bw(g):
        a.accumulate_grad(g * (1.0 - out * out))

    return _make(out, (a,), bw)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """GELU via the tanh approximation used by the GPT-2 family."""
    a = _coerce(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        a.accumulate_grad(g * local)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra / shape


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting on leading axes."""
    a = _coerce(a)
    b = _coerce(b, like=a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul needs >=2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def bw(g):
        a.accumulate_grad(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        b.accumulate_grad(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _make(out, (a, b), bw)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out = a.data.reshape(shape)

    def bw(g):
        a.accumulate_grad(g.reshape(a.data.shape))

    return _make(out, (a,), bw)


def transpose(a, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        a.accumulate_grad(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t.accumulate_grad(g[tuple(idx)])

    return _make(out, tuple(tensors), bw)


def take_slice(a, key) -> Tensor:
    """Basic slicing (slices / ints); gradient scatters back into zeros."""
    a = _coerce(a)
    out = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        a.accumulate_grad(full)

    return _make(np.array(out, copy=True), (a,), bw)


def take_rows(table, indices) -> Tensor:
    """Embedding-style row gather along axis 0."""
    table = _coerce(table)
    idx = np.asarray(indices)
    out = table.data[idx]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        table.accumulate_grad(full)

    return _make(np.array(out, copy=True), (table,), bw)


def broadcast_to(a, shape) -> Tensor:
    a = _coerce(a)
    out = np.broadcast_to(a.data, shape)

    def bw(g):
        a.accumulate_grad(_unbroadcast(g, a.data.shape))

    return _make(np.array(out, copy=True), (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def _expand_reduced(g, src_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, src_shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, src_shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        a.accumulate_grad(_expand_reduced(g, a.data.shape, axis, keepdims).astype(a.data.dtype))

    return _make(np.asarray(out), (a,), bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.data.shape[axis]

    def bw(g):
        a.accumulate_grad(
            _expand_reduced(g, a.data.shape, axis, keepdims).astype(a.data.dtype) / n
        )

    return _make(np.asarray(out), (a,), bw)


def _extreme(a, axis, keepdims, fn):
    a = _coerce(a)
    out = fn(a.data, axis=axis, keepdims=keepdims)
    expanded = fn(a.data, axis=axis, keepdims=True) if axis is not None else out

    def bw(g):
        hit = (a.data == expanded).astype(a.data.dtype)
        hit /= hit.sum(axis=axis, keepdims=True) if axis is not None else hit.sum()
        a.accumulate_grad(_expand_reduced(g, a.data.shape, axis, keepdims) * hit)

    return _make(np.asarray(out), (a,), bw)


def tmax(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; ties share the gradient equally."""
    return _extreme(a, axis, keepdims, np.max)


def tmin(a, axis=None, keepdims=False) -> Tensor:
    return _extreme(a, axis, keepdims, np.min)


# ---------------------------------------------------------------------------
# fused neural-network ops


def softmax(a, axis=-1, blocked=None) -> Tensor:
    """Stable softmax along `axis`.

    `blocked` is an optional boolean array (broadcastable to the input) that
    assigns exactly zero probability to the marked positions.  Rows must keep
    at least one unblocked position.
    """
    a = _coerce(a)
    x = a.data
    if blocked is not None:
        x = np.where(blocked, -np.inf, x)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    denom = e.sum(axis=axis, keepdims=True)
    if np.any(denom == 0.0) or not np.isfinite(denom).all():
        raise NumericError("softmax row with no admissible positions")
    y = e / denom

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        a.accumulate_grad(y * (g - dot))

    return _make(y, (a,), bw)


def log_softmax(a, axis=-1) -> Tensor:
    a = _coerce(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        soft = np.exp(out)
        a.accumulate_grad(g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), bw)


def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    """Standardize the last axis to zero mean / unit variance, then affine."""
    x = _coerce(x)
    gamma = _coerce(gamma, like=x)
    beta = _coerce(beta, like=x)
    d = x.data.shape[-1] if x.data.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty last axis")
    if eps <= 0:
        raise DimensionError("layer_norm requires eps > 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        x.accumulate_grad(dx)
        reduce_axes = tuple(range(g.ndim - 1))
        gamma.accumulate_grad(_unbroadcast((g * xhat).sum(axis=reduce_axes), gamma.data.shape))
        beta.accumulate_grad(_unbroadcast(g.sum(axis=reduce_axes), beta.data.shape))

    return _make(out, (x, gamma, beta), bw)


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate <= 0."""
    a = _coerce(a)
    if rate <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype)
    scale = 1.0 / (1.0 - rate)
    mask = keep * scale

    def bw(g):
        a.accumulate_grad(g * mask)

    return _make(a.data * mask, (a,), bw)
