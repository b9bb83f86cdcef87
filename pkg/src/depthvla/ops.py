"""Differentiable tensor operations.

Every function takes and returns :class:`~depthvla.tensor.Tensor` values and
records a backward rule on the active tape. Shapes are checked eagerly so
mismatches surface at the call site.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from depthvla.tensor import ShapeError, Tensor, as_tensor, record

# Blocked attention logits use a large finite sentinel so that masked rows
# never produce inf - inf.
MASK_NEG = -1e9


class MaskError(ValueError):
    """Raised when an attention mask blocks every key for some query."""


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _coerce(a, b):
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if a_t and not b_t:
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif b_t and not a_t:
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.grad_enabled else None,
            _unbroadcast(g * ad, bd.shape) if b.grad_enabled else None,
        )

    return record(ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c)
    return record(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return record(ad * ad, (a,), lambda g: (2 * g * ad,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # weight-matrix case: fold leading axes so the weight gradient is one GEMM
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (n,))

        def bw2(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.grad_enabled else None
            gb = a2.T @ g2 if b.grad_enabled else None
            return ga, gb

        return record(out, (a, b), bw2)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.grad_enabled else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.grad_enabled else None
        return ga, gb

    return record(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for a (K, N) weight, fused into one tape node."""
    if b is None or w.ndim != 2:
        y = matmul(x, w)
        return y if b is None else add(y, b)
    k, n = w.shape
    if x.shape[-1] != k or b.shape != (n,):
        raise ShapeError(f"linear: input {x.shape}, weight {w.shape}, bias {b.shape}")
    xd = x.data
    x2 = xd.reshape(-1, k)
    out = (x2 @ w.data + b.data).reshape(xd.shape[:-1] + (n,))

    def bw(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ w.data.T).reshape(xd.shape) if x.grad_enabled else None
        gw = x2.T @ g2 if w.grad_enabled else None
        gb = g2.sum(axis=0) if b.grad_enabled else None
        return gx, gw, gb

    return record(out, (x, w, b), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    f = xd.dtype.type
    x2 = xd * xd
    t = np.tanh(f(_GELU_C) * xd * (f(1.0) + f(0.044715) * x2))
    out = f(0.5) * xd * (f(1.0) + t)

    def bw(g):
        dinner = f(_GELU_C) * (f(1.0) + f(3 * 0.044715) * x2)
        return (g * (f(0.5) * (f(1.0) + t) + f(0.5) * xd * (f(1.0) - t * t) * dinner),)

    return record(out, (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or not training."""
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = 1.0 - rate
    m = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return record(x.data * m, (x,), lambda g: (g * m,))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(np.asarray(out, dtype=x.dtype), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    if n == 0:
        raise ShapeError(f"mean over an empty axis of shape {x.shape}")
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return record(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = np.broadcast_to(x.data, tuple(shape)).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {old} to {tuple(shape)}") from None
    return record(out, (x,), lambda g: (_unbroadcast(g, old),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat needs at least one tensor")
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {ref} and {x.shape}")
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return record(np.concatenate([x.data for x in xs], axis=ax), tuple(xs), bw)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """``x[start:stop]`` along ``axis``."""
    shape = x.shape
    ax = axis % x.ndim
    idx = (slice(None),) * ax + (slice(start, stop),)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return record(x.data[idx], (x,), bw)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    return slice_axis(x, -1, start, stop)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids are integer bookkeeping (no gradient)."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"embedding ids must be integers, got {ids.dtype}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n}): min {ids.min()}, max {ids.max()}")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return record(table.data[ids], (table,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return record(p, (x,), bw)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: gain {gain.shape} / bias {bias.shape} must be ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = None
        if x.grad_enabled:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, (d,)) if gain.grad_enabled else None
        gbias = _unbroadcast(g, (d,)) if bias.grad_enabled else None
        return gx, ggain, gbias

    return record(out.astype(xd.dtype, copy=False), (x, gain, bias), bw)


def check_mask(mask: np.ndarray) -> None:
    blocked = mask <= MASK_NEG / 2
    if blocked.all(axis=-1).any():
        rows = np.argwhere(blocked.all(axis=-1))
        raise MaskError(f"attention mask blocks every key for query index {tuple(rows[0])}")


def attention_weights(q: np.ndarray, k: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax attention weights as a plain array (no tape)."""
    scale_ = 1.0 / math.sqrt(q.shape[-1])
    s = (q @ np.swapaxes(k, -1, -2)) * q.dtype.type(scale_)
    if mask is not None:
        s = s + mask
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """``softmax(q kᵀ / sqrt(d) + mask) v`` over the last two axes.

    ``mask`` holds 0 for allowed pairs and :data:`MASK_NEG` for blocked ones.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    m = None
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        m = m.astype(q.dtype, copy=False)
        if m.shape[-2:] != (q.shape[-2], k.shape[-2]):
            raise ShapeError(f"attention: mask {m.shape} does not match {q.shape[-2]}x{k.shape[-2]}")
        check_mask(m)
    qd, kd, vd = q.data, k.data, v.data
    c = qd.dtype.type(1.0 / math.sqrt(qd.shape[-1]))
    p = attention_weights(qd, kd, m)
    out = p @ vd

    def bw(g):
        gv = _unbroadcast(np.swapaxes(p, -1, -2) @ g, vd.shape) if v.grad_enabled else None
        dp = g @ np.swapaxes(vd, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * c
        gq = _unbroadcast(ds @ kd, qd.shape) if q.grad_enabled else None
        gk = _unbroadcast(np.swapaxes(ds, -1, -2) @ qd, kd.shape) if k.grad_enabled else None
        return gq, gk, gv

    return record(out, (q, k, v), bw)


def mse(pred: Tensor, target) -> Tensor:
    d = sub(pred, target)
    return mean(square(d))
