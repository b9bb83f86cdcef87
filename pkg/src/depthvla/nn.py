"""Parameter initialisation and shared transformer building blocks."""

from __future__ import annotations

import numpy as np

from depthvla import ops
from depthvla.tensor import DEFAULT_DTYPE, Tensor

Params = dict[str, Tensor]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(DEFAULT_DTYPE)


def param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(np.asarray(data, dtype=DEFAULT_DTYPE), grad_enabled=True, name=name)


INIT_STD = None  # None: 1/sqrt(fan_in)


def init_linear(params: Params, rng, prefix: str, d_in: int, d_out: int, zero: bool = False) -> None:
    std = INIT_STD if INIT_STD is not None else 1.0 / np.sqrt(d_in)
    w = np.zeros((d_in, d_out), DEFAULT_DTYPE) if zero else trunc_normal(rng, (d_in, d_out), std)
    params[f"{prefix}.w"] = param(w, f"{prefix}.w")
    params[f"{prefix}.b"] = param(np.zeros(d_out), f"{prefix}.b")


def init_layernorm(params: Params, prefix: str, d: int) -> None:
    params[f"{prefix}.g"] = param(np.ones(d), f"{prefix}.g")
    params[f"{prefix}.b"] = param(np.zeros(d), f"{prefix}.b")


def linear(params: Params, prefix: str, x: Tensor) -> Tensor:
    return ops.linear(x, params[f"{prefix}.w"], params[f"{prefix}.b"])


def layernorm(params: Params, prefix: str, x: Tensor) -> Tensor:
    return ops.layernorm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def init_attention(params: Params, rng, prefix: str, d_model: int, d_kv: int | None = None,
                   zero_out: bool = False) -> None:
    d_kv = d_model if d_kv is None else d_kv
    init_linear(params, rng, f"{prefix}.q", d_model, d_model)
    init_linear(params, rng, f"{prefix}.k", d_kv, d_model)
    init_linear(params, rng, f"{prefix}.v", d_kv, d_model)
    init_linear(params, rng, f"{prefix}.o", d_model, d_model, zero=zero_out)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return ops.transpose(ops.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def attention(params: Params, prefix: str, x: Tensor, heads: int, context: Tensor | None = None,
              mask=None, weights_out: list | None = None) -> Tensor:
    """Multi-head attention of ``x`` over ``context`` (self-attention if None).

    If ``weights_out`` is given, the (B, heads, Tq, Tk) softmax weights are
    appended to it as a plain array.
    """
    ctx = x if context is None else context
    q = _split_heads(linear(params, f"{prefix}.q", x), heads)
    k = _split_heads(linear(params, f"{prefix}.k", ctx), heads)
    v = _split_heads(linear(params, f"{prefix}.v", ctx), heads)
    if weights_out is not None:
        m = None if mask is None else np.asarray(mask, dtype=q.dtype)
        weights_out.append(ops.attention_weights(q.data, k.data, m))
    y = ops.scaled_dot_attention(q, k, v, mask)
    return linear(params, f"{prefix}.o", _merge_heads(y))


def init_mlp(params: Params, rng, prefix: str, d: int, hidden: int) -> None:
    init_linear(params, rng, f"{prefix}.fc1", d, hidden)
    init_linear(params, rng, f"{prefix}.fc2", hidden, d)


def mlp(params: Params, prefix: str, x: Tensor) -> Tensor:
    return linear(params, f"{prefix}.fc2", ops.gelu(linear(params, f"{prefix}.fc1", x)))


def init_block(params: Params, rng, prefix: str, d: int, mlp_ratio: int = 2) -> None:
    init_layernorm(params, f"{prefix}.ln1", d)
    init_attention(params, rng, f"{prefix}.attn", d)
    init_layernorm(params, f"{prefix}.ln2", d)
    init_mlp(params, rng, f"{prefix}.mlp", d, mlp_ratio * d)


def block(params: Params, prefix: str, x: Tensor, heads: int, mask=None,
          weights_out: list | None = None) -> Tensor:
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""
    h = attention(params, f"{prefix}.attn", layernorm(params, f"{prefix}.ln1", x), heads,
                  mask=mask, weights_out=weights_out)
    x = ops.add(x, h)
    return ops.add(x, mlp(params, f"{prefix}.mlp", layernorm(params, f"{prefix}.ln2", x)))


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, N, H, W, C) images -> (B, N * P, patch * patch * C) flattened patches.

    Patches are ordered row-major within a view and views in order; each
    patch vector lists its pixels row-major with channels innermost.
    """
    images = np.asarray(images)
    if images.ndim != 5:
        raise ValueError(f"expected (B, N, H, W, C) images, got shape {images.shape}")
    b, n, h, w, c = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, n, gh, patch, gw, patch, c).transpose(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(b, n * gh * gw, patch * patch * c)
