"""Injecting depth features into vision-language tokens.

Three interchangeable strategies share one entry point, :func:`fuse`:

* ``sem``: mean-pooled depth descriptor -> per-channel FiLM (scale, shift)
* ``concat``: projected depth tokens appended along the token axis
* ``crossattention``: residual cross-attention with Z as queries

``none`` passes Z through untouched (the no-depth baseline).
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from depthvla import nn, ops
from depthvla.nn import Params
from depthvla.tensor import ShapeError, Tensor


class FusionStrategy(str, Enum):
    SEM = "sem"
    CONCAT = "concat"
    CROSSATTENTION = "crossattention"
    NONE = "none"

    @classmethod
    def parse(cls, value) -> "FusionStrategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(s.value for s in cls)
            raise ValueError(f"unknown fusion strategy {value!r}; expected one of {names}") from None


def init_params(strategy, token_dim: int, hidden_dim: int, num_heads: int,
                rng: np.random.Generator, prefix: str = "sem") -> Params:
    strategy = FusionStrategy.parse(strategy)
    params: Params = {}
    if strategy is FusionStrategy.NONE:
        return params
    nn.init_linear(params, rng, f"{prefix}.proj", token_dim, hidden_dim)
    if strategy is FusionStrategy.SEM:
        nn.init_linear(params, rng, f"{prefix}.mod1", hidden_dim, hidden_dim)
        # zero output layer: gamma = 1, beta = 0 at init
        nn.init_linear(params, rng, f"{prefix}.mod2", hidden_dim, 2 * hidden_dim, zero=True)
    elif strategy is FusionStrategy.CROSSATTENTION:
        nn.init_layernorm(params, f"{prefix}.ln_q", hidden_dim)
        nn.init_attention(params, rng, f"{prefix}.xattn", hidden_dim, zero_out=True)
    return params


def project_depth(depth: Tensor, params: Params, prefix: str = "sem") -> Tensor:
    w = params[f"{prefix}.proj.w"]
    if depth.shape[-1] != w.shape[0]:
        raise ShapeError(f"depth features have {depth.shape[-1]} channels, projection expects {w.shape[0]}")
    return nn.linear(params, f"{prefix}.proj", depth)


def pool(projected: Tensor) -> Tensor:
    """Token-mean global descriptor: (B, T, C) -> (B, C)."""
    if projected.shape[-2] < 1:
        raise ShapeError("cannot pool zero tokens")
    return ops.mean(projected, axis=-2)


def modulation_head(g: Tensor, params: Params, prefix: str = "sem") -> tuple[Tensor, Tensor]:
    """Two-layer head returning (gamma, beta), each (B, C), gamma = 1 + delta."""
    h = ops.gelu(nn.linear(params, f"{prefix}.mod1", g))
    out = nn.linear(params, f"{prefix}.mod2", h)
    c = out.shape[-1] // 2
    gamma = ops.add(ops.slice_last(out, 0, c), 1.0)
    beta = ops.slice_last(out, c, 2 * c)
    return gamma, beta


def apply_film(z: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """gamma * z + beta with (B, C) or (C,) factors broadcast over tokens."""
    if gamma.shape[-1] != z.shape[-1] or beta.shape[-1] != z.shape[-1]:
        raise ShapeError(f"FiLM channels: z {z.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if gamma.ndim == z.ndim - 1 and gamma.ndim > 1:
        gamma = ops.reshape(gamma, (gamma.shape[0], 1, gamma.shape[-1]))
        beta = ops.reshape(beta, (beta.shape[0], 1, beta.shape[-1]))
    return ops.add(ops.mul(z, gamma), beta)


def fuse_concat(z: Tensor, depth_tokens: Tensor) -> Tensor:
    if depth_tokens.shape[-2] < 1:
        raise ShapeError("concat fusion needs at least one depth token")
    if depth_tokens.shape[-1] != z.shape[-1]:
        raise ShapeError(f"concat fusion: Z has {z.shape[-1]} channels, depth has {depth_tokens.shape[-1]}")
    return ops.concat([z, depth_tokens], axis=-2)


def fuse_crossattention(z: Tensor, depth_tokens: Tensor, params: Params, num_heads: int,
                        prefix: str = "sem") -> Tensor:
    if depth_tokens.shape[-1] != z.shape[-1]:
        raise ShapeError(f"cross-attention fusion: Z has {z.shape[-1]} channels, depth has {depth_tokens.shape[-1]}")
    q = nn.layernorm(params, f"{prefix}.ln_q", z)
    return ops.add(z, nn.attention(params, f"{prefix}.xattn", q, num_heads, context=depth_tokens))


def fuse(strategy, z: Tensor, depth: Tensor | None, params: Params, num_heads: int,
         prefix: str = "sem") -> Tensor:
    strategy = FusionStrategy.parse(strategy)
    if strategy is FusionStrategy.NONE:
        return z
    projected = project_depth(depth, params, prefix)
    if strategy is FusionStrategy.SEM:
        gamma, beta = modulation_head(pool(projected), params, prefix)
        return apply_film(z, gamma, beta)
    if strategy is FusionStrategy.CONCAT:
        return fuse_concat(z, projected)
    return fuse_crossattention(z, projected, params, num_heads, prefix)
