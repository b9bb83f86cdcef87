"""Flow-matching action expert.

A transformer over the H action tokens of a noisy chunk, conditioned on
the fused vision-language tokens through cross-attention and on the robot
state and interpolation time through additive token embeddings. Trained to
regress the constant velocity ``A - eps`` of the straight path
``tau * A + (1 - tau) * eps`` and sampled by forward Euler from noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from depthvla import nn, ops
from depthvla.nn import Params
from depthvla.tensor import ShapeError, Tensor


@dataclass
class ExpertConfig:
    num_layers: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    dropout: float = 0.0
    denoise_steps: int = 10
    horizon: int = 8
    action_dim: int = 4
    state_dim: int = 4
    cond_dim: int = 32
    time_embed_dim: int = 16

    def __post_init__(self):
        if self.denoise_steps < 1:
            raise ValueError("denoise_steps must be >= 1")
        if self.horizon < 1 or self.action_dim < 1:
            raise ValueError("horizon and action_dim must be >= 1")


FULL_SCALE = dict(num_layers=8, dropout=0.2, horizon=50, action_dim=24, state_dim=24)


@dataclass
class FlowSample:
    tau: np.ndarray
    epsilon: np.ndarray
    noisy: np.ndarray


def interpolate(actions: np.ndarray, epsilon: np.ndarray, tau) -> FlowSample:
    """tau * A + (1 - tau) * eps; ``tau`` is a scalar or one value per batch row."""
    actions = np.asarray(actions)
    epsilon = np.asarray(epsilon)
    if actions.shape != epsilon.shape:
        raise ShapeError(f"interpolate: actions {actions.shape} vs noise {epsilon.shape}")
    tau = np.asarray(tau, dtype=actions.dtype)
    if np.any(tau < 0) or np.any(tau > 1):
        raise ValueError("tau must lie in [0, 1]")
    t = tau.reshape(tau.shape + (1,) * (actions.ndim - tau.ndim))
    return FlowSample(tau, epsilon, t * actions + (1 - t) * epsilon)


def target_flow(actions: np.ndarray, epsilon: np.ndarray) -> np.ndarray:
    actions = np.asarray(actions)
    epsilon = np.asarray(epsilon)
    if actions.shape != epsilon.shape:
        raise ShapeError(f"target_flow: actions {actions.shape} vs noise {epsilon.shape}")
    return actions - epsilon


def time_embedding(tau: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of tau: (B,) -> (B, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(tau, dtype=np.float64)[:, None] * 100.0 * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


def init_params(config: ExpertConfig, rng: np.random.Generator, prefix: str = "expert") -> Params:
    params: Params = {}
    d = config.hidden_dim
    nn.init_linear(params, rng, f"{prefix}.in", config.action_dim, d)
    nn.init_linear(params, rng, f"{prefix}.time1", config.time_embed_dim, d)
    nn.init_linear(params, rng, f"{prefix}.time2", d, d)
    nn.init_linear(params, rng, f"{prefix}.state", config.state_dim, d)
    params[f"{prefix}.pos"] = nn.param(nn.trunc_normal(rng, (config.horizon, d)), f"{prefix}.pos")
    for i in range(config.num_layers):
        p = f"{prefix}.blocks.{i}"
        nn.init_layernorm(params, f"{p}.ln1", d)
        nn.init_attention(params, rng, f"{p}.self", d)
        nn.init_layernorm(params, f"{p}.ln2", d)
        nn.init_layernorm(params, f"{p}.ln_c", config.cond_dim)
        nn.init_attention(params, rng, f"{p}.cross", d, d_kv=config.cond_dim)
        nn.init_layernorm(params, f"{p}.ln3", d)
        nn.init_mlp(params, rng, f"{p}.mlp", d, 2 * d)
    nn.init_layernorm(params, f"{prefix}.ln_f", d)
    nn.init_linear(params, rng, f"{prefix}.out", d, config.action_dim)
    return params


def predict_velocity(noisy, cond: Tensor, state, tau, config: ExpertConfig, params: Params,
                     rng: np.random.Generator | None = None, training: bool = False,
                     prefix: str = "expert") -> Tensor:
    """Velocity field v(noisy, cond, state, tau) of shape (B, H, D_a)."""
    noisy = noisy if isinstance(noisy, Tensor) else Tensor(np.asarray(noisy, dtype=np.float32))
    if noisy.ndim == 2:
        noisy = ops.reshape(noisy, (1,) + noisy.shape)
    b = noisy.shape[0]
    if noisy.shape[1:] != (config.horizon, config.action_dim):
        raise ShapeError(f"noisy actions {noisy.shape[1:]} != ({config.horizon}, {config.action_dim})")
    if cond.ndim != 3 or cond.shape[0] != b or cond.shape[2] != config.cond_dim:
        raise ShapeError(f"conditioning tokens {cond.shape} incompatible with batch {b} / dim {config.cond_dim}")
    state = np.asarray(state, dtype=np.float32).reshape(b, config.state_dim)
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float32).reshape(-1), (b,))

    x = nn.linear(params, f"{prefix}.in", noisy)
    temb = Tensor(time_embedding(tau, config.time_embed_dim))
    temb = nn.linear(params, f"{prefix}.time2", ops.gelu(nn.linear(params, f"{prefix}.time1", temb)))
    semb = nn.linear(params, f"{prefix}.state", Tensor(state))
    tok = ops.reshape(ops.add(temb, semb), (b, 1, config.hidden_dim))
    x = ops.add(ops.add(x, tok), params[f"{prefix}.pos"])
    for i in range(config.num_layers):
        p = f"{prefix}.blocks.{i}"
        h = nn.attention(params, f"{p}.self", nn.layernorm(params, f"{p}.ln1", x), config.num_heads)
        x = ops.add(x, ops.dropout(h, config.dropout, rng, training))
        c = nn.layernorm(params, f"{p}.ln_c", cond)
        h = nn.attention(params, f"{p}.cross", nn.layernorm(params, f"{p}.ln2", x), config.num_heads, context=c)
        x = ops.add(x, ops.dropout(h, config.dropout, rng, training))
        h = nn.mlp(params, f"{p}.mlp", nn.layernorm(params, f"{p}.ln3", x))
        x = ops.add(x, ops.dropout(h, config.dropout, rng, training))
    return nn.linear(params, f"{prefix}.out", nn.layernorm(params, f"{prefix}.ln_f", x))


VelocityFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def sample_noise(rng: np.random.Generator, batch: int, config: ExpertConfig) -> np.ndarray:
    return rng.standard_normal((batch, config.horizon, config.action_dim)).astype(np.float32)


def fm_loss_terms(actions: np.ndarray, rng: np.random.Generator):
    """Draw (eps, tau) per batch element; return (noisy, target velocity, tau)."""
    actions = np.asarray(actions, dtype=np.float32)
    if actions.ndim != 3 or actions.shape[0] == 0:
        raise ValueError("fm_loss needs a non-empty (B, H, D_a) batch")
    eps = rng.standard_normal(actions.shape).astype(np.float32)
    tau = rng.random(actions.shape[0]).astype(np.float32)
    fs = interpolate(actions, eps, tau)
    return fs.noisy, target_flow(actions, eps), tau


def fm_loss(velocity: Callable[[np.ndarray, np.ndarray], Tensor], actions: np.ndarray,
            rng: np.random.Generator) -> Tensor:
    """Mean squared error between predicted and target velocities.

    ``velocity(noisy, tau)`` returns the predicted field for the whole batch.
    """
    noisy, target, tau = fm_loss_terms(actions, rng)
    return ops.mse(velocity(noisy, tau), target)


def euler_sample(velocity: VelocityFn, epsilon: np.ndarray, steps: int) -> np.ndarray:
    """Integrate dA/dtau = v(A, tau) from tau = 0 with fixed steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    a = np.array(epsilon, dtype=np.float32, copy=True)
    dt = np.float32(1.0 / steps)
    for k in range(steps):
        tau = np.full(a.shape[0], k / steps, dtype=np.float32)
        a = a + dt * np.asarray(velocity(a, tau), dtype=np.float32)
    return a


def sample(cond: Tensor, state, config: ExpertConfig, params: Params, rng: np.random.Generator,
           steps: int | None = None, prefix: str = "expert") -> np.ndarray:
    eps = sample_noise(rng, cond.shape[0], config)

    def v(a, tau):
        return predict_velocity(a, cond, state, tau, config, params, prefix=prefix).data

    return euler_sample(v, eps, config.denoise_steps if steps is None else steps)
