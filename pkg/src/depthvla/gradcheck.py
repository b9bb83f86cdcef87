"""Finite-difference gradient checking in 64-bit arithmetic."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from depthvla import ops
from depthvla.tensor import Tape, Tensor, backward


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numerical_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-3,
                   indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. array ``x`` (modified in place, then restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = indices if indices is not None else list(np.ndindex(x.shape))
    for idx in it:
        old = x[idx]
        x[idx] = old + step
        fp = f()
        x[idx] = old - step
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def check_op(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator,
             step: float = 1e-3) -> float:
    """Max relative error between analytic and numerical gradients of
    ``sum(fn(*inputs) * R)`` for a fixed random projection R, over all inputs.
    """
    xs = [Tensor(np.array(x, dtype=np.float64), grad_enabled=True) for x in inputs]
    proj = rng.standard_normal(fn(*[Tensor(x.data) for x in xs]).shape)

    def scalar() -> float:
        return float(np.sum(fn(*[Tensor(x.data) for x in xs]).data * proj))

    with Tape() as tape:
        out = fn(*xs)
        loss = ops.sum(ops.mul(out, Tensor(proj)))
    grads = backward(loss, tape, leaves=xs)
    worst = 0.0
    for x in xs:
        num = numerical_grad(scalar, x.data, step)
        worst = max(worst, relative_error(grads[x], num))
    return worst
