"""Dense tensors with tape-based reverse-mode automatic differentiation.

Tensors wrap a numpy array. Operations in :mod:`depthvla.ops` record
themselves on the active :class:`Tape` whenever one of their inputs takes
part in gradient computation; :func:`backward` then replays the tape in
reverse order.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "active_tape", default=None
)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A dense row-major array with optional gradient participation."""

    __slots__ = ("data", "grad_enabled", "grad", "name", "__weakref__")

    def __init__(self, data, grad_enabled: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not isinstance(data, np.ndarray) or arr.dtype not in (np.float32, np.float64):
            # float64 is kept only when asked for via an explicit array (gradient checks)
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad_enabled = grad_enabled
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, grad_enabled={self.grad_enabled})"

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from depthvla import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from depthvla import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from depthvla import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from depthvla import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from depthvla import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from depthvla import ops

        return ops.matmul(self, other)


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block are
    appended in execution order, so inputs always precede their consumers.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        self.nodes.append(_Node(out, inputs, backward))


def active_tape() -> Tape | None:
    return _active_tape.get()


class no_tape:
    """Context manager that suspends recording (evaluation mode)."""

    def __enter__(self):
        self._token = _active_tape.set(None)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        return False


def record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    """Wrap ``out_data`` and register it on the active tape if needed."""
    tape = _active_tape.get()
    needs = tape is not None and any(t.grad_enabled for t in inputs)
    out = Tensor(out_data, grad_enabled=needs, dtype=out_data.dtype)
    if needs:
        tape.record(out, inputs, backward)
    return out


def backward(
    loss: Tensor, tape: Tape, leaves: Iterable[Tensor] | None = None
) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss) back through ``tape``.

    Returns a map from grad-enabled leaf tensors to their gradients and also
    stores each gradient on ``leaf.grad``. Tensors passed in ``leaves`` that
    the loss does not depend on receive zero gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaf_objs: dict[int, Tensor] = {}
    found = False
    for node in reversed(tape.nodes):
        produced.add(id(node.out))
        if node.out is loss:
            found = True
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.grad_enabled:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
            leaf_objs.setdefault(key, t)
    if not found and loss.grad_enabled:
        raise ValueError("loss was not produced on this tape")

    result: dict[Tensor, np.ndarray] = {}
    for key, t in leaf_objs.items():
        if key in produced:
            continue
        g = grads.get(key)
        if g is not None:
            result[t] = g.astype(t.data.dtype, copy=False)
    if leaves is not None:
        for t in leaves:
            if t not in result:
                result[t] = np.zeros_like(t.data)
    for t, g in result.items():
        t.grad = g
    return result
