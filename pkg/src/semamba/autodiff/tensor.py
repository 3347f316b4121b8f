"""Tensor value type and the single-use gradient tape."""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of a tape: non-scalar loss, double backward, foreign loss."""


_state = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float64 array that can take part in a gradient tape.

    Tensors created outside of any tape (or from inputs that do not require
    gradients) are plain immutable values.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.slice(self, index)


class _Entry:
    __slots__ = ("inputs", "output", "backward_fn", "op")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Usage::

        with Tape() as tape:
            loss = f(x)
        tape.backward(loss)

    A tape is single-use: after ``backward`` it is consumed and cannot be
    replayed. Tapes are confined to the thread that created them.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self.consumed = False
        self._open = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed")
        _tape_stack().append(self)
        self._open = True
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        self._open = False

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        output._tape = self
        self.entries.append(_Entry(op, inputs, output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("backward called twice on the same tape")
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g_out = grads.pop(id(entry.output), None)
            if g_out is None:
                continue
            g_ins = entry.backward_fn(g_out)
            for inp, g in zip(entry.inputs, g_ins):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        # whatever remains belongs to leaves
        leaves: dict[int, Tensor] = {}
        for entry in self.entries:
            for inp in entry.inputs:
                if inp.requires_grad and inp._tape is not self:
                    leaves[id(inp)] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if g.shape != leaf.shape:
                raise TapeError(f"gradient shape {g.shape} != leaf shape {leaf.shape}")
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.entries.clear()


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that contributed to ``loss``."""
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is not attached to any tape")
    tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
