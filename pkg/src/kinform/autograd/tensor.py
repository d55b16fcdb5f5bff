"""Dense tensors and the gradient tape that records operations on them."""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_DTYPE = np.float64
_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NumericError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, detached graph, replay)."""


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for new tensors (float64 or float32)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def get_default_dtype():
    return _DTYPE


class Tensor:
    """A row-major real array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=_DTYPE) if not isinstance(data, np.ndarray) else data
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
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
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self, leaves: Optional[Iterable["Tensor"]] = None) -> None:
        backward(self, leaves)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar; the kernels live in ops
    def __add__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.sub(self, other)
        return ops.add_scalar(self, -float(other))

    def __rsub__(self, other):
        from . import ops

        return ops.add_scalar(ops.scale(self, -1.0), float(other))

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


class _Record:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; every op whose inputs require gradients records
    itself on the innermost active tape. ``backward`` replays the log once.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape that has already been replayed")
        output._tape = self
        self.records.append(_Record(output, tuple(inputs), backward_fn))

    def backward(self, loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> None:
        """Assign d(loss)/d(leaf) to ``.grad`` of every leaf that requires it.

        ``leaves`` lists extra tensors that must end up with a gradient even if
        the loss does not depend on them (they receive zeros).
        """
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        if self.consumed:
            raise TapeError("tape already replayed; run the forward pass again")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = set()
        seen_leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            produced.add(id(rec.output))
            g = grads.pop(id(rec.output), None)
            for t in rec.inputs:
                if t.requires_grad and t._tape is not self:
                    seen_leaves[id(t)] = t
            if g is None:
                continue
            in_grads = rec.backward_fn(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, t in seen_leaves.items():
            g = grads.get(key)
            t.grad = np.zeros_like(t.data) if g is None else np.array(g, dtype=t.data.dtype, order="C")
        for t in leaves or ():
            if id(t) not in seen_leaves:
                t.grad = np.zeros_like(t.data)


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> None:
    """Backpropagate ``loss`` through the tape it was recorded on."""
    if loss._tape is None:
        raise TapeError("loss is detached: it was not produced under an active tape")
    loss._tape.backward(loss, leaves)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
