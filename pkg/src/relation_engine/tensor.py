"""Dense tensors with a tape for reverse-mode differentiation.

A `Tensor` wraps a numpy array. Operations in `relation_engine.ops` record
themselves on the active `Tape` whenever one of their inputs requires a
gradient; `backward()` replays the recorded adjoints in reverse order.

Usage:
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape():
        loss = ops.sum(ops.mul(x, x))
    backward(loss)
    x.grad  # -> [2., 4., 6.]
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from relation_engine.errors import GradientError

_default_dtype = np.dtype(np.float32)

Adjoint = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Set the dtype used for new tensors (float32 or float64)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported tensor dtype: {dtype}")
    _default_dtype = dtype


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default dtype, e.g. to float64 for grad checks."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """Dense n-dimensional real array with an optional gradient."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.asarray(data, dtype=_default_dtype if dtype is None else dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; the ops module owns the math and the adjoints.

    def __add__(self, other):
        from relation_engine import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from relation_engine import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from relation_engine import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from relation_engine import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from relation_engine import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from relation_engine import ops
        return ops.mul(other, self)

    def __neg__(self):
        from relation_engine import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from relation_engine import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from relation_engine import ops
        return ops.getitem(self, index)


class Parameter(Tensor):
    """A named, trainable tensor owned by a model.

    `trainable=False` freezes the value: optimizers skip the parameter, but
    gradients still flow through it to whatever sits upstream.
    """

    def __init__(self, data, name: str = "", trainable: bool = True, decay: bool = True,
                 dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.trainable = trainable
        self.decay = decay

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


@dataclass
class TapeRecord:
    """One executed operation: its kind, operands, result and adjoint."""
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    adjoint: Adjoint


class Tape:
    """Ordered record of differentiable operations.

    A tape is confined to the thread that entered it. Tapes nest; the
    innermost one receives records.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def kinds(self) -> list[str]:
        return [r.kind for r in self.records]


_local = threading.local()


def _stack() -> list[Optional[Tape]]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording in this thread (inference, finite differences)."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def record_op(kind: str, inputs: Sequence[Tensor], output: Tensor, adjoint: Adjoint) -> Tensor:
    """Attach `output` to the active tape if any input needs a gradient."""
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return output
    output.requires_grad = True
    output._tape = tape
    tape.records.append(TapeRecord(kind, tuple(inputs), output, adjoint))
    return output


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every leaf tensor reachable from a scalar loss.

    Gradients accumulate into existing `.grad` arrays, so callers zero them
    between steps. Leaves that do not influence the loss keep `grad=None`.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise GradientError("loss was not produced under an active tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    produced = {id(r.output) for r in tape.records}

    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        input_grads = rec.adjoint(g)
        for tensor, ig in zip(rec.inputs, input_grads):
            if ig is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            if key not in produced:
                leaves[key] = tensor

    for key, tensor in leaves.items():
        g = np.asarray(grads[key], dtype=tensor.dtype).reshape(tensor.shape)
        tensor.grad = g if tensor.grad is None else tensor.grad + g
