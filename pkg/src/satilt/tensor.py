"""Dense float64 tensors with an explicit tape for reverse-mode differentiation.

A :class:`Tape` is activated with a ``with`` block. While it is active, every
operation that touches a tracked tensor appends a node to it. Outside a tape
nothing is recorded, which keeps evaluation passes cheap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    """An n-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "tracked", "name", "__weakref__")

    def __init__(self, data, tracked: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.tracked = tracked
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, tracked: bool) -> "Tensor":
        # skips the defensive copy for op outputs
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.tracked = tracked
        t.name = None
        return t

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, tracked={self.tracked}{tag})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    out: Tensor
    inputs: tuple
    vjp: VJP


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is already a
    topological order of the computation.
    """

    _active: list = []

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    @staticmethod
    def current() -> Optional["Tape"]:
        return Tape._active[-1] if Tape._active else None


def record(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    """Wrap an op result and register its backward rule on the active tape."""
    tape = Tape.current()
    tracked = tape is not None and any(t.tracked for t in inputs)
    out = Tensor._wrap(out_data, tracked)
    if tracked:
        tape.nodes.append(Node(out, tuple(inputs), vjp))
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> dict:
    """Propagate d(loss) back through ``tape``.

    Returns a mapping from every tracked leaf that the loss depends on to its
    gradient array, and stores the same array on ``leaf.grad``. Leaves hit by
    several paths have their contributions summed.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.current()
    if tape is None:
        raise RuntimeError("no tape to differentiate through")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    for node in reversed(tape.nodes):
        produced.add(id(node.out))
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.tracked:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    leaves = {}
    seen = set()
    for node in tape.nodes:
        for inp in node.inputs:
            k = id(inp)
            if k in seen or k in produced or not inp.tracked:
                continue
            seen.add(k)
            g = grads.get(k)
            inp.grad = np.zeros_like(inp.data) if g is None else g.reshape(inp.shape)
            leaves[inp] = inp.grad
    return leaves
