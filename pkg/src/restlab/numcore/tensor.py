"""Dense tensors and the tape that records operations on them.

Operations only record themselves while a :class:`Tape` is active, so plain
inference never builds a graph.
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_ACTIVE: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _ACTIVE[-1] if _ACTIVE else None


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as ops execute, which is already a topological order.
    A tape can be replayed backward exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, op: str, inputs: tuple, output: Tensor,
               backward_fn: Callable[[np.ndarray, tuple], tuple]) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a tape that was already replayed")
        self.nodes.append(_Node(op, inputs, output, backward_fn))

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for n in self.nodes:
            for t in n.inputs:
                if t.requires_grad and t.is_leaf:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("backward already ran on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True

        # parameters the loss does not reach still get an explicit zero grad
        for leaf in self.leaves():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
        if loss.is_leaf:
            if loss.requires_grad:
                loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            needs = tuple(t.requires_grad for t in node.inputs)
            in_grads = node.backward_fn(g, needs)
            for t, need, gi in zip(node.inputs, needs, in_grads):
                if not need or gi is None:
                    continue
                if t.is_leaf:
                    t.grad += gi
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)
