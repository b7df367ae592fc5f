"""Dense tensors with a reverse-mode autodiff tape.

A ``Tensor`` wraps a contiguous numpy array. Operations that touch a tensor
with ``requires_grad`` append a node to the active ``Tape``; ``backward``
replays the tape in reverse and accumulates gradients into leaf tensors.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_default_dtype = np.dtype(np.float32)


def get_default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with.

    ``precision(np.float64)`` is the test mode used by gradient oracles.
    """
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = prev


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Node:
    inputs: tuple
    output: "Tensor"
    backward_fn: BackwardFn
    index: int = -1


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so the list is already in
    topological order.
    """

    nodes: list = field(default_factory=list)
    enabled: bool = True

    def record(self, output: "Tensor", inputs: Sequence["Tensor"], backward_fn: BackwardFn) -> "Tensor":
        if not self.enabled or not any(t.requires_grad for t in inputs):
            return output
        node = Node(tuple(inputs), output, backward_fn, len(self.nodes))
        self.nodes.append(node)
        output.requires_grad = True
        output.node = node
        return output

    def clear(self) -> None:
        for node in self.nodes:
            node.output.node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_tape = Tape()


def get_tape() -> Tape:
    return _tape


def is_grad_enabled() -> bool:
    return _tape.enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

    # construction helpers

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False, name: str | None = None) -> "Tensor":
        return cls(np.zeros(shape, dtype=_default_dtype), requires_grad, name=name)

    @classmethod
    def ones(cls, shape, requires_grad: bool = False, name: str | None = None) -> "Tensor":
        return cls(np.ones(shape, dtype=_default_dtype), requires_grad, name=name)

    # properties

    @property
    def shape(self) -> tuple:
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

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # elementwise arithmetic; operands must share a shape or be scalars

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        _check_same_shape(self, other, "add")
        out = Tensor(self.data + other.data, dtype=self.dtype)

        def bw(g):
            return g, g

        return _tape.record(out, (self, other), bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor(-self.data, dtype=self.dtype)
        return _tape.record(out, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other, self.dtype))

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        _check_same_shape(self, other, "mul")
        a, b = self.data, other.data
        out = Tensor(a * b, dtype=self.dtype)

        def bw(g):
            return g * b, g * a

        return _tape.record(out, (self, other), bw)

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        out = Tensor(self.data.sum(), dtype=self.dtype)
        shape = self.shape
        return _tape.record(out, (self,), lambda g: (np.broadcast_to(g, shape).copy(),))

    def mean(self) -> "Tensor":
        n = self.size
        out = Tensor(self.data.mean(), dtype=self.dtype)
        shape = self.shape
        return _tape.record(out, (self,), lambda g: (np.full(shape, g / n, dtype=g.dtype),))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        out = Tensor(self.data.reshape(shape), dtype=self.dtype)
        return _tape.record(out, (self,), lambda g: (g.reshape(src),))


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    # only a scalar operand may broadcast
    if a.shape != b.shape and b.size != 1:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Fill ``.grad`` of every leaf tensor that ``loss`` depends on.

    Gradients accumulate, so a tensor used twice receives the sum of both
    contributions. The tape is cleared afterwards.
    """
    tape = tape if tape is not None else _tape
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss.node is None:
        if loss.requires_grad:
            _accumulate(loss, seed)
        return

    pending: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(tape.nodes[: loss.node.index + 1]):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                gi = _unbroadcast(gi, t.shape)
            if t.node is None:
                _accumulate(t, gi)
            elif id(t) in pending:
                pending[id(t)] = pending[id(t)] + gi
            else:
                pending[id(t)] = gi
    tape.clear()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.size != 1 and int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    return g.reshape(shape)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g
