"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op records a node (inputs, backward rule, sequence
number) on the output tensor. ``Tensor.backward`` collects the recorded
nodes reachable from the root and replays their backward rules in exact
reverse recording order. A recorded graph is single-use.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Incompatible tensor shapes."""


class DomainError(ValueError):
    """Input outside an op's mathematical domain (e.g. log of a negative)."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class GraphError(RuntimeError):
    """Misuse of a recorded computation graph."""


_state = {"grad_enabled": True, "dtype": np.float32}
_seq = itertools.count()


def get_default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used when wrapping raw inputs."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


class Node:
    __slots__ = ("seq", "parents", "backward", "consumed")

    def __init__(self, parents, backward):
        self.seq = next(_seq)
        self.parents = parents
        self.backward = backward
        self.consumed = False


class Tensor:
    """An n-d float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    # make numpy defer to our reflected operators
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64) or arr.dtype != get_default_dtype():
            arr = arr.astype(get_default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        return ops.add(self, other)

    def __radd__(self, other):
        return ops.add(other, self)

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    def __rmul__(self, other):
        return ops.mul(other, self)

    def __truediv__(self, other):
        return ops.div(self, other)

    def __neg__(self):
        return ops.neg(self)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        return ops.getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    @property
    def T(self):
        return ops.swap_last(self)

    def sum(self, axis=None, keepdims=False):
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result; attach a tape node when any input is tracked."""
    track = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, requires_grad=track)
    if track:
        out._node = Node(tuple(parents), backward_fn)
    return out


class ComputationTape:
    """The ordered list of recorded nodes reachable from one output."""

    def __init__(self, root: Tensor):
        found: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(t) in found:
                continue
            if node.consumed:
                raise GraphError(
                    "backward through a graph that was already consumed; "
                    "re-run the forward pass first"
                )
            found[id(t)] = t
            stack.extend(node.parents)
        self.entries = sorted(found.values(), key=lambda t: t._node.seq)

    def __len__(self):
        return len(self.entries)

    def replay(self, root: Tensor, seed_grad: np.ndarray) -> None:
        grads = {id(root): seed_grad}
        for t in reversed(self.entries):
            node = t._node
            g = grads.pop(id(t), None)
            node.consumed = True
            fn, node.backward = node.backward, None
            if g is None:
                continue
            pgrads = fn(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    _accumulate_leaf(p, pg)
                else:
                    key = id(p)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


def backward(root: Tensor, grad=None) -> None:
    if grad is None:
        if root.data.size != 1:
            raise ShapeError(f"backward without an explicit gradient needs a scalar, got {root.shape}")
        seed = np.ones_like(root.data)
    else:
        seed = np.asarray(grad, dtype=root.data.dtype).reshape(root.shape)
    if root._node is None:
        if root.requires_grad:
            _accumulate_leaf(root, seed)
            return
        raise GraphError("tensor does not require grad and has no recorded graph")
    if root._node.consumed:
        raise GraphError("backward called twice on the same recorded graph")
    ComputationTape(root).replay(root, seed)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


from . import ops  # noqa: E402  (ops needs Tensor defined)
