"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every loss in this package is assembled from the primitives here.  Results
carry a record of the producing operation; records are created in program
order, so ordering by record id is a topological order of the graph and
`backward` can replay it in reverse, visiting each record exactly once.

Gradients accumulate across `backward` calls until `zero_grad`; the shared
trunk of the model relies on this when two consumers feed the same loss.
"""

from __future__ import annotations

import itertools
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    AxisOutOfRange,
    DivisionDomain,
    DomainError,
    EmptyInput,
    NoTape,
    NotScalar,
    ShapeMismatch,
)

_uid = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that suppresses differentiation records.

    Forward values are unchanged; prediction and evaluation paths use this
    to avoid building tapes they will never replay.
    """

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Node:
    """Operation record: inputs plus the rule mapping output grad to input grads."""

    __slots__ = ("uid", "parents", "backward_fn", "op")

    def __init__(self, parents: tuple["Tensor", ...], backward_fn, op: str):
        self.uid = next(_uid)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tensor:
    __slots__ = ("data", "node", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        # Leaves that want gradients get an input record with no parents.
        self.node: Node | None = Node((), None, "leaf") if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, no differentiation record."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.node = None
        return out

    def __repr__(self) -> str:
        tag = "" if self.node is None else f", op={self.node.op}"
        return f"Tensor(shape={self.shape}{tag})"

    # Operator sugar; scalars are wrapped as constant 0-d tensors.
    def __add__(self, other):
        return binary_op("add", self, _as_tensor(other))

    def __radd__(self, other):
        return binary_op("add", _as_tensor(other), self)

    def __sub__(self, other):
        return binary_op("sub", self, _as_tensor(other))

    def __rsub__(self, other):
        return binary_op("sub", _as_tensor(other), self)

    def __mul__(self, other):
        return binary_op("mul", self, _as_tensor(other))

    def __rmul__(self, other):
        return binary_op("mul", _as_tensor(other), self)

    def __truediv__(self, other):
        return binary_op("div", self, _as_tensor(other))

    def __rtruediv__(self, other):
        return binary_op("div", _as_tensor(other), self)

    def __neg__(self):
        return unary_op("neg", self)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.node is not None for p in parents):
        out.node = Node(parents, backward_fn, op)
    else:
        out.node = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


# -- primitive operations ------------------------------------------------------

def binary_op(kind: str, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add/sub/mul/div with trailing-dimension broadcasting.

    Broadcast contributions are sum-reduced back to each operand's shape in
    the backward pass.
    """
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{kind}: cannot broadcast {a.shape} with {b.shape}")
    if kind == "add":
        data = a.data + b.data
        def bwd(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    elif kind == "sub":
        data = a.data - b.data
        def bwd(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    elif kind == "mul":
        data = a.data * b.data
        def bwd(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    elif kind == "div":
        if np.any(b.data == 0.0):
            raise DivisionDomain("div: divisor contains zero")
        data = a.data / b.data
        def bwd(g):
            ga = _unbroadcast(g / b.data, a.shape)
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            return ga, gb
    else:
        raise ValueError(f"unknown binary op {kind!r}")
    assert data.shape == out_shape
    return _make(data, (a, b), bwd, kind)


def unary_op(kind: str, a: Tensor) -> Tensor:
    if kind == "exp":
        data = np.exp(a.data)
        def bwd(g):
            return (g * data,)
    elif kind == "log":
        bad = np.flatnonzero(a.data <= 0.0)
        if bad.size:
            raise DomainError(f"log: non-positive element at flat index {bad[0]}")
        data = np.log(a.data)
        def bwd(g):
            return (g / a.data,)
    elif kind == "neg":
        data = -a.data
        def bwd(g):
            return (-g,)
    elif kind == "square":
        data = a.data * a.data
        def bwd(g):
            return (2.0 * a.data * g,)
    elif kind == "sqrt":
        bad = np.flatnonzero(a.data < 0.0)
        if bad.size:
            raise DomainError(f"sqrt: negative element at flat index {bad[0]}")
        data = np.sqrt(a.data)
        def bwd(g):
            return (0.5 * g / data,)
    else:
        raise ValueError(f"unknown unary op {kind!r}")
    return _make(data, (a,), bwd, kind)


def add(a, b) -> Tensor:
    return binary_op("add", _as_tensor(a), _as_tensor(b))


def sub(a, b) -> Tensor:
    return binary_op("sub", _as_tensor(a), _as_tensor(b))


def mul(a, b) -> Tensor:
    return binary_op("mul", _as_tensor(a), _as_tensor(b))


def div(a, b) -> Tensor:
    return binary_op("div", _as_tensor(a), _as_tensor(b))


def exp(a) -> Tensor:
    return unary_op("exp", _as_tensor(a))


def log(a) -> Tensor:
    return unary_op("log", _as_tensor(a))


def square(a) -> Tensor:
    return unary_op("square", _as_tensor(a))


def sqrt(a) -> Tensor:
    return unary_op("sqrt", _as_tensor(a))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul: expected rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make(data, (a, b), bwd, "matmul")


def reduce_sum(a: Tensor, axes: int | Sequence[int] | None = None) -> Tensor:
    """Sum over the given axes (all axes when None); reduced axes are removed."""
    rank = a.data.ndim
    if axes is None:
        norm = tuple(range(rank))
    else:
        if isinstance(axes, int):
            axes = (axes,)
        norm = []
        for ax in axes:
            if ax < 0:
                ax += rank
            if not 0 <= ax < rank:
                raise AxisOutOfRange(f"reduce_sum: axis {ax} out of range for rank {rank}")
            norm.append(ax)
        if len(set(norm)) != len(norm):
            raise AxisOutOfRange("reduce_sum: duplicate axis")
        norm = tuple(sorted(norm))
    data = a.data.sum(axis=norm) if norm else a.data.copy()

    def bwd(g):
        expanded = np.expand_dims(g, norm) if norm else g
        return (np.broadcast_to(expanded, a.shape).copy(),)

    return _make(np.asarray(data, dtype=np.float64), (a,), bwd, "reduce_sum")


def mean_all(a: Tensor) -> Tensor:
    return reduce_sum(a) * (1.0 / a.size)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if len(parts) == 0:
        raise EmptyInput("concat: no tensors given")
    rank = parts[0].data.ndim
    if axis < 0:
        axis += rank
    if not 0 <= axis < rank:
        raise AxisOutOfRange(f"concat: axis {axis} out of range for rank {rank}")
    ref = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != rank or other[:axis] != ref[:axis] or other[axis + 1:] != ref[axis + 1:]:
            raise ShapeMismatch(f"concat: incompatible shapes {parts[0].shape} vs {p.shape}")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _make(data, tuple(parts), bwd, "concat")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeMismatch(f"reshape: cannot view {a.shape} as {shape}")
    data = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _make(data, (a,), bwd, "reshape")


# -- backward pass --------------------------------------------------------------

class Tape:
    """Reachable operation records of a graph, in creation (topological) order."""

    def __init__(self, tensors: list[Tensor]):
        self.tensors = tensors

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t.node is None or t.node.uid in seen:
                continue
            seen.add(t.node.uid)
            found.append(t)
            stack.extend(t.node.parents)
        found.sort(key=lambda t: t.node.uid)
        return cls(found)


def backward(loss: Tensor) -> None:
    """Populate grad buffers of every tensor reachable from `loss`.

    Gradients add into existing buffers, so repeated calls accumulate until
    `zero_grad`.
    """
    if loss.node is None:
        raise NoTape("backward: tensor has no differentiation record")
    if loss.size != 1:
        raise NotScalar(f"backward: expected a one-element loss, got shape {loss.shape}")
    tape = Tape.trace(loss)
    pending: dict[int, np.ndarray] = {loss.node.uid: np.ones_like(loss.data)}
    for t in reversed(tape.tensors):
        node = t.node
        g = pending.pop(node.uid, None)
        if g is None:
            continue
        if t.grad is None:
            t.grad = g.copy()
        else:
            t.grad += g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if parent.node is None or pg is None:
                continue
            uid = parent.node.uid
            if uid in pending:
                pending[uid] += pg
            else:
                pending[uid] = np.asarray(pg, dtype=np.float64).copy()


# -- parameter registry ----------------------------------------------------------

class ParamRegistry:
    """Ordered map of named parameter tensors with per-parameter trainable flags."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, tensor: Tensor, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if tensor.node is None:
            tensor.node = Node((), None, "leaf")
        self._params[name] = tensor
        self._trainable[name] = trainable
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_items(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._params.items() if self._trainable[n])

    def set_trainable(self, name: str, flag: bool) -> None:
        if name not in self._trainable:
            raise KeyError(name)
        self._trainable[name] = flag

    def set_group_trainable(self, prefix: str, flag: bool) -> None:
        hits = [n for n in self._params if n.startswith(prefix)]
        if not hits:
            raise KeyError(f"no parameters under prefix {prefix!r}")
        for n in hits:
            self._trainable[n] = flag

    def set_all_trainable(self, flag: bool) -> None:
        for n in self._trainable:
            self._trainable[n] = flag

    def group_names(self, prefix: str) -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def n_values(self) -> int:
        return sum(t.size for t in self._params.values())


def zero_grad(registry: ParamRegistry | Iterable[Tensor]) -> None:
    """Reset grad buffers to zero for every parameter."""
    tensors = (t for _, t in registry.items()) if isinstance(registry, ParamRegistry) else registry
    for t in tensors:
        t.grad = np.zeros_like(t.data)
