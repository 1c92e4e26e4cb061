"""Dense tensors and a tape-based reverse-mode autodiff engine.

Operations record themselves on the tape that is active in the current thread
(see :class:`Tape`). With no active tape, operations run eagerly and return
plain tensors, which is the inference path.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "NonFiniteError", "ShapeError",
    "tensor", "parameter", "record", "current_tape", "no_tape",
    "set_check_finite", "check_finite_enabled",
    "add", "sub", "mul", "scale", "gelu", "neg",
    "matmul", "reshape", "transpose2d", "permute", "concat", "split", "slice_axis",
    "reduce_sum", "reduce_mean",
]

DTYPES = (np.float32, np.float64)

_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_check_finite(enabled: bool) -> None:
    """Toggle output validation (NaN/Inf) for every recorded operation."""
    _state.check_finite = bool(enabled)


def check_finite_enabled() -> bool:
    return getattr(_state, "check_finite", True)


class Tensor:
    """Row-major array with optional participation in a :class:`Tape`.

    Parameters are tensors with ``requires_grad=True``; they are registered
    as leaves on whichever tape first sees them.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", *,
                 node: Optional[int] = None, tape: Optional["Tape"] = None):
        arr = np.asarray(data)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node = node
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dims(self) -> list:
        return list(self.data.shape)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = " param" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class Node:
    kind: str
    parents: tuple
    vjp: Optional[Callable] = None
    leaf: Optional[Tensor] = None


@dataclass
class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager; the tape is bound to the calling thread.
    """

    nodes: list = field(default_factory=list)
    gradients: dict = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def node_of(self, t: Tensor) -> Optional[int]:
        if t.tape is self and t.node is not None:
            return t.node
        if t.requires_grad:
            nid = len(self.nodes)
            self.nodes.append(Node("leaf", (), leaf=t))
            t.node, t.tape = nid, self
            return nid
        return None

    def backward(self, loss: Tensor) -> dict:
        """Propagate d(loss)/d(node) through the tape.

        Leaf gradients accumulate into ``tensor.grad`` and into
        ``self.gradients`` across repeated calls until :meth:`clear`.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got dims {loss.dims}")
        if loss.tape is not self or loss.node is None:
            raise ValueError("loss tensor is not recorded on this tape")
        grads = {loss.node: np.ones_like(loss.data)}
        for nid in range(loss.node, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.leaf is not None:
                leaf = node.leaf
                leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
                prev = self.gradients.get(nid)
                self.gradients[nid] = Tensor(g.copy() if prev is None else prev.data + g)
                continue
            for pid, pg in zip(node.parents, node.vjp(g)):
                if pid is None or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        return self.gradients

    def clear(self) -> None:
        self.gradients = {}
        for node in self.nodes:
            if node.leaf is not None:
                node.leaf.grad = None


def current_tape() -> Optional[Tape]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class no_tape:
    """Suspend recording, e.g. for frozen inference inside a training loop."""

    def __enter__(self):
        self._saved = getattr(_state, "stack", None)
        _state.stack = []

    def __exit__(self, *exc):
        _state.stack = self._saved


def record(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: Callable) -> Tensor:
    """Wrap ``out`` as the result of ``kind`` applied to ``inputs``.

    ``vjp(g)`` must return one gradient (or None) per input.
    """
    if check_finite_enabled() and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite values produced by '{kind}'")
    tape = current_tape()
    if tape is None:
        return Tensor(out)
    parents = tuple(tape.node_of(t) for t in inputs)
    if all(p is None for p in parents):
        return Tensor(out)
    nid = len(tape.nodes)
    tape.nodes.append(Node(kind, parents, vjp))
    return Tensor(out, node=nid, tape=tape)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_pair(a: Tensor, b: Tensor, kind: str) -> bool:
    """Return True when b is a scalar broadcast against a."""
    if a.dtype != b.dtype:
        raise TypeError(f"{kind}: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.shape == b.shape:
        return False
    if b.size == 1:
        return True
    raise ShapeError(f"{kind}: dims {a.dims} and {b.dims} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, b: Tensor, scalar: bool) -> np.ndarray:
    return np.sum(g).reshape(b.shape) if scalar else g


# elementwise

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    sc = _check_pair(a, b, "add")
    return record("add", (a, b), a.data + b.data,
                  lambda g: (g, _unbroadcast(g, b, sc)))


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    sc = _check_pair(a, b, "sub")
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (g, -_unbroadcast(g, b, sc)))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    sc = _check_pair(a, b, "mul")
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd,
                  lambda g: (g * bd, _unbroadcast(g * ad, b, sc)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return record("scale", (a,), a.data * c, lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return record("neg", (a,), -a.data, lambda g: (-g,))


_GELU_K = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    k = x.dtype.type(_GELU_K)
    c = x.dtype.type(0.044715)
    inner = k * (x + c * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dt = (1.0 - t * t) * k * (1.0 + 3.0 * c * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return record("gelu", (a,), out, vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.dims} @ {b.dims}")
    if a.dtype != b.dtype:
        raise TypeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    ad, bd = a.data, b.data
    return record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


# shape ops

def reshape(a: Tensor, dims) -> Tensor:
    dims = tuple(int(d) for d in dims)
    if int(np.prod(dims)) != a.size:
        raise ShapeError(f"cannot reshape {a.dims} to {list(dims)}")
    shp = a.shape
    return record("reshape", (a,), a.data.reshape(dims), lambda g: (g.reshape(shp),))


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose2d expects a 2-d tensor")
    return record("transpose", (a,), np.ascontiguousarray(a.data.T),
                  lambda g: (np.ascontiguousarray(g.T),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {a.data.ndim}")
    inv = tuple(np.argsort(axes))
    return record("permute", (a,), np.ascontiguousarray(a.data.transpose(axes)),
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def _axis(a: Tensor, axis: int) -> int:
    nd = a.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"axis {axis} out of range for rank {nd}")
    return axis % nd


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    axis = _axis(parts[0], axis)
    for p in parts[1:]:
        if p.data.ndim != parts[0].data.ndim:
            raise ShapeError("concat: rank mismatch")
        if p.dtype != parts[0].dtype:
            raise TypeError("concat: dtype mismatch")
        other = [d for i, d in enumerate(p.shape) if i != axis]
        ref = [d for i, d in enumerate(parts[0].shape) if i != axis]
        if other != ref:
            raise ShapeError(f"concat: dims {p.dims} vs {parts[0].dims} off axis {axis}")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    return record("concat", tuple(parts), np.concatenate([p.data for p in parts], axis=axis),
                  lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list:
    axis = _axis(a, axis)
    sizes = [int(s) for s in sizes]
    if sum(sizes) != a.shape[axis] or any(s <= 0 for s in sizes):
        raise ShapeError(f"split sizes {sizes} do not partition axis of length {a.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(a, start, start + s, axis))
        start += s
    return out


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    axis = _axis(a, axis)
    n = a.shape[axis]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice [{start}:{stop}) out of range for axis length {n}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shp, dt = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(shp, dtype=dt)
        full[idx] = g
        return (full,)

    return record("slice", (a,), np.ascontiguousarray(a.data[idx]), vjp)


# reductions

def reduce_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        shp = a.shape
        return record("sum", (a,), np.sum(a.data).reshape(()),
                      lambda g: (np.broadcast_to(g, shp).copy(),))
    axis = _axis(a, axis)
    shp = a.shape
    return record("sum", (a,), a.data.sum(axis=axis),
                  lambda g: (np.broadcast_to(np.expand_dims(g, axis), shp).copy(),))


def reduce_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.size if axis is None else a.shape[_axis(a, axis)]
    return scale(reduce_sum(a, axis), 1.0 / n)
