"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op builds its output with :func:`_make`, handing over the
parent tensors and a closure that maps the output gradient to one gradient per
parent.  :meth:`Tensor.backward` linearises the graph into a
:class:`ComputationTape` and replays it in reverse.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, optimizer steps)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class _Node:
    __slots__ = ("parents", "backward", "op")

    def __init__(self, parents: tuple, backward: Callable, op: str):
        self.parents = parents
        self.backward = backward
        self.op = op


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if isinstance(data, np.ndarray):
        if dtype is not None:
            return data.astype(dtype, copy=False)
        if data.dtype in (np.float32, np.float64):
            return data
        return data.astype(DEFAULT_DTYPE)
    return np.asarray(data, dtype=dtype or DEFAULT_DTYPE)


class Tensor:
    """An n-dimensional array that can take part in a recorded computation.

    ``data`` is a contiguous numpy array (float32 unless a float64 array is
    passed in, which is how the finite-difference checks get double precision).
    Leaf tensors with ``requires_grad`` accumulate into ``grad`` on backward.
    """

    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.ascontiguousarray(_as_array(data, dtype))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` of every reachable leaf with d(self)/d(leaf)."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        tape = ComputationTape.from_root(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(tape.nodes):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._node is None:
                if t.requires_grad:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            parent_grads = t._node.backward(g)
            for parent, pg in zip(t._node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    pg = _unbroadcast(pg, parent.shape)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg.astype(parent.dtype, copy=False)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class ComputationTape:
    """Topologically ordered record of the ops that produced a tensor.

    Producers always precede consumers and each tensor appears once, so a
    reverse sweep visits every node exactly once.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in t._node.parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [t._node.op if t._node else "leaf" for t in self.nodes]


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._node = _Node(tuple(parents), backward, op) if needs else None
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


# -- elementwise binary ------------------------------------------------------
def check_broadcast(sa: tuple[int, ...], sb: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ValueError(f"shapes {sa} and {sb} are not broadcast-compatible") from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    check_broadcast(a.shape, b.shape)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    check_broadcast(a.shape, b.shape)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def broadcast_mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product after numpy-style broadcasting."""
    return mul(a, b)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    mask = a.data >= b.data
    return _make(np.where(mask, a.data, b.data), (a, b),
                 lambda g: (g * mask, g * ~mask), "maximum")


# -- elementwise unary -------------------------------------------------------
def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    out = ad ** exponent
    return _make(out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tabs(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def l2norm(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the (sub)gradient at a zero vector is taken as zero."""
    axes = _norm_axes(axis, a.ndim)
    ad = a.data
    out = np.sqrt((ad * ad).sum(axis=axes, keepdims=True))
    safe = np.where(out > 0, out, 1.0)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.where(out > 0, g * ad / safe, 0.0).astype(ad.dtype, copy=False),)

    res = out if keepdims else np.squeeze(out, axis=axes)
    return _make(np.asarray(res), (a,), bw, "l2norm")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def hardswish(a: Tensor) -> Tensor:
    x = a.data
    r6 = np.clip(x + 3.0, 0.0, 6.0)
    out = x * r6 / 6.0
    inner = (x > -3.0) & (x < 3.0)
    deriv = np.where(x >= 3.0, 1.0, 0.0) + inner * (2.0 * x + 3.0) / 6.0

    return _make(out.astype(x.dtype, copy=False), (a,),
                 lambda g: (g * deriv.astype(x.dtype, copy=False),), "hardswish")


def softmax(a: Tensor, axis: int) -> Tensor:
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def activation(a: Tensor, kind: str, axis: int | None = None) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "hardswish":
        return hardswish(a)
    if kind == "relu":
        return relu(a)
    if kind == "softmax":
        if axis is None:
            raise ValueError("softmax needs an axis")
        return softmax(a, axis)
    raise ValueError(f"unknown activation {kind!r}")


# -- reductions --------------------------------------------------------------
def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / n)


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal element only."""
    axes = _norm_axes(axis, a.ndim)
    keep = [i for i in range(a.ndim) if i not in axes]
    moved = np.transpose(a.data, keep + list(axes))
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    perm = keep + list(axes)
    inv = np.argsort(perm)
    shape = a.shape

    def bw(g):
        gflat = np.zeros(flat.shape, dtype=g.dtype)
        gk = g.reshape(lead) if keepdims else g
        np.put_along_axis(gflat, idx[..., None], gk[..., None], axis=-1)
        gm = gflat.reshape(moved.shape).transpose(inv)
        return (gm.reshape(shape),)

    if keepdims:
        out = np.expand_dims(out, axes)
    return _make(np.asarray(out), (a,), bw, "max")


# -- shape ops ---------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    shape_in = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(shape_in),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),), "transpose")


def expand_dims(a: Tensor, axis) -> Tensor:
    return reshape(a, np.expand_dims(a.data, axis).shape)


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = a.data[index]
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([expand_dims(t, axis) for t in tensors], axis=axis)


def pad(a: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    widths = [tuple(w) for w in widths]
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[sl],), "pad")


# -- linear algebra ----------------------------------------------------------
def matmul(a, b) -> Tensor:
    """``(..., K) @ (K, M)`` or ``(..., K) @ (K,)``."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if bd.ndim not in (1, 2) or ad.ndim < 1 or ad.shape[-1] != bd.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bw(g):
        a2 = ad.reshape(-1, ad.shape[-1])
        if bd.ndim == 1:
            return np.multiply.outer(g, bd), a2.T @ g.reshape(-1)
        return g @ bd.T, a2.T @ g.reshape(-1, bd.shape[1])

    return _make(out, (a, b), bw, "matmul")


def where_const(mask: np.ndarray, a: Tensor, value: float) -> Tensor:
    return _make(np.where(mask, a.data, value).astype(a.dtype), (a,),
                 lambda g: (g * mask,), "where")


def sum_all(tensors: Iterable[Tensor]) -> Tensor:
    total = None
    for t in tensors:
        total = t if total is None else total + t
    if total is None:
        return Tensor(0.0)
    return total
