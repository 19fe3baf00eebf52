"""Dense real tensors with reverse-mode automatic differentiation.

Every forward op records a closure that maps the output gradient to the
gradients of its parents. ``Tensor.backward`` walks the graph once in reverse
topological order and accumulates into ``.grad`` of leaf tensors that have
``requires_grad=True``. Calling ``backward`` twice without ``zero_grad``
accumulates.

Broadcasting is deliberately narrow. An elementwise op accepts two operands
when their shapes are equal, when one is a scalar, when one shape is a suffix
of the other (expansion along leading axes, e.g. adding a bias), or when one
shape equals the other with its last axis set to 1 (expansion along the
trailing axis, e.g. subtracting a per-row mean).

GELU uses the tanh approximation::

    gelu(x) = 0.5 * x * (1 + tanh(s * (x + 0.044715 * x**3))),  s = sqrt(2/pi)

    gelu'(x) = 0.5 * (1 + t) + 0.5 * x * (1 - t**2) * s * (1 + 3 * 0.044715 * x**2)

where ``t`` is the tanh term above.

Precision is a single process-wide switch: float64 by default, float32 when
``TTM_PRECISION=float32`` is set or :func:`set_precision` is called.
"""

from __future__ import annotations

import contextlib
import math
import os
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPE = np.dtype(np.float32 if os.environ.get("TTM_PRECISION", "").lower() == "float32" else np.float64)
_STATE = threading.local()

_GELU_S = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def set_precision(name: str) -> None:
    global _DTYPE
    if name not in ("float64", "float32"):
        raise ValueError(f"unknown precision {name!r}")
    _DTYPE = np.dtype(name)


def get_dtype() -> np.dtype:
    return _DTYPE


def grad_enabled() -> bool:
    return getattr(_STATE, "grad", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (per thread)."""
    prev = grad_enabled()
    _STATE.grad = False
    try:
        yield
    finally:
        _STATE.grad = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul_last_dim(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *perm) -> "Tensor":
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return transpose_axes(self, perm)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    """Nodes ordered so that every node precedes its parents."""
    visited: set[int] = set()
    post: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    post.reverse()
    return post


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


# -- broadcasting helpers -------------------------------------------------
def _check_broadcast(a: tuple[int, ...], b: tuple[int, ...], op: str) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    if b == (1,) or a == (1,):
        return
    long, short = (a, b) if len(a) >= len(b) else (b, a)
    if long[len(long) - len(short):] == short:
        return
    if len(a) == len(b) and a[:-1] == b[:-1] and (a[-1] == 1 or b[-1] == 1):
        return
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), backward, "div")


def elementwise(op_tag: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, div, gelu, exp, tanh, sqrt."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"gelu": gelu, "exp": exp, "tanh": tanh, "sqrt": sqrt}
    if op_tag in binary:
        return binary[op_tag](a, b)
    if op_tag in unary:
        return unary[op_tag](a)
    raise ValueError(f"unknown elementwise op {op_tag!r}")


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_S * (x + _GELU_C * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_S * (1.0 + 3.0 * _GELU_C * x * x)
        return (g * d,)

    return _make(out, (a,), backward, "gelu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def power(a: Tensor, p: float) -> Tensor:
    x = a.data
    return _make(x**p, (a,), lambda g: (g * p * x ** (p - 1),), "pow")


# -- reductions -----------------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra -------------------------------------------------------
def matmul_last_dim(a: Tensor, w: Tensor) -> Tensor:
    """Contract the last axis of ``a`` [..., p, q] with the first of ``w`` [q, r]."""
    a, w = _as_tensor(a), _as_tensor(w)
    if w.ndim != 2 or a.ndim < 1 or a.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul_last_dim: cannot contract {a.shape} with {w.shape}")
    ad, wd = a.data, w.data

    def backward(g):
        ga = g @ wd.T if a.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = ad.reshape(-1, wd.shape[0]).T @ g.reshape(-1, wd.shape[1])
        return ga, gw

    return _make(ad @ wd, (a, w), backward, "matmul")


def matmul_columnwise(a: Tensor, w: Tensor) -> Tensor:
    """Same contraction as :func:`matmul_last_dim`, accumulated sequentially over the inner axis.

    Every output column is computed by the same elementwise operations no
    matter how many columns ``w`` has, so ``a @ w[:, :k]`` equals the first k
    columns of ``a @ w`` bit for bit. BLAS gives no such guarantee.
    """
    a, w = _as_tensor(a), _as_tensor(w)
    if w.ndim != 2 or a.ndim < 1 or a.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul_columnwise: cannot contract {a.shape} with {w.shape}")
    ad, wd = a.data, w.data
    out = np.zeros(ad.shape[:-1] + (wd.shape[1],), dtype=np.result_type(ad, wd))
    for j in range(wd.shape[0]):
        out += ad[..., j:j + 1] * wd[j]

    def backward(g):
        ga = g @ wd.T if a.requires_grad else None
        gw = ad.reshape(-1, wd.shape[0]).T @ g.reshape(-1, wd.shape[1]) if w.requires_grad else None
        return ga, gw

    return _make(out, (a, w), backward, "matmul_columnwise")


def softmax_last_dim(a: Tensor) -> Tensor:
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ShapeError(f"softmax_last_dim: invalid shape {a.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


# -- shape ops ------------------------------------------------------------
def reshape(a: Tensor, new_shape) -> Tensor:
    new_shape = tuple(int(s) for s in new_shape)
    if -1 not in new_shape and math.prod(new_shape) != a.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {new_shape}")
    shape = a.shape
    try:
        out = a.data.reshape(new_shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {new_shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(shape),), "reshape")


def transpose_axes(a: Tensor, perm) -> Tensor:
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(a.ndim)):
        raise ShapeError(f"transpose_axes: {perm} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(perm))
    out = np.ascontiguousarray(a.data.transpose(perm))
    return _make(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    perm = list(range(a.ndim))
    perm[i], perm[j] = perm[j], perm[i]
    return transpose_axes(a, perm)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no tensors given")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)) for i in range(len(sizes))
        )

    return _make(out, tuple(tensors), backward, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[ax]:
        raise ShapeError(f"slice: range [{start}, {stop}) outside axis of length {a.shape[ax]}")
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    shape = a.shape
    out = np.ascontiguousarray(a.data[index])

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _make(out, (a,), backward, "slice")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim
    shape = a.shape
    out = np.take(a.data, idx, axis=ax)

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (full,)

    return _make(out, (a,), backward, "take")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {shape}") from exc
    return _make(out, (a,), lambda g: (_unbroadcast(g, src),), "broadcast")


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad along one axis."""
    if before == 0 and after == 0:
        return a
    ax = axis % a.ndim
    parts = []
    if before:
        shp = list(a.shape)
        shp[ax] = before
        parts.append(zeros(shp))
    parts.append(a)
    if after:
        shp = list(a.shape)
        shp[ax] = after
        parts.append(zeros(shp))
    return concat(parts, axis=ax)


# -- stochastic -----------------------------------------------------------
class DropoutRNG:
    """Counter-based mask source: each draw uses Philox keyed by seed at a fresh counter."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.counter = 0

    def uniform(self, shape) -> np.ndarray:
        gen = np.random.Generator(np.random.Philox(key=self.seed, counter=self.counter))
        self.counter += 1
        return gen.random(shape)


def dropout(a: Tensor, rate: float, training: bool, rng: DropoutRNG | None) -> Tensor:
    if not training or rate <= 0.0:
        return a
    if rate >= 1.0:
        return mul(a, 0.0)
    if rng is None:
        raise ValueError("dropout in training mode needs a DropoutRNG")
    keep = (rng.uniform(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    return mul(a, Tensor(keep))
