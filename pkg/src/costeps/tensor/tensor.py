"""Dense tensors with a reverse-mode tape.

Every operation returns a new :class:`Tensor`. When gradients are enabled and
any input requires them, the output keeps references to its parents and a
closure computing the vector-Jacobian product. :func:`backward` walks that
graph once in reverse topological order and then releases it.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes, or a right operand whose shape is a trailing suffix of the left one
(bias addition). Everything else needs an explicit :func:`reshape` or
:func:`expand`.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    pass


class DTypeError(TypeError):
    pass


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in DTYPES else np.float64
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            raise DTypeError(f"unsupported dtype {arr.dtype}")
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op != "leaf" else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(self, _lift(other, self))

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    """Wrap ``data`` as the output of an operation on ``parents``.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    parent. Exposed so tests and extensions can register custom primitives.
    """
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = name
    return out


class Tape:
    """Operation records reachable from a root, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def records(self) -> list[tuple[str, list[int], int]]:
        """``(op, input ids, output id)`` per node, inputs first."""
        return [(n._op, [id(p) for p in n._parents], id(n)) for n in self.nodes]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss`` that requires it."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("graph already consumed by a previous backward; re-run the forward pass")
    if not loss.requires_grad:
        raise TapeError("loss is detached from every parameter")
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._consumed:
            raise TapeError(f"node {node._op} belongs to a consumed graph")
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"{node._op}: gradient shape {pg.shape} != input shape {p.shape}")
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
    for node in tape.nodes:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True


# --- elementwise -----------------------------------------------------------


def _check_binary(a: Tensor, b: Tensor, name: str) -> bool:
    """Return True when ``b`` is a trailing bias for ``a``."""
    if a.dtype != b.dtype:
        raise DTypeError(f"{name}: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.shape == b.shape:
        return False
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return True
    raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are not equal or trailing-bias compatible")


def _unbias(g: np.ndarray, ndim: int) -> np.ndarray:
    lead = g.ndim - ndim
    return g.sum(axis=tuple(range(lead))) if lead else g


def add(a: Tensor, b: Tensor) -> Tensor:
    bias = _check_binary(a, b, "add")

    def bw(g):
        return g, (_unbias(g, b.ndim) if bias else g)

    return op(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    bias = _check_binary(a, b, "sub")

    def bw(g):
        gb = -g
        return g, (_unbias(gb, b.ndim) if bias else gb)

    return op(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    bias = _check_binary(a, b, "mul")

    def bw(g):
        ga = g * b.data if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g * a.data
            if bias:
                gb = _unbias(gb, b.ndim)
        return ga, gb

    return op(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return op(a.data * c, (a,), lambda g: (g * c,), "scale")


def gelu(x: Tensor) -> Tensor:
    flat = np.ascontiguousarray(x.data).reshape(-1)
    out = np.empty_like(flat)
    kernels.gelu_forward(flat, out)

    def bw(g):
        gx = np.empty_like(flat)
        kernels.gelu_backward(flat, np.ascontiguousarray(g).reshape(-1), gx)
        return (gx.reshape(x.shape),)

    return op(out.reshape(x.shape), (x,), bw, "gelu")


def silu(x: Tensor) -> Tensor:
    sig = 1 / (1 + np.exp(-x.data))
    return op(x.data * sig, (x,), lambda g: (g * sig * (1 + x.data * (1 - sig)),), "silu")


# --- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Rank-2 matrix product."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise DTypeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return op(a.data @ b.data, (a, b), bw, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched rank-3 product ``(n, i, k) x (n, k, j) -> (n, i, j)``."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    if a.dtype != b.dtype:
        raise DTypeError(f"bmm: dtype mismatch {a.dtype} vs {b.dtype}")

    def bw(g):
        ga = np.matmul(g, b.data.transpose(0, 2, 1)) if a.requires_grad else None
        gb = np.matmul(a.data.transpose(0, 2, 1), g) if b.requires_grad else None
        return ga, gb

    return op(np.matmul(a.data, b.data), (a, b), bw, "bmm")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of an arbitrary-rank ``x`` (one fused node)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: cannot apply {w.shape} weight to {x.shape}")
    if x.dtype != w.dtype or (b is not None and b.dtype != w.dtype):
        raise DTypeError("linear: dtype mismatch")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    y = x2 @ w.data
    if b is not None:
        y += b.data

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return op(y.reshape(lead + (w.shape[1],)), parents, bw, "linear")


# --- shape -------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return op(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Repeat size-1 axes to ``shape`` (same rank required)."""
    shape = tuple(shape)
    if len(shape) != x.ndim or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise ShapeError(f"expand: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s != t)
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return op(out, (x,), lambda g: (g.sum(axis=axes, keepdims=True),), "expand")


def take(table: Tensor, index) -> Tensor:
    """Gather rows of a rank-2 table (embedding lookup)."""
    index = np.asarray(index, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("take expects a rank-2 table")
    if index.min() < 0 or index.max() >= table.shape[0]:
        raise IndexError(f"take: index out of range for {table.shape[0]} rows")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g)
        return (gt,)

    return op(table.data[index], (table,), bw, "take")


# --- reductions --------------------------------------------------------------


def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise IndexError(f"axis {axis} out of range for rank {x.ndim}")
    return axis % x.ndim


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        return op(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),), "sum")
    ax = _axis(x, axis)
    return op(
        x.data.sum(axis=ax),
        (x,),
        lambda g: (np.ascontiguousarray(np.broadcast_to(np.expand_dims(g, ax), x.shape)),),
        "sum",
    )


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[_axis(x, axis)]
    return scale(sum(x, axis), 1.0 / n)


def reduce_l2(x: Tensor, axis: int) -> Tensor:
    """Euclidean norm along ``axis``; the axis is removed from the shape."""
    ax = _axis(x, axis)
    norm = np.sqrt((x.data * x.data).sum(axis=ax))

    def bw(g):
        n = np.expand_dims(norm, ax)
        safe = np.where(n > 0, n, 1)
        return (np.where(n > 0, x.data / safe, 0) * np.expand_dims(g, ax),)

    return op(norm, (x,), bw, "reduce_l2")


# --- fused row kernels -------------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    m = x.shape[-1]
    flat = np.ascontiguousarray(x.data).reshape(-1, m)
    out = np.empty_like(flat)
    kernels.softmax_forward(flat, out)

    def bw(g):
        gx = np.empty_like(out)
        kernels.softmax_backward(out, np.ascontiguousarray(g).reshape(-1, m), gx)
        return (gx.reshape(x.shape),)

    return op(out.reshape(x.shape), (x,), bw, "softmax")


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    m = x.shape[-1]
    flat = np.ascontiguousarray(x.data).reshape(-1, m)
    out = np.empty_like(flat)
    rstd = np.empty(flat.shape[0], dtype=flat.dtype)
    kernels.layernorm_forward(flat, out, rstd, eps)

    def bw(g):
        gx = np.empty_like(out)
        kernels.layernorm_backward(out, rstd, np.ascontiguousarray(g).reshape(-1, m), gx)
        return (gx.reshape(x.shape),)

    return op(out.reshape(x.shape), (x,), bw, "layer_norm")


def check_finite(x: Tensor | np.ndarray, what: str = "tensor") -> None:
    arr = x.data if isinstance(x, Tensor) else x
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")
