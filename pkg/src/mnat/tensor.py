"""Reverse-mode automatic differentiation over float32 numpy arrays.

Every primitive builds a :class:`Tensor` whose ``node`` records the producing
operation, its parent tensors and a closure mapping the output gradient to
parent gradients.  :func:`backward` walks the recorded graph once in reverse
topological order.

Shape rules (one line per primitive):

* ``add``, ``sub``, ``mul``: numpy broadcasting; gradients are summed back
  to each input's shape.
* ``scale``: tensor times a python scalar.
* ``matmul``: ``(..., n, k) @ (..., k, m)`` with broadcast batch axes.
* ``reshape``: any shape with the same element count.
* ``transpose``: permutation of all axes.
* ``concat``: equal shapes except along ``axis``.
* ``gather_rows``: ``(R, D)`` table and an integer index array ``I`` gives
  ``I.shape + (D,)``.
* ``mask_fill``: boolean mask broadcastable to the input.
* ``sum``, ``mean``: over one axis, a tuple of axes, or everything.
* ``take``: basic numpy indexing (ints and slices) of a tensor.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when a primitive receives non-conforming shapes."""


class GraphError(RuntimeError):
    """Internal inconsistency in a recorded graph."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Node:
    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "node", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(values, dtype=DTYPE)
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        tag = f", op={self.node.op}" if self.node else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _check_axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} invalid for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    return _make(
        a.values + b.values,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    return _make(
        a.values - b.values,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    av, bv = a.values, b.values
    return _make(
        av * bv,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    return _make(a.values * c, "scale", (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    pos = a.values > 0
    return _make(np.where(pos, a.values, DTYPE(0)), "relu", (a,), lambda g: (g * pos,))


def log_floor(a: Tensor, floor: float = 1e-9) -> Tensor:
    """Natural log of ``max(a, floor)``; zero gradient below the floor."""
    clipped = np.maximum(a.values, DTYPE(floor))
    live = a.values > floor
    return _make(np.log(clipped), "log_floor", (a,), lambda g: (np.where(live, g / clipped, DTYPE(0)),))


def sym_kl(p: Tensor, q: Tensor, floor: float = 1e-9) -> Tensor:
    """Row-wise ``0.5 * sum (p - q) * (log p - log q)`` over the last axis, logs floored.

    Fused so the reduction runs in float64: at divergences near 10 a float32
    sum drifts by more than 1e-6.
    """
    if p.shape != q.shape:
        raise ShapeError(f"sym_kl: shapes {p.shape} and {q.shape} differ")
    p64 = p.values.astype(np.float64)
    q64 = q.values.astype(np.float64)
    cp, cq = np.maximum(p64, floor), np.maximum(q64, floor)
    dlog = np.log(cp) - np.log(cq)
    diff = p64 - q64
    out = (0.5 * (diff * dlog).sum(axis=-1)).astype(DTYPE)

    def backward_fn(g):
        g = g.astype(np.float64)[..., None]
        gp = 0.5 * (dlog + np.where(p64 > floor, diff / cp, 0.0))
        gq = 0.5 * (-dlog - np.where(q64 > floor, diff / cq, 0.0))
        return (g * gp).astype(DTYPE), (g * gq).astype(DTYPE)

    return _make(out, "sym_kl", (p, q), backward_fn)


def mask_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, a.shape)
    except ValueError:
        raise ShapeError(f"mask_fill: mask shape {mask.shape} does not broadcast to {a.shape}") from None
    out = np.where(mask, DTYPE(value), a.values).astype(DTYPE)
    return _make(out, "mask_fill", (a,), lambda g: (_unbroadcast(np.where(mask, DTYPE(0), g), a.shape),))


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when ``training`` is false or ``rate`` is 0."""
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate).astype(DTYPE) / DTYPE(1.0 - rate)
    return _make(a.values * keep, "dropout", (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None
    av, bv = a.values, b.values

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(av @ bv, "matmul", (a, b), back)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.values, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    axis = _check_axis("concat", axis, tensors[0].ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.values for t in tensors], axis=axis),
        "concat",
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def gather_rows(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {table.shape[0]} rows")

    def back(g):
        out = np.zeros_like(table.values)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _make(table.values[ids], "gather_rows", (table,), back)


def take(a: Tensor, index) -> Tensor:
    """Basic (int/slice) indexing with a scatter-back gradient."""
    out = a.values[index]

    def back(g):
        full = np.zeros_like(a.values)
        full[index] = g
        return (full,)

    return _make(np.array(out, dtype=DTYPE), "take", (a,), back)


# ---------------------------------------------------------------- reductions


def _norm_axes(op: str, axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(_check_axis(op, ax, ndim) for ax in axis))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes("sum", axis, a.ndim)
    out = a.values.sum(axis=axes, keepdims=keepdims, dtype=DTYPE)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(DTYPE),)

    return _make(np.asarray(out, dtype=DTYPE), "sum", (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes("mean", axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum(a, axes, keepdims), 1.0 / count) if count else sum(a, axes, keepdims)


# ---------------------------------------------------------------- normalizers


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("softmax", axis, x.ndim)
    z = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, "softmax", (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("log_softmax", axis, x.ndim)
    z = x.values - x.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({d},) for input {x.shape}")
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = DTYPE(1.0) / np.sqrt(var + DTYPE(eps))
    xhat = xc * inv
    gv = gain.values

    def back(g):
        gxhat = g * gv
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gv + bias.values, "layer_norm", (x, gain, bias), back)


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        key = id(t)
        if expanded:
            state[key] = 2
            order.append(t)
            continue
        st = state.get(key)
        if st == 2:
            continue
        if st == 1:
            raise GraphError("cycle detected in computation graph")
        state[key] = 1
        stack.append((t, True))
        if t.node is not None:
            for p in reversed(t.node.parents):
                if p.requires_grad and state.get(id(p)) != 2:
                    if state.get(id(p)) == 1:
                        raise GraphError("cycle detected in computation graph")
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf.

    Returns the gradient map keyed by ``id(leaf)``.
    """
    if loss.values.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    leaves: dict[int, np.ndarray] = {}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            leaves[id(t)] = g
            t.grad = g.astype(DTYPE) if t.grad is None else t.grad + g
            continue
        parent_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=DTYPE)
            if pg.shape != p.shape:
                raise GraphError(f"{t.node.op}: gradient shape {pg.shape} != input shape {p.shape}")
            k = id(p)
            grads[k] = grads[k] + pg if k in grads else pg
    return leaves


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
