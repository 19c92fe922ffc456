"""Central finite-difference gradient checking for the autodiff primitives."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import DTYPE, Tensor


def numeric_grad(f: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray], index: int,
                 h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``arrays[index]``."""
    base = arrays[index]
    grad = np.zeros(base.shape, dtype=np.float64)
    for pos in np.ndindex(base.shape):
        orig = base[pos]
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[index][pos] = orig + h
        minus[index][pos] = orig - h
        grad[pos] = (f(plus) - f(minus)) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def check_primitive(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], rng: np.random.Generator,
                    h: float = 1e-3) -> list[float]:
    """Relative error between analytic and finite-difference gradients for each input.

    ``fn`` maps input tensors to an output tensor; the scalar objective is a
    fixed random projection of that output, accumulated in float64.
    """
    arrays = [np.asarray(a, dtype=DTYPE) for a in arrays]
    probe_out = fn(*[Tensor(a) for a in arrays])
    weights = rng.standard_normal(probe_out.shape)

    def objective(arrs) -> float:
        with T.no_grad():
            out = fn(*[Tensor(a) for a in arrs])
        return float((out.values.astype(np.float64) * weights).sum())

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    loss = T.sum(T.mul(out, Tensor(weights.astype(DTYPE))))
    T.backward(loss)
    errors = []
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
        errors.append(relative_error(analytic, numeric_grad(objective, arrays, i, h)))
    return errors
