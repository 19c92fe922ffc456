"""Adam with decoupled weight decay and the inverse square-root LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros(p.shape, dtype=DTYPE) for k, p in params.items()},
            v={k: np.zeros(p.shape, dtype=DTYPE) for k, p in params.items()},
            step=0,
        )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.98),
    eps: float = 1e-6,
    weight_decay: float = 0.01,
) -> AdamState:
    """Apply one bias-corrected Adam update in place.

    Weight decay is decoupled: ``p -= lr * weight_decay * p`` next to the
    adaptive step rather than folded into the gradient.  Parameters without a
    gradient entry are treated as having a zero gradient.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape, dtype=DTYPE)
        m = state.m.setdefault(name, np.zeros(p.shape, dtype=DTYPE))
        v = state.v.setdefault(name, np.zeros(p.shape, dtype=DTYPE))
        if g.shape != p.shape or m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(
                f"adam_step: '{name}' param {p.shape}, grad {g.shape}, moments {m.shape}/{v.shape}"
            )
        m *= DTYPE(b1)
        m += DTYPE(1.0 - b1) * g
        v *= DTYPE(b2)
        v += DTYPE(1.0 - b2) * (g * g)
        m_hat = m / DTYPE(c1)
        v_hat = v / DTYPE(c2)
        update = m_hat / (np.sqrt(v_hat) + DTYPE(eps))
        if weight_decay:
            update = update + DTYPE(weight_decay) * p.values
        p.values = (p.values - DTYPE(lr) * update).astype(DTYPE)
    return state


def lr_at_step(step: int, base_lr: float, warmup_steps: int = 10000) -> float:
    """Linear warmup to ``base_lr`` then decay proportional to 1/sqrt(step)."""
    if step < 1:
        raise ValueError(f"lr_at_step: step must be >= 1, got {step}")
    if warmup_steps < 1:
        raise ValueError(f"lr_at_step: warmup_steps must be >= 1, got {warmup_steps}")
    return base_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))
