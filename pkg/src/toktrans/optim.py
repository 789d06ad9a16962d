"""AdamW with decoupled weight decay and a warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-5
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimizerState, lr_t: float | None = None) -> dict[str, np.ndarray]:
    """One AdamW update; returns new arrays and advances ``state`` in place.

    Decay is applied as ``p <- p - lr*wd*p`` before the adaptive step.
    """
    lr = state.lr if lr_t is None else lr_t
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        new = p * (1.0 - lr * state.weight_decay) if state.weight_decay else p
        out[name] = new - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    total_steps: int
    warmup_frac: float = 0.2
    final_frac: float = 0.1

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")


def lr_at(schedule: Schedule, step: float) -> float:
    """Linear warmup from 0, then cosine decay to ``final_frac * base_lr``."""
    s = schedule
    warm = s.warmup_frac * s.total_steps
    if warm > 0 and step < warm:
        return s.base_lr * step / warm
    span = s.total_steps - warm
    progress = 1.0 if span <= 0 else min(max((step - warm) / span, 0.0), 1.0)
    return s.base_lr * (s.final_frac + (1 - s.final_frac) * 0.5 * (1 + math.cos(math.pi * progress)))
