"""Adam with bias correction and the inverse-square-root warmup schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError


def lr_at(step: int, base: float, warmup: int) -> float:
    """base * min(step^-0.5, step * warmup^-1.5): linear warmup then 1/sqrt decay."""
    if step < 1:
        raise ValueError("step counts from 1")
    return base * min(step**-0.5, step * warmup**-1.5)


def peak_to_base(peak_lr: float, warmup: int) -> float:
    """Multiplier for :func:`lr_at` that makes the schedule peak at ``peak_lr``."""
    return peak_lr * warmup**0.5


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    betas: tuple = (0.9, 0.98),
    eps: float = 1e-9,
) -> AdamState:
    """Update ``params`` (name -> ndarray) in place from ``grads``.

    All gradients are checked before anything changes, so a bad step leaves
    parameters and moments untouched.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            bad = np.argwhere(~np.isfinite(g))[0]
            raise NonFiniteError(f"adam: non-finite gradient for {name} at {tuple(int(i) for i in bad)}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state
