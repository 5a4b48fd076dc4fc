"""Training objective: clamp rule, confidence-weighted task loss and the two KL regularisers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


def clamp_probs(pi: Tensor, floor: float = 0.05) -> Tensor:
    """Floor each probability at ``floor`` without renormalising."""
    K = pi.shape[-1]
    if floor * K >= 1.0:
        raise ConfigError(f"clamp floor {floor} is incompatible with {K} orders")
    return T.clamp_min(pi, floor)


def weighted_task_loss(path_losses, gamma: Optional[Tensor] = None, lam: Optional[Tensor] = None) -> Tensor:
    """sum_m sum_n gamma_m * lambda_n * L[m][n].

    ``path_losses[m][n]`` is a scalar or a per-instance vector [B]; ``gamma`` and
    ``lam`` are [M] / [N] (or [B, M] / [B, N]). A missing weight vector means that
    side has a single order. Per-instance terms are summed over the batch.
    """
    M, N = len(path_losses), len(path_losses[0])
    if any(len(row) != N for row in path_losses):
        raise ValueError("ragged path-loss matrix")
    if gamma is not None and gamma.shape[-1] != M:
        raise ValueError(f"encoder weights {gamma.shape} vs {M} encoder orders")
    if lam is not None and lam.shape[-1] != N:
        raise ValueError(f"decoder weights {lam.shape} vs {N} decoder orders")
    if gamma is None and M != 1 or lam is None and N != 1:
        raise ValueError("weights are required for a side with more than one order")

    terms = []
    for m in range(M):
        for n in range(N):
            term = path_losses[m][n]
            for w, idx in ((gamma, m), (lam, n)):
                if w is None:
                    continue
                col = T.getitem(w, (Ellipsis, idx))
                term = T.mul(term, col)
            terms.append(term.sum() if term.ndim else term)
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def _normalized(pis: Tensor) -> Tensor:
    """Rescale the last axis of a [K] or [B, K] tensor to sum to one."""
    inv = T.exp(T.neg(T.log(T.tensor_sum(pis, axis=-1))))
    return T.mul(pis, inv) if pis.ndim == 1 else T.scale_rows(pis, inv)


def exploration_loss(batch_pis: Tensor, normalize: bool = True) -> Tensor:
    """KL(uniform || batch-mean routing distribution).

    ``batch_pis`` is [B, K] (already clamped). With ``normalize`` the batch mean is
    rescaled to sum to one before the closed form is applied; without it the
    clamped vector is used as-is and the value can dip below zero.
    """
    if batch_pis.ndim != 2 or batch_pis.shape[0] == 0:
        raise ValueError("exploration_loss needs a non-empty [B, K] batch")
    K = batch_pis.shape[1]
    avg = T.mean(batch_pis, axis=0)
    if normalize:
        avg = _normalized(avg)
    return T.add(T.neg(T.mean(T.log(avg))), -math.log(K))


def exploitation_loss(batch_pis: Tensor, normalize: bool = True) -> Tensor:
    """-E_x[KL(uniform || pi_x)] over the batch."""
    if batch_pis.ndim != 2 or batch_pis.shape[0] == 0:
        raise ValueError("exploitation_loss needs a non-empty [B, K] batch")
    K = batch_pis.shape[1]
    pis = _normalized(batch_pis) if normalize else batch_pis
    kl = T.add(T.neg(T.mean(T.log(pis), axis=1)), -math.log(K))
    return T.neg(T.mean(kl))


def total_loss(
    l_c: Tensor,
    l_d: Sequence[Tensor] = (),
    l_s: Sequence[Tensor] = (),
    c1: float = 0.1,
    c2: float = 0.01,
) -> Tensor:
    """l_c + c1 * sum(l_d) + c2 * sum(l_s); empty sequences contribute nothing."""
    if c1 < 0 or c2 < 0:
        raise ConfigError("loss coefficients must be non-negative")
    out = l_c
    for part in l_d:
        out = T.add(out, T.scalar_mul(part, c1))
    for part in l_s:
        out = T.add(out, T.scalar_mul(part, c2))
    return out


@dataclass
class LossBundle:
    path_losses: list
    l_c: float
    l_d_enc: float = 0.0
    l_d_dec: float = 0.0
    l_s_enc: float = 0.0
    l_s_dec: float = 0.0
    total: float = 0.0
    c1: float = 0.1
    c2: float = 0.01
    clamp_floor: float = 0.05
    extras: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "path_losses": [[float(v) for v in row] for row in self.path_losses],
            "l_c": self.l_c,
            "l_d_enc": self.l_d_enc,
            "l_d_dec": self.l_d_dec,
            "l_s_enc": self.l_s_enc,
            "l_s_dec": self.l_s_dec,
            "total": self.total,
            "c1": self.c1,
            "c2": self.c2,
            **self.extras,
        }
