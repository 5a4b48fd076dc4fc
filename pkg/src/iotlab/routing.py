"""Candidate layer orders and the instance-wise order predictors."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from itertools import permutations
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class LayerKind(str, Enum):
    SA = "SA"
    ED = "ED"
    FF = "FF"


@dataclass(frozen=True)
class LayerOrder:
    kinds: tuple

    def __post_init__(self):
        kinds = tuple(LayerKind(k) for k in self.kinds)
        if len(set(kinds)) != len(kinds):
            raise ValueError(f"layer order repeats a kind: {kinds}")
        object.__setattr__(self, "kinds", kinds)

    def __iter__(self):
        return iter(self.kinds)

    def __len__(self):
        return len(self.kinds)

    def __str__(self):
        return "->".join(k.value for k in self.kinds)

    @classmethod
    def parse(cls, text: str) -> "LayerOrder":
        return cls(tuple(part.strip() for part in text.replace("->", ",").split(",") if part.strip()))


SA, ED, FF = LayerKind.SA, LayerKind.ED, LayerKind.FF

# Integer codes used in flags and reports.
DECODER_CODES = {
    1: LayerOrder((SA, ED, FF)),
    2: LayerOrder((FF, SA, ED)),
    3: LayerOrder((ED, FF, SA)),
    4: LayerOrder((ED, SA, FF)),
    5: LayerOrder((SA, FF, ED)),
    6: LayerOrder((FF, ED, SA)),
}
ENCODER_CODES = {
    1: LayerOrder((SA, FF)),
    2: LayerOrder((FF, SA)),
}
DECODER_SUBSETS = {
    2: (4, 6),
    3: (1, 4, 6),
    4: (1, 2, 4, 6),
    5: (1, 2, 4, 5, 6),
    6: (1, 2, 3, 4, 5, 6),
}


@dataclass(frozen=True)
class OrderSet:
    """Indexed family of candidate orders; ``codes[i]`` names ``orders[i]``."""

    role: str
    codes: tuple
    orders: tuple

    def __len__(self):
        return len(self.orders)

    def index_of(self, code: int) -> int:
        try:
            return self.codes.index(int(code))
        except ValueError:
            raise ValueError(f"order code {code} not in {self.role} set {list(self.codes)}") from None

    def order(self, code: int) -> LayerOrder:
        return self.orders[self.index_of(code)]

    @classmethod
    def from_codes(cls, role: str, codes: Iterable[int]) -> "OrderSet":
        table = {"encoder": ENCODER_CODES, "decoder": DECODER_CODES}[role]
        codes = tuple(int(c) for c in codes)
        if not codes:
            raise ValueError("an order set needs at least one code")
        if len(set(codes)) != len(codes):
            raise ValueError(f"duplicate order codes {codes}")
        for c in codes:
            if c not in table:
                raise ValueError(f"unknown {role} order code {c}; valid codes {sorted(table)}")
        return cls(role, codes, tuple(table[c] for c in codes))

    def to_json(self) -> dict:
        return {"role": self.role, "codes": list(self.codes), "orders": [str(o) for o in self.orders]}


def enumerate_orders(kinds: Iterable) -> OrderSet:
    kinds = frozenset(LayerKind(k) for k in kinds)
    if kinds == {SA, FF}:
        return OrderSet.from_codes("encoder", ENCODER_CODES)
    if kinds == {SA, ED, FF}:
        return OrderSet.from_codes("decoder", DECODER_CODES)
    if len(kinds) == 1:
        (only,) = kinds
        return OrderSet("custom", (1,), (LayerOrder((only,)),))
    raise ValueError(f"unsupported layer kinds {sorted(k.value for k in kinds)}")


def order_subset(n: int) -> OrderSet:
    if n not in DECODER_SUBSETS:
        raise ValueError(f"decoder subset size must be in 2..6, got {n}")
    return OrderSet.from_codes("decoder", DECODER_SUBSETS[n])


def all_permutations(kinds: Sequence) -> list:
    """Every permutation of ``kinds`` (independent check on the code tables)."""
    return [LayerOrder(p) for p in permutations(kinds)]


# ---------------------------------------------------------------------------
# Predictors
# ---------------------------------------------------------------------------

def sentence_summary(states: Tensor, pad_mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean of ``states`` over non-pad positions: [T, d] -> [d] or [B, T, d] -> [B, d]."""
    single = states.ndim == 2
    if single:
        states = states.reshape(1, *states.shape)
        if pad_mask is not None:
            pad_mask = np.asarray(pad_mask)[None]
    B, L, d = states.shape
    keep = np.ones((B, L), dtype=bool) if pad_mask is None else ~np.asarray(pad_mask, dtype=bool)
    counts = keep.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("sentence_summary: sequence has no non-pad positions")
    weights = (keep / counts[:, None]).astype(states.dtype)[:, None, :]
    out = T.matmul(weights, states).reshape(B, d)
    return out.reshape(d) if single else out


def predictor_logits(summary: Tensor, W: Tensor) -> Tensor:
    if summary.shape[-1] != W.shape[0]:
        raise ValueError(f"predictor: summary {summary.shape} vs weights {W.shape}")
    return T.matmul(summary, W)


def predictor_probs(summary: Tensor, W: Tensor) -> Tensor:
    return T.softmax(predictor_logits(summary, W))


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard Gumbel samples ``-log(-log U)`` with U strictly inside (0, 1)."""
    u = (rng.integers(0, 2**53, size=shape).astype(np.float64) + 0.5) / 2.0**53
    return -np.log(-np.log(u))


def gumbel_softmax_weights(pi: Tensor, g: np.ndarray, tau: float = 1.0) -> Tensor:
    """softmax((log pi + g) / tau) over the last axis; pi must be strictly positive."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if (pi.data <= 0).any():
        raise ValueError("gumbel_softmax_weights: zero probability; clamp pi first")
    noisy = T.add(T.log(pi), np.asarray(g, dtype=pi.dtype))
    return T.softmax(T.scalar_mul(noisy, 1.0 / tau))


def select_argmax(summary, W) -> np.ndarray:
    """Inference-time choice: index of the largest predictor logit (ties -> lowest index)."""
    s = summary.data if isinstance(summary, Tensor) else np.asarray(summary)
    w = W.data if isinstance(W, Tensor) else np.asarray(W)
    return np.argmax(s @ w, axis=-1)


@dataclass
class RoutingDecision:
    pi: Tensor
    gumbel: Optional[np.ndarray]
    weights: Tensor
    selected: np.ndarray
    summary: Tensor
    clamped: Optional[Tensor] = None


def route(
    summary: Tensor,
    W: Tensor,
    tau: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    clamp_floor: Optional[float] = 0.05,
) -> RoutingDecision:
    """Soft routing weights for training (``rng`` given) or argmax selection (``rng=None``)."""
    from .objective import clamp_probs

    pi = predictor_probs(summary, W)
    clamped = clamp_probs(pi, clamp_floor) if clamp_floor else pi
    selected = select_argmax(summary, W)
    if rng is None:
        g = None
        weights = T._as_tensor(np.eye(W.shape[1], dtype=pi.dtype)[selected])
    else:
        g = gumbel_noise(pi.shape, rng)
        weights = gumbel_softmax_weights(clamped, g, tau)
    return RoutingDecision(pi=pi, gumbel=g, weights=weights, selected=selected, summary=summary, clamped=clamped)
