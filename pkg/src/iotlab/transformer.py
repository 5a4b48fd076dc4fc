"""Post-norm transformer sublayers whose order inside a block is a runtime argument.

Every block owns exactly one parameter set; all candidate orders reuse it.
Parameters live in a flat ``{name: Tensor}`` dict, e.g. ``dec.0.ed.wq``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from . import tensor as T
from .objective import ConfigError
from .routing import ED, FF, SA, LayerKind, LayerOrder
from .tensor import RngContext, Tensor

PAD, BOS, EOS, SEP = 0, 1, 2, 3


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    d_model: int = 32
    d_ff: int = 64
    heads: int = 2
    layers: int = 1
    dropout: float = 0.1
    max_len: int = 64
    pos_encoding: str = "sinusoidal"

    def validate(self) -> "ModelConfig":
        for name in ("src_vocab", "tgt_vocab", "d_model", "d_ff", "heads", "layers", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout must be in [0, 1)")
        if self.pos_encoding != "sinusoidal":
            raise ConfigError(f"unsupported positional encoding {self.pos_encoding!r}")
        return self

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class EncoderStates:
    h: Tensor
    pad_mask: np.ndarray  # [B, T] True at padding


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _attention_params(rng, d: int, prefix: str) -> dict:
    out = {}
    for w in ("q", "k", "v", "o"):
        out[f"{prefix}.w{w}"] = _xavier(rng, d, d)
        out[f"{prefix}.b{w}"] = np.zeros(d)
    out[f"{prefix}.ln.gain"] = np.ones(d)
    out[f"{prefix}.ln.bias"] = np.zeros(d)
    return out


def _ff_params(rng, d: int, d_ff: int, prefix: str) -> dict:
    return {
        f"{prefix}.w1": _xavier(rng, d, d_ff),
        f"{prefix}.b1": np.zeros(d_ff),
        f"{prefix}.w2": _xavier(rng, d_ff, d),
        f"{prefix}.b2": np.zeros(d),
        f"{prefix}.ln.gain": np.ones(d),
        f"{prefix}.ln.bias": np.zeros(d),
    }


def init_transformer_params(config: ModelConfig, rng: np.random.Generator, dtype=None) -> dict:
    """One shared parameter set per block; output projection tied to the target embedding."""
    d = config.d_model
    raw = {
        "src_embed": rng.normal(0.0, d**-0.5, size=(config.src_vocab, d)),
        "tgt_embed": rng.normal(0.0, d**-0.5, size=(config.tgt_vocab, d)),
    }
    raw["src_embed"][PAD] = 0.0
    raw["tgt_embed"][PAD] = 0.0
    for i in range(config.layers):
        raw.update(_attention_params(rng, d, f"enc.{i}.sa"))
        raw.update(_ff_params(rng, d, config.d_ff, f"enc.{i}.ff"))
    for i in range(config.layers):
        raw.update(_attention_params(rng, d, f"dec.{i}.sa"))
        raw.update(_attention_params(rng, d, f"dec.{i}.ed"))
        raw.update(_ff_params(rng, d, config.d_ff, f"dec.{i}.ff"))
    return {name: T.parameter(value, dtype=dtype) for name, value in raw.items()}


@lru_cache(maxsize=32)
def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    pe.setflags(write=False)
    return pe


# ---------------------------------------------------------------------------
# Sublayers
# ---------------------------------------------------------------------------

def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    return x, False


def multi_head_attention(
    x: Tensor, kv: Tensor, params: dict, prefix: str, heads: int, blocked: Optional[np.ndarray]
) -> Tensor:
    """Scaled dot-product attention; ``blocked`` is a bool mask broadcastable to [B, H, Tq, Tk]."""
    B, Tq, d = x.shape
    Tk = kv.shape[1]
    if d % heads:
        raise ConfigError(f"d_model {d} not divisible by heads {heads}")
    dh = d // heads
    p = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
    q = (x @ p("wq") + p("bq")).reshape(B, Tq, heads, dh).transpose(0, 2, 1, 3)
    k = (kv @ p("wk") + p("bk")).reshape(B, Tk, heads, dh).transpose(0, 2, 3, 1)
    v = (kv @ p("wv") + p("bv")).reshape(B, Tk, heads, dh).transpose(0, 2, 1, 3)
    scores = T.scalar_mul(q @ k, 1.0 / math.sqrt(dh))
    if blocked is not None:
        scores = T.masked_fill(scores, blocked)
    ctx = T.softmax(scores) @ v
    return ctx.transpose(0, 2, 1, 3).reshape(B, Tq, d) @ p("wo") + p("bo")


def _residual_norm(x: Tensor, branch: Tensor, params: dict, prefix: str, dropout: float, rng) -> Tensor:
    return T.layer_norm(x + T.dropout(branch, dropout, rng), params[f"{prefix}.ln.gain"], params[f"{prefix}.ln.bias"])


def causal_mask(length: int) -> np.ndarray:
    return np.triu(np.ones((length, length), dtype=bool), k=1)


def self_attention_layer(
    x: Tensor,
    params: dict,
    prefix: str,
    heads: int,
    pad_mask: Optional[np.ndarray] = None,
    causal: bool = False,
    dropout: float = 0.0,
    rng: Optional[RngContext] = None,
) -> Tensor:
    """LayerNorm(x + Dropout(MultiHead(x, x, x)))."""
    x, single = _batched(x)
    Tq = x.shape[1]
    blocked = None
    if causal:
        blocked = causal_mask(Tq)[None, None]
    if pad_mask is not None:
        keys = np.asarray(pad_mask, dtype=bool).reshape(x.shape[0], 1, 1, Tq)
        blocked = keys if blocked is None else (blocked | keys)
    y = _residual_norm(x, multi_head_attention(x, x, params, prefix, heads, blocked), params, prefix, dropout, rng)
    return y.reshape(*y.shape[1:]) if single else y


def cross_attention_layer(
    x: Tensor,
    memory: EncoderStates,
    params: dict,
    prefix: str,
    heads: int,
    dropout: float = 0.0,
    rng: Optional[RngContext] = None,
) -> Tensor:
    """LayerNorm(x + Dropout(MultiHead(q=x, k=v=memory.h)))."""
    x, single = _batched(x)
    h, _ = _batched(memory.h)
    pad = np.asarray(memory.pad_mask, dtype=bool).reshape(h.shape[0], h.shape[1])
    if pad.all(axis=1).any():
        raise ValueError("cross attention over a fully padded memory")
    blocked = pad[:, None, None, :]
    y = _residual_norm(x, multi_head_attention(x, h, params, prefix, heads, blocked), params, prefix, dropout, rng)
    return y.reshape(*y.shape[1:]) if single else y


def feed_forward_layer(
    x: Tensor, params: dict, prefix: str, dropout: float = 0.0, rng: Optional[RngContext] = None
) -> Tensor:
    """LayerNorm(x + Dropout(W2 relu(W1 x + b1) + b2))."""
    p = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
    branch = T.relu(x @ p("w1") + p("b1")) @ p("w2") + p("b2")
    return _residual_norm(x, branch, params, prefix, dropout, rng)


def apply_block(
    x: Tensor,
    order: LayerOrder,
    params: dict,
    prefix: str,
    heads: int,
    memory: Optional[EncoderStates] = None,
    pad_mask: Optional[np.ndarray] = None,
    causal: bool = False,
    dropout: float = 0.0,
    rng: Optional[RngContext] = None,
) -> Tensor:
    """Run the sublayers of one block in ``order`` with the block's shared parameters."""
    kinds = tuple(LayerKind(k) for k in order)
    if ED in kinds and memory is None:
        raise ValueError("ED layer requested without encoder memory")
    for kind in kinds:
        if kind is SA:
            x = self_attention_layer(x, params, f"{prefix}.sa", heads, pad_mask, causal, dropout, rng)
        elif kind is ED:
            x = cross_attention_layer(x, memory, params, f"{prefix}.ed", heads, dropout, rng)
        else:
            x = feed_forward_layer(x, params, f"{prefix}.ff", dropout, rng)
    return x


# ---------------------------------------------------------------------------
# Stacks
# ---------------------------------------------------------------------------

def _tokens(tokens, max_len: int) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.shape[1] > max_len:
        raise ValueError(f"sequence length {arr.shape[1]} exceeds max_len {max_len}")
    return arr


def embed(tokens: np.ndarray, table: Tensor, config: ModelConfig) -> Tensor:
    """Token embeddings scaled by sqrt(d) (no positions)."""
    return T.scalar_mul(T.embedding(table, tokens), math.sqrt(config.d_model))


def encode(
    src_tokens,
    order: LayerOrder,
    params: dict,
    config: ModelConfig,
    rng: Optional[RngContext] = None,
    embedded: Optional[Tensor] = None,
) -> EncoderStates:
    """Embed, add sinusoidal positions, then run ``config.layers`` blocks all in ``order``.

    ``embedded`` lets callers reuse a token-embedding tensor they already built.
    """
    src = _tokens(src_tokens, config.max_len)
    pad = src == PAD
    e = embedded if embedded is not None else embed(src, params["src_embed"], config)
    x = T.dropout(e + sinusoidal_positions(src.shape[1], config.d_model).astype(e.dtype), config.dropout, rng)
    for i in range(config.layers):
        x = apply_block(x, order, params, f"enc.{i}", config.heads, pad_mask=pad, dropout=config.dropout, rng=rng)
    return EncoderStates(h=x, pad_mask=pad)


def decode_forward(
    tgt_tokens,
    memory: EncoderStates,
    order: LayerOrder,
    params: dict,
    config: ModelConfig,
    rng: Optional[RngContext] = None,
) -> Tensor:
    """Teacher-forced next-token logits [B, T_y, V_tgt] for decoder inputs ``tgt_tokens``."""
    tgt = _tokens(tgt_tokens, config.max_len)
    table = params["tgt_embed"]
    x = embed(tgt, table, config)
    x = T.dropout(x + sinusoidal_positions(tgt.shape[1], config.d_model).astype(x.dtype), config.dropout, rng)
    for i in range(config.layers):
        x = apply_block(
            x, order, params, f"dec.{i}", config.heads,
            memory=memory, pad_mask=None, causal=True, dropout=config.dropout, rng=rng,
        )
    return x @ T.transpose(table, (1, 0))
