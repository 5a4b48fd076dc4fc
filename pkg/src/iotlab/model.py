"""Weight-tied multi-order encoder-decoder with optional order predictors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .routing import OrderSet, RoutingDecision, route, select_argmax, sentence_summary
from .tensor import INIT_TAG, RngContext, Tensor
from .transformer import (
    PAD,
    EncoderStates,
    ModelConfig,
    decode_forward,
    embed,
    encode,
    init_transformer_params,
)


class IOTModel:
    """Transformer whose encoder/decoder order is picked per instance.

    A side with a single candidate order, or a model built with
    ``predictor=False`` (the uniform-shared ablation), carries no predictor weights.
    """

    def __init__(self, config: ModelConfig, enc_orders: OrderSet, dec_orders: OrderSet, params: dict, predictor: bool = True):
        self.config = config
        self.enc_orders = enc_orders
        self.dec_orders = dec_orders
        self.params = params
        self.predictor = predictor

    @classmethod
    def create(
        cls,
        config: ModelConfig,
        enc_codes: Sequence[int] = (1,),
        dec_codes: Sequence[int] = (1,),
        seed: int = 0,
        predictor: bool = True,
        dtype=None,
    ) -> "IOTModel":
        config.validate()
        enc = OrderSet.from_codes("encoder", enc_codes)
        dec = OrderSet.from_codes("decoder", dec_codes)
        params = init_transformer_params(config, T.stream(seed, INIT_TAG, 0), dtype=dtype)
        # Predictors start at zero: uniform routing until the loss says otherwise.
        if predictor and len(enc) > 1:
            params["pred.enc"] = T.parameter(np.zeros((config.d_model, len(enc))), dtype=dtype)
        if predictor and len(dec) > 1:
            params["pred.dec"] = T.parameter(np.zeros((config.d_model, len(dec))), dtype=dtype)
        return cls(config, enc, dec, params, predictor)

    # -- bookkeeping ---------------------------------------------------------

    @property
    def has_enc_predictor(self) -> bool:
        return "pred.enc" in self.params

    @property
    def has_dec_predictor(self) -> bool:
        return "pred.dec" in self.params

    def parameters(self) -> list:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def describe(self) -> dict:
        return {
            "model": self.config.to_json(),
            "enc_orders": self.enc_orders.to_json(),
            "dec_orders": self.dec_orders.to_json(),
            "predictor": self.predictor,
        }

    # -- forward pieces ------------------------------------------------------

    def source_embedding(self, src: np.ndarray) -> Tensor:
        return embed(src, self.params["src_embed"], self.config)

    def encode_all(self, src: np.ndarray, rng: Optional[RngContext] = None, embedded: Optional[Tensor] = None) -> list:
        if embedded is None:
            embedded = self.source_embedding(src)
        return [encode(src, order, self.params, self.config, rng, embedded=embedded) for order in self.enc_orders.orders]

    def encoder_routing(
        self, embedded: Tensor, pad: np.ndarray, tau: float = 1.0, rng=None, clamp_floor: Optional[float] = 0.05
    ) -> RoutingDecision:
        return route(sentence_summary(embedded, pad), self.params["pred.enc"], tau, rng, clamp_floor)

    def decoder_routing(
        self, h: Tensor, pad: np.ndarray, tau: float = 1.0, rng=None, clamp_floor: Optional[float] = 0.05
    ) -> RoutingDecision:
        return route(sentence_summary(h, pad), self.params["pred.dec"], tau, rng, clamp_floor)

    def logits(self, tgt_in: np.ndarray, memory: EncoderStates, dec_index: int, rng: Optional[RngContext] = None) -> Tensor:
        return decode_forward(tgt_in, memory, self.dec_orders.orders[dec_index], self.params, self.config, rng)

    def select_orders(self, src: np.ndarray) -> tuple[np.ndarray, np.ndarray, list, dict]:
        """Inference-time order choice per instance (argmax of predictor logits).

        Returns (encoder indices, decoder indices, encoder states per encoder order,
        routing probabilities by side). Sides without a predictor pick index 0.
        """
        src = np.asarray(src, dtype=np.int64)
        pad = src == PAD
        B = src.shape[0]
        with T.no_grad():
            embedded = self.source_embedding(src)
            states = self.encode_all(src, embedded=embedded)
            probs = {}
            if self.has_enc_predictor:
                summary = sentence_summary(embedded, pad)
                enc_idx = select_argmax(summary, self.params["pred.enc"])
                probs["enc"] = T.softmax(summary @ self.params["pred.enc"]).data
            else:
                enc_idx = np.zeros(B, dtype=np.int64)
            if self.has_dec_predictor:
                h = np.stack([states[m].h.data[b] for b, m in enumerate(enc_idx)])
                summary = sentence_summary(T._as_tensor(h), pad)
                dec_idx = select_argmax(summary, self.params["pred.dec"])
                probs["dec"] = T.softmax(summary @ self.params["pred.dec"]).data
            else:
                dec_idx = np.zeros(B, dtype=np.int64)
        return enc_idx, dec_idx, states, probs

    # -- persistence helpers ---------------------------------------------------

    def state_arrays(self) -> dict:
        return {name: p.data for name, p in self.params.items()}

    def load_arrays(self, arrays: dict) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise ValueError(f"parameter names differ: {sorted(missing)}")
        for name, value in arrays.items():
            p = self.params[name]
            if p.shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = np.array(value, dtype=p.dtype)

    def with_decoder_orders(self, codes: Sequence[int]) -> "IOTModel":
        """A view over the same parameters that decodes with ``codes``.

        The decoder predictor is kept only when the code list is unchanged, so
        a fixed-order model can be run under orders it was never trained with.
        """
        codes = [int(c) for c in codes]
        if codes == list(self.dec_orders.codes):
            return self
        params = {n: p for n, p in self.params.items() if n != "pred.dec"}
        return IOTModel(self.config, self.enc_orders, OrderSet.from_codes("decoder", codes), params, self.predictor)

    def copy(self) -> "IOTModel":
        params = {n: T.parameter(p.data.copy(), dtype=p.dtype) for n, p in self.params.items()}
        return IOTModel(self.config, self.enc_orders, self.dec_orders, params, self.predictor)
