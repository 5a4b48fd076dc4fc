"""Greedy decoding, ensembles and dev-set evaluation."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .data import Example, make_batch, pad_sequences
from .metrics import exact_match, sentence_bleu, token_accuracy
from .model import IOTModel
from .transformer import BOS, EOS, PAD, EncoderStates

Override = Union[None, int, tuple]


@dataclass
class DecodeResult:
    hypothesis: list
    enc_code: int
    dec_code: int
    probs: dict = field(default_factory=dict)
    truncated: bool = False
    metrics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "hypothesis": self.hypothesis,
            "enc_code": self.enc_code,
            "dec_code": self.dec_code,
            "probs": {k: [float(x) for x in v] for k, v in self.probs.items()},
            "truncated": self.truncated,
            "metrics": self.metrics,
        }


def _override_indices(orders, value, B: int, default: np.ndarray) -> np.ndarray:
    if value is None:
        return default
    if np.isscalar(value):
        return np.full(B, orders.index_of(int(value)), dtype=np.int64)
    codes = list(value)
    if len(codes) != B:
        raise ValueError(f"per-instance override has {len(codes)} codes for {B} instances")
    return np.array([orders.index_of(int(c)) for c in codes], dtype=np.int64)


def resolve_orders(model: IOTModel, src: np.ndarray, order_override: Override = None):
    """Argmax order selection per instance, optionally pinned.

    ``order_override`` is a decoder code, an ``(enc_code, dec_code)`` pair (either
    may be None), and each code may be a per-instance sequence.
    """
    enc_idx, dec_idx, states, probs = model.select_orders(src)
    B = src.shape[0]
    if order_override is not None:
        if isinstance(order_override, tuple):
            enc_ov, dec_ov = order_override
        else:
            enc_ov, dec_ov = None, order_override
        enc_idx = _override_indices(model.enc_orders, enc_ov, B, enc_idx)
        dec_idx = _override_indices(model.dec_orders, dec_ov, B, dec_idx)
    return enc_idx, dec_idx, states, probs


def _subset_memory(states: EncoderStates, rows: np.ndarray) -> EncoderStates:
    return EncoderStates(h=T._as_tensor(states.h.data[rows]), pad_mask=states.pad_mask[rows])


def _grouped_logits(model: IOTModel, prefix: np.ndarray, states: list, enc_idx, dec_idx) -> np.ndarray:
    """Last-position logits [B, V] with each instance run through its own (enc, dec) path."""
    out = np.empty((prefix.shape[0], model.config.tgt_vocab), dtype=states[0].h.dtype)
    pairs = sorted(set(zip(enc_idx.tolist(), dec_idx.tolist())))
    for m, n in pairs:
        rows = np.nonzero((enc_idx == m) & (dec_idx == n))[0]
        logits = model.logits(prefix[rows], _subset_memory(states[m], rows), n)
        out[rows] = logits.data[:, -1, :]
    return out


def _default_max_len(model: IOTModel, src: np.ndarray) -> int:
    return model.config.max_len - 1


def greedy_decode(
    model: IOTModel,
    sources: Sequence[Sequence[int]],
    max_len: Optional[int] = None,
    order_override: Override = None,
) -> list:
    """Token-by-token argmax until EOS or ``max_len`` output tokens."""
    src = pad_sequences(sources)
    B = src.shape[0]
    max_len = max_len or _default_max_len(model, src)
    with T.no_grad():
        enc_idx, dec_idx, states, probs = resolve_orders(model, src, order_override)
        prefix = np.full((B, 1), BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        for _ in range(max_len):
            logits = _grouped_logits(model, prefix, states, enc_idx, dec_idx)
            nxt = np.where(done, PAD, logits.argmax(axis=-1))
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
    return _results(model, prefix, done, enc_idx, dec_idx, probs)


def ensemble_decode(
    models: Sequence[IOTModel],
    sources: Sequence[Sequence[int]],
    max_len: Optional[int] = None,
) -> list:
    """Greedy decoding on the average of the members' next-token distributions."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    vocab = (models[0].config.src_vocab, models[0].config.tgt_vocab)
    for m in models[1:]:
        if (m.config.src_vocab, m.config.tgt_vocab) != vocab:
            raise ValueError("ensemble members disagree on vocabulary sizes")
    src = pad_sequences(sources)
    B = src.shape[0]
    max_len = max_len or min(_default_max_len(m, src) for m in models)
    with T.no_grad():
        routed = [resolve_orders(m, src) for m in models]
        prefix = np.full((B, 1), BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        for _ in range(max_len):
            avg = None
            for model, (enc_idx, dec_idx, states, _) in zip(models, routed):
                logits = _grouped_logits(model, prefix, states, enc_idx, dec_idx)
                p = T.softmax(T._as_tensor(logits)).data
                avg = p if avg is None else avg + p
            avg = avg / len(models)
            nxt = np.where(done, PAD, avg.argmax(axis=-1))
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
    enc_idx, dec_idx, _, probs = routed[0]
    return _results(models[0], prefix, done, enc_idx, dec_idx, probs)


def _results(model, prefix, done, enc_idx, dec_idx, probs) -> list:
    out = []
    for b in range(prefix.shape[0]):
        toks = prefix[b, 1:].tolist()
        hyp = toks[: toks.index(EOS)] if EOS in toks else [t for t in toks if t != PAD]
        out.append(
            DecodeResult(
                hypothesis=hyp,
                enc_code=model.enc_orders.codes[enc_idx[b]],
                dec_code=model.dec_orders.codes[dec_idx[b]],
                probs={k: v[b] for k, v in probs.items()},
                truncated=not bool(done[b]),
            )
        )
    return out


def score_instance(hyp, ref, kind: str) -> float:
    if kind == "bleu":
        return sentence_bleu(hyp, ref)
    if kind == "exact":
        return exact_match(hyp, ref)
    raise ValueError(f"unknown score kind {kind!r}")


def attach_metrics(results: list, examples: Sequence[Example]) -> list:
    for r, ex in zip(results, examples):
        r.metrics = {
            "exact_match": exact_match(r.hypothesis, ex.tgt),
            "token_acc": token_accuracy(r.hypothesis, ex.tgt),
            "bleu": sentence_bleu(r.hypothesis, ex.tgt),
        }
    return results


def teacher_forced_loss(model: IOTModel, examples: Sequence[Example], order_override: Override = None, batch_size: int = 256) -> float:
    """Token-mean NLL with each instance on its selected path."""
    total, tokens = 0.0, 0
    with T.no_grad():
        for start in range(0, len(examples), batch_size):
            batch = make_batch(examples[start : start + batch_size])
            enc_idx, dec_idx, states, _ = resolve_orders(model, batch.src, order_override)
            for m, n in sorted(set(zip(enc_idx.tolist(), dec_idx.tolist()))):
                rows = np.nonzero((enc_idx == m) & (dec_idx == n))[0]
                logits = model.logits(batch.tgt_in[rows], _subset_memory(states[m], rows), n)
                loss = T.cross_entropy_ls(logits, batch.tgt_out[rows], 0.0, PAD, reduction="sum")
                total += float(loss.data)
            tokens += batch.num_tokens
    return total / tokens


def evaluate(
    model: IOTModel,
    examples: Sequence[Example],
    order_override: Override = None,
    batch_size: int = 256,
    with_loss: bool = True,
) -> dict:
    """Corpus metrics, per-order usage counts and per-instance results."""
    results: list = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        results.extend(greedy_decode(model, [e.src for e in chunk], order_override=order_override))
    attach_metrics(results, examples)
    n = max(len(results), 1)
    usage_dec = Counter(r.dec_code for r in results)
    usage_enc = Counter(r.enc_code for r in results)
    report = {
        "n": len(results),
        "exact_match": sum(r.metrics["exact_match"] for r in results) / n,
        "token_acc": sum(r.metrics["token_acc"] for r in results) / n,
        "bleu": sum(r.metrics["bleu"] for r in results) / n,
        "usage_dec": {str(c): usage_dec.get(c, 0) for c in model.dec_orders.codes},
        "usage_enc": {str(c): usage_enc.get(c, 0) for c in model.enc_orders.codes},
        "results": results,
    }
    if with_loss:
        report["loss"] = teacher_forced_loss(model, examples, order_override, batch_size)
    return report
