"""Training loop for the iot / fixed / uniform_shared modes."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, LossConfig, TrainConfig, config_from_dict
from .data import Batch, generate_corpus, iterate_batches
from .decoding import evaluate
from .model import IOTModel
from .objective import LossBundle, exploitation_loss, exploration_loss, total_loss, weighted_task_loss
from .optim import AdamState, adam_step, lr_at, peak_to_base
from .routing import OrderSet
from .tensor import GUMBEL_TAG, NonFiniteError, RngContext, Tensor
from .transformer import PAD, ModelConfig

log = logging.getLogger(__name__)


def build_model(cfg: ExperimentConfig, seed: Optional[int] = None) -> IOTModel:
    return IOTModel.create(
        cfg.model_config(),
        enc_codes=cfg.train.encoder_codes(),
        dec_codes=cfg.train.decoder_codes(),
        seed=cfg.seed if seed is None else seed,
        predictor=cfg.train.mode == "iot",
    )


def _schedule(tcfg: TrainConfig, lcfg: LossConfig, step: int) -> tuple[float, float, float]:
    """(tau, c1, c2) at ``step`` under the configured auxiliary schedule."""
    frac = min(step / max(tcfg.max_steps, 1), 1.0)
    if tcfg.aux_schedule == "temp_decay":
        return tcfg.tau * (tcfg.tau_min / tcfg.tau) ** frac, 0.0, 0.0
    if tcfg.aux_schedule == "c1_decay":
        return tcfg.tau, lcfg.c1 * (1.0 - frac), 0.0
    return tcfg.tau, lcfg.c1, lcfg.c2


def _ones(B: int, K: int, dtype) -> Tensor:
    return T._as_tensor(np.ones((B, K), dtype=dtype))


def compute_losses(
    model: IOTModel,
    batch: Batch,
    tcfg: TrainConfig,
    lcfg: LossConfig,
    seed: int,
    step: int,
    train: bool = True,
) -> tuple[Tensor, LossBundle]:
    """Forward every (encoder, decoder) path and assemble the objective."""
    rng = RngContext(seed, step) if train else None
    gumbel = T.stream(seed, GUMBEL_TAG, step)
    tau, c1, c2 = _schedule(tcfg, lcfg, step)
    floor = lcfg.clamp_floor or None
    src, pad = batch.src, batch.src_pad
    B = src.shape[0]
    mode = tcfg.mode

    embedded = model.source_embedding(src)
    states = model.encode_all(src, rng, embedded)
    M, N = len(model.enc_orders), len(model.dec_orders)
    l_d, l_s = [], []
    parts = {}
    extras = {}

    gamma = None
    h = states[0].h
    if M > 1:
        if mode == "iot":
            dec = model.encoder_routing(embedded, pad, tau, gumbel, floor)
            gamma = dec.weights
            aux = dec.clamped if lcfg.clamp_aux else dec.pi
            parts["l_d_enc"] = exploration_loss(aux, lcfg.normalize_kl)
            parts["l_s_enc"] = exploitation_loss(aux, lcfg.normalize_kl)
            extras["pi_enc_mean"] = dec.pi.data.mean(axis=0).tolist()
            mix = [T.scale_rows(s.h, T.getitem(gamma, (slice(None), m))) for m, s in enumerate(states)]
            h = mix[0]
            for term in mix[1:]:
                h = h + term
        else:
            gamma = _ones(B, M, embedded.dtype)

    lam = None
    if N > 1:
        if mode == "iot":
            dec = model.decoder_routing(h, pad, tau, gumbel, floor)
            lam = dec.weights
            aux = dec.clamped if lcfg.clamp_aux else dec.pi
            parts["l_d_dec"] = exploration_loss(aux, lcfg.normalize_kl)
            parts["l_s_dec"] = exploitation_loss(aux, lcfg.normalize_kl)
            extras["pi_dec_mean"] = dec.pi.data.mean(axis=0).tolist()
        else:
            lam = _ones(B, N, embedded.dtype)

    path = [
        [
            T.cross_entropy_ls(
                model.logits(batch.tgt_in, states[m], n, rng),
                batch.tgt_out,
                tcfg.label_smoothing,
                PAD,
                reduction="rows",
            )
            for n in range(N)
        ]
        for m in range(M)
    ]
    ntok = batch.num_tokens
    l_c = T.scalar_mul(weighted_task_loss(path, gamma, lam), 1.0 / ntok)
    for side in ("enc", "dec"):
        if f"l_d_{side}" in parts:
            l_d.append(parts[f"l_d_{side}"])
            l_s.append(parts[f"l_s_{side}"])
    loss = total_loss(l_c, l_d, l_s, c1, c2)

    bundle = LossBundle(
        path_losses=[[float(p.data.sum()) / ntok for p in row] for row in path],
        l_c=float(l_c.data),
        l_d_enc=float(parts["l_d_enc"].data) if "l_d_enc" in parts else 0.0,
        l_d_dec=float(parts["l_d_dec"].data) if "l_d_dec" in parts else 0.0,
        l_s_enc=float(parts["l_s_enc"].data) if "l_s_enc" in parts else 0.0,
        l_s_dec=float(parts["l_s_dec"].data) if "l_s_dec" in parts else 0.0,
        total=float(loss.data),
        c1=c1,
        c2=c2,
        clamp_floor=lcfg.clamp_floor,
        extras=extras,
    )
    return loss, bundle


def train_step(
    model: IOTModel,
    batch: Batch,
    tcfg: TrainConfig,
    lcfg: LossConfig,
    state: AdamState,
    seed: int,
    step: int,
    lr_scale: float = 1.0,
) -> LossBundle:
    """One forward/backward pass plus an Adam update at schedule step ``step`` (1-based)."""
    loss, bundle = compute_losses(model, batch, tcfg, lcfg, seed, step)
    T.zero_grad(model.parameters())
    loss.backward()
    lr = lr_at(step, peak_to_base(tcfg.lr, tcfg.warmup), tcfg.warmup) * lr_scale
    adam_step(
        {n: p.data for n, p in model.params.items()},
        {n: p.grad for n, p in model.params.items()},
        state,
        lr,
        tuple(tcfg.betas),
        tcfg.eps,
    )
    bundle.extras["lr"] = lr
    return bundle


@dataclass
class FitResult:
    model: IOTModel
    history: list
    step_log: list
    best: dict
    config: ExperimentConfig
    corpus: dict = field(repr=False, default_factory=dict)
    events: list = field(default_factory=list)


def _usage_share(usage: dict) -> dict:
    total = sum(usage.values()) or 1
    return {k: v / total for k, v in usage.items()}


def fit(
    cfg: ExperimentConfig,
    out_dir=None,
    corpus: Optional[dict] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
    model_seed: Optional[int] = None,
) -> FitResult:
    """Train until ``max_steps``/``max_epochs`` or dev exact-match stalls for ``patience`` epochs.

    The returned model holds the best-dev parameters.
    """
    cfg.validate()
    tcfg, lcfg = cfg.train, cfg.loss
    seed = cfg.seed
    corpus = corpus or generate_corpus(cfg.task, seed)
    model = build_model(cfg, model_seed)
    state = AdamState()
    history: list = []
    step_log: list = []
    events: list = []
    best = {"dev_exact_match": -1.0}
    best_arrays = None
    stale = 0
    step = 0
    lr_scale = 1.0

    for epoch in range(1, tcfg.max_epochs + 1):
        losses = []
        for batch in iterate_batches(corpus["train"], tcfg.batch_size, seed, epoch):
            step += 1
            for _ in range(tcfg.max_lr_halvings + 1):
                try:
                    bundle = train_step(model, batch, tcfg, lcfg, state, seed, step, lr_scale)
                    break
                except NonFiniteError as exc:
                    lr_scale *= 0.5
                    events.append({"step": step, "event": "lr_halved", "lr_scale": lr_scale, "reason": str(exc)})
                    log.warning("step %d diverged (%s); retrying with lr scale %g", step, exc, lr_scale)
            else:
                raise NonFiniteError(f"step {step}: still diverging after {tcfg.max_lr_halvings} lr halvings")
            losses.append(bundle.total)
            step_log.append({"step": step, "loss": bundle.total, "l_c": bundle.l_c, "lr": bundle.extras["lr"]})
            if step >= tcfg.max_steps:
                break

        dev = evaluate(model, corpus["dev"])
        record = {
            "epoch": epoch,
            "step": step,
            "train_loss": float(np.mean(losses)) if losses else math.nan,
            "dev_loss": dev["loss"],
            "dev_exact_match": dev["exact_match"],
            "dev_token_acc": dev["token_acc"],
            "dev_bleu": dev["bleu"],
            "usage_dec": dev["usage_dec"],
            "usage_enc": dev["usage_enc"],
        }
        history.append(record)
        if on_epoch:
            on_epoch(record)
        log.info("epoch %d step %d loss %.4f dev_em %.3f usage %s", epoch, step, record["train_loss"], dev["exact_match"], dev["usage_dec"])
        if dev["exact_match"] > best["dev_exact_match"]:
            best = dict(record)
            best_arrays = {n: a.copy() for n, a in model.state_arrays().items()}
            stale = 0
        else:
            stale += 1
        if step >= tcfg.max_steps or stale >= tcfg.patience:
            break

    if best_arrays is not None:
        model.load_arrays(best_arrays)
    best["usage_dec_share"] = _usage_share(best["usage_dec"])
    result = FitResult(model, history, step_log, best, cfg, corpus, events)
    if out_dir is not None:
        write_run(result, out_dir)
    return result


def write_run(result: FitResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "best.ckpt", result.model, result.config, {"best": result.best, "history": result.history})
    with open(out / "log.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out / "steps.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.step_log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def save_model(path, model: IOTModel, cfg: ExperimentConfig, extra: Optional[dict] = None) -> None:
    meta = {"config": cfg.to_json(), "architecture": model.describe()}
    if extra:
        meta.update(extra)
    save_checkpoint(path, model.state_arrays(), meta)


def load_model(path) -> tuple[IOTModel, ExperimentConfig, dict]:
    arrays, meta = load_checkpoint(path)
    cfg = config_from_dict(meta["config"])
    arch = meta["architecture"]
    model = IOTModel(
        ModelConfig(**arch["model"]).validate(),
        OrderSet.from_codes("encoder", arch["enc_orders"]["codes"]),
        OrderSet.from_codes("decoder", arch["dec_orders"]["codes"]),
        {name: T.parameter(a, dtype=np.float32) for name, a in arrays.items()},
        predictor=arch["predictor"],
    )
    return model, cfg, meta
