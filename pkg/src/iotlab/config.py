"""Experiment configuration: one JSON document with task/model/train/loss sections."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .data import TaskSpec
from .objective import ConfigError
from .routing import DECODER_SUBSETS
from .transformer import ModelConfig

MODES = ("iot", "fixed", "uniform_shared")
AUX_SCHEDULES = ("none", "temp_decay", "c1_decay")


@dataclass
class LossConfig:
    c1: float = 0.1
    c2: float = 0.01
    clamp_floor: float = 0.05
    clamp_aux: bool = True       # regularisers see clamped (True) or raw (False) probabilities
    normalize_kl: bool = True    # rescale clamped vectors to sum to one inside the KL terms

    def validate(self) -> "LossConfig":
        if self.c1 < 0 or self.c2 < 0:
            raise ConfigError("loss.c1 and loss.c2 must be non-negative")
        if not 0.0 <= self.clamp_floor < 1.0:
            raise ConfigError("loss.clamp_floor must be in [0, 1)")
        return self


@dataclass
class TrainConfig:
    mode: str = "iot"
    fixed_code: int = 1
    enc_codes: list = field(default_factory=lambda: [1])
    dec_codes: Optional[list] = None
    n_dec: int = 2
    lr: float = 5e-4             # peak learning rate, reached at the end of warmup
    warmup: int = 4000
    betas: list = field(default_factory=lambda: [0.9, 0.98])
    eps: float = 1e-9
    label_smoothing: float = 0.1
    batch_size: int = 64
    max_steps: int = 2000
    max_epochs: int = 1000
    patience: int = 10
    tau: float = 1.0
    tau_min: float = 0.1
    aux_schedule: str = "none"
    max_lr_halvings: int = 8

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ConfigError(f"train.mode must be one of {MODES}")
        if self.aux_schedule not in AUX_SCHEDULES:
            raise ConfigError(f"train.aux_schedule must be one of {AUX_SCHEDULES}")
        if self.dec_codes is None and self.mode != "fixed" and self.n_dec != 1 and self.n_dec not in DECODER_SUBSETS:
            raise ConfigError("train.n_dec must be 1..6")
        if self.tau <= 0 or self.tau_min <= 0:
            raise ConfigError("temperatures must be positive")
        if self.batch_size < 1 or self.max_steps < 1 or self.warmup < 1:
            raise ConfigError("batch_size, max_steps and warmup must be positive")
        return self

    def decoder_codes(self) -> list:
        if self.mode == "fixed":
            return [int(self.fixed_code)]
        if self.dec_codes is not None:
            return [int(c) for c in self.dec_codes]
        return [1] if self.n_dec == 1 else list(DECODER_SUBSETS[self.n_dec])

    def encoder_codes(self) -> list:
        if self.mode == "fixed":
            return [int(self.enc_codes[0])]
        return [int(c) for c in self.enc_codes]


_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"src_vocab", "tgt_vocab"}


@dataclass
class ExperimentConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def model_config(self) -> ModelConfig:
        need = self.task.max_source_len
        cfg = ModelConfig(src_vocab=self.task.vocab, tgt_vocab=self.task.vocab, **self.model)
        if cfg.max_len < need + 1:
            raise ConfigError(f"model.max_len {cfg.max_len} too small for sequences of length {need}")
        return cfg.validate()

    def validate(self) -> "ExperimentConfig":
        self.task.validate()
        self.train.validate()
        self.loss.validate()
        self.model_config()
        return self

    def to_json(self) -> dict:
        return {
            "task": asdict(self.task),
            "model": dict(self.model),
            "train": asdict(self.train),
            "loss": asdict(self.loss),
            "seed": self.seed,
        }


def _section(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**copy.deepcopy(raw))


def config_from_dict(raw: dict) -> ExperimentConfig:
    unknown = set(raw) - {"task", "model", "train", "loss", "seed"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    model = raw.get("model", {})
    bad = set(model) - _MODEL_KEYS
    if bad:
        raise ConfigError(f"unknown keys in model: {sorted(bad)}")
    cfg = ExperimentConfig(
        task=_section(TaskSpec, raw.get("task", {}), "task"),
        model=dict(model),
        train=_section(TrainConfig, raw.get("train", {}), "train"),
        loss=_section(LossConfig, raw.get("loss", {}), "loss"),
        seed=int(raw.get("seed", 0)),
    )
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(raw)
