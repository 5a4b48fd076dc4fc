"""Deterministic synthetic seq2seq corpora and batching."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .objective import ConfigError
from .tensor import DATA_TAG, SHUFFLE_TAG, stream
from .transformer import BOS, EOS, PAD

NUM_SPECIAL = 4  # pad, bos, eos, sep
KINDS = ("copy", "reverse", "sort", "mapped-reverse")


@dataclass
class Example:
    src: list
    tgt: list
    component: int = 0


@dataclass
class TaskSpec:
    kind: str = "copy"
    vocab: int = 16
    min_len: int = 3
    max_len: int = 8
    components: list = field(default_factory=list)  # mixture only: [{"kind": ..., "weight": ...}]
    seed: Optional[int] = None
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200

    def validate(self) -> "TaskSpec":
        if self.vocab < NUM_SPECIAL:
            raise ConfigError("task.vocab must be at least 4 (pad/bos/eos/sep are reserved)")
        if self.kind == "mixture":
            if not self.components:
                raise ConfigError("mixture task needs components")
            for c in self.components:
                if set(c) - {"kind", "weight"} or c.get("kind") not in KINDS:
                    raise ConfigError(f"bad mixture component {c}")
                if float(c.get("weight", 1.0)) <= 0:
                    raise ConfigError("mixture weights must be positive")
        elif self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.content_start >= self.vocab:
            raise ConfigError("vocabulary leaves no content tokens")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("task lengths must satisfy 1 <= min_len <= max_len")
        if min(self.n_train, self.n_dev, self.n_test) < 0:
            raise ConfigError("split sizes must be non-negative")
        return self

    @property
    def content_start(self) -> int:
        return NUM_SPECIAL + (len(self.components) if self.kind == "mixture" else 0)

    @property
    def component_kinds(self) -> list:
        return [c["kind"] for c in self.components] if self.kind == "mixture" else [self.kind]

    @property
    def max_source_len(self) -> int:
        return self.max_len + (1 if self.kind == "mixture" else 0)

    def to_json(self) -> dict:
        return asdict(self)


def _bijection(spec: TaskSpec, component: int, seed: int) -> np.ndarray:
    content = np.arange(spec.content_start, spec.vocab)
    table = np.arange(spec.vocab)
    table[content] = stream(seed, DATA_TAG, 100 + component).permutation(content)
    return table


def transform(kind: str, tokens: Sequence[int], table: Optional[np.ndarray] = None) -> list:
    tokens = [int(t) for t in tokens]
    if kind == "copy":
        return tokens
    if kind == "reverse":
        return tokens[::-1]
    if kind == "sort":
        return sorted(tokens)
    if kind == "mapped-reverse":
        return [int(table[t]) for t in tokens][::-1]
    raise ValueError(f"unknown transform {kind!r}")


def generate_corpus(spec: TaskSpec, seed: int = 0) -> dict:
    """Train/dev/test example lists; splits never share a source sequence."""
    spec.validate()
    seed = spec.seed if spec.seed is not None else seed
    kinds = spec.component_kinds
    tables = [_bijection(spec, i, seed) for i in range(len(kinds))]
    weights = np.array([float(c.get("weight", 1.0)) for c in spec.components] or [1.0])
    weights = weights / weights.sum()
    seen: set = set()
    splits = {}
    for split_id, (name, count) in enumerate((("train", spec.n_train), ("dev", spec.n_dev), ("test", spec.n_test))):
        rng = stream(seed, DATA_TAG, split_id)
        examples: list = []
        attempts = 0
        while len(examples) < count:
            attempts += 1
            if attempts > 50 * count + 1000:
                raise ConfigError(f"cannot draw {count} distinct {name} examples; enlarge vocab or lengths")
            comp = int(rng.choice(len(kinds), p=weights))
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            content = rng.integers(spec.content_start, spec.vocab, size=length).tolist()
            src = ([NUM_SPECIAL + comp] if spec.kind == "mixture" else []) + content
            key = tuple(src)
            if key in seen:
                continue
            seen.add(key)
            examples.append(Example(src, transform(kinds[comp], content, tables[comp]), comp))
        splits[name] = examples
    return splits


@dataclass
class Batch:
    src: np.ndarray      # [B, T_x]
    tgt_in: np.ndarray   # [B, T_y + 1]: BOS + target
    tgt_out: np.ndarray  # [B, T_y + 1]: target + EOS
    components: np.ndarray

    @property
    def src_pad(self) -> np.ndarray:
        return self.src == PAD

    @property
    def num_tokens(self) -> int:
        return int((self.tgt_out != PAD).sum())

    def __len__(self) -> int:
        return self.src.shape[0]


def pad_sequences(seqs: Sequence[Sequence[int]], length: Optional[int] = None) -> np.ndarray:
    length = length or max(len(s) for s in seqs)
    out = np.full((len(seqs), length), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def make_batch(examples: Sequence[Example]) -> Batch:
    return Batch(
        src=pad_sequences([e.src for e in examples]),
        tgt_in=pad_sequences([[BOS] + list(e.tgt) for e in examples]),
        tgt_out=pad_sequences([list(e.tgt) + [EOS] for e in examples]),
        components=np.array([e.component for e in examples], dtype=np.int64),
    )


def iterate_batches(examples: Sequence[Example], batch_size: int, seed: int, epoch: int) -> Iterator[Batch]:
    """Shuffled mini-batches; the permutation depends only on (seed, epoch)."""
    perm = stream(seed, SHUFFLE_TAG, epoch).permutation(len(examples))
    for start in range(0, len(examples), batch_size):
        yield make_batch([examples[i] for i in perm[start : start + batch_size]])


def write_corpus_file(path, examples: Sequence[Example]) -> None:
    """One example per line: source ids, a tab, target ids."""
    lines = [" ".join(map(str, e.src)) + "\t" + " ".join(map(str, e.tgt)) for e in examples]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_corpus_file(path) -> list:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        src, tgt = line.split("\t")
        out.append(Example([int(t) for t in src.split()], [int(t) for t in tgt.split()]))
    return out
