"""Diagnostic studies over trained models: preference ratios, variance
decomposition, subset and robustness matrices, ensembles, parameter overhead.

Each study has a pure core working on a score table ``S[K, n]`` (order by
instance) so it can be checked against hand-built fixtures, plus a thin
wrapper that decodes a dev set to fill the table.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Example, TaskSpec
from .decoding import attach_metrics, ensemble_decode, evaluate
from .model import IOTModel

SCORE_KEYS = {"exact": "exact_match", "bleu": "bleu"}


def score_kind_for(task: TaskSpec) -> str:
    """BLEU for pure mapped-reverse corpora, exact match for everything else."""
    return "bleu" if task.kind == "mapped-reverse" else "exact"


@dataclass
class StudyReport:
    kind: str
    data: dict
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"kind": self.kind, "data": self.data, "meta": self.meta}


# ---------------------------------------------------------------------------
# score tables
# ---------------------------------------------------------------------------

def instance_scores(model: IOTModel, examples: Sequence[Example], kind: str = "exact", order_override=None) -> np.ndarray:
    report = evaluate(model, examples, order_override=order_override, with_loss=False)
    key = SCORE_KEYS[kind]
    return np.array([r.metrics[key] for r in report["results"]], dtype=np.float64)


def score_table(models: Sequence[IOTModel], examples: Sequence[Example], kind: str = "exact") -> tuple[list, np.ndarray]:
    """``(codes, S)`` with one row per decoder order.

    Several models are read as fixed-order models, each decoded with its own
    order. A single multi-order model is decoded once per forced order.
    """
    if len(models) == 1 and len(models[0].dec_orders) > 1:
        model = models[0]
        codes = list(model.dec_orders.codes)
        rows = [instance_scores(model, examples, kind, order_override=c) for c in codes]
    else:
        codes = []
        for m in models:
            if len(m.dec_orders) != 1:
                raise ValueError("expected fixed-order models (one decoder order each)")
            codes.append(m.dec_orders.codes[0])
        rows = [instance_scores(m, examples, kind) for m in models]
    return codes, np.stack(rows)


# ---------------------------------------------------------------------------
# pure cores
# ---------------------------------------------------------------------------

def preference_ratios_from_scores(S: np.ndarray) -> np.ndarray:
    """Share of instances on which each order scores best; ties split evenly."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[1] == 0:
        raise ValueError("score table must be [orders, instances] with at least one instance")
    best = S == S.max(axis=0, keepdims=True)
    return (best / best.sum(axis=0, keepdims=True)).sum(axis=1) / S.shape[1]


def variance_from_scores(S: np.ndarray) -> dict:
    """Corpus-level versus per-instance spread across orders (population variance)."""
    S = np.asarray(S, dtype=np.float64)
    if S.shape[0] < 2:
        raise ValueError("variance decomposition needs at least two orders")
    corpus = float(np.var(S.mean(axis=1)))
    instance = float(np.var(S, axis=0).mean())
    return {
        "corpus_variance": corpus,
        "mean_instance_variance": instance,
        "ratio": instance / max(corpus, 1e-12),
    }


def subset_matrix_from_scores(selected: Sequence[int], S: np.ndarray) -> dict:
    """Row i holds instances routed to order i, column j their mean score under order j."""
    S = np.asarray(S, dtype=np.float64)
    K = S.shape[0]
    selected = np.asarray(selected, dtype=np.int64)
    if selected.shape != (S.shape[1],):
        raise ValueError("one selected order per instance is required")
    matrix, counts, argmax = [], [], []
    diag_max = diag_strict = 0
    for i in range(K):
        rows = selected == i
        counts.append(int(rows.sum()))
        if not rows.any():
            matrix.append([None] * K)
            argmax.append(None)
            continue
        means = S[:, rows].mean(axis=1)
        matrix.append([float(x) for x in means])
        argmax.append(int(np.argmax(means)))
        diag_max += bool(means[i] >= means.max())
        diag_strict += bool(all(means[i] > means[j] for j in range(K) if j != i))
    return {
        "matrix": matrix,
        "counts": counts,
        "row_argmax": argmax,
        "nonempty_rows": sum(c > 0 for c in counts),
        "diagonal_row_max": diag_max,
        "diagonal_strict": diag_strict,
    }


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------

def preference_ratios(models: Sequence[IOTModel], examples: Sequence[Example], kind: str = "exact") -> dict:
    codes, S = score_table(models, examples, kind)
    ratios = preference_ratios_from_scores(S)
    return {"codes": codes, "ratios": [float(r) for r in ratios], "corpus_scores": [float(x) for x in S.mean(axis=1)]}


def variance_report(models: Sequence[IOTModel], examples: Sequence[Example], kind: str = "exact") -> dict:
    codes, S = score_table(models, examples, kind)
    out = variance_from_scores(S)
    out["codes"] = codes
    out["corpus_scores"] = [float(x) for x in S.mean(axis=1)]
    return out


def subset_decode_matrix(model: IOTModel, examples: Sequence[Example], kind: str = "exact") -> dict:
    codes = list(model.dec_orders.codes)
    selected = np.array([model.dec_orders.index_of(r.dec_code) for r in evaluate(model, examples, with_loss=False)["results"]])
    S = np.stack([instance_scores(model, examples, kind, order_override=c) for c in codes])
    out = subset_matrix_from_scores(selected, S)
    out["codes"] = codes
    return out


def robustness_matrix(model: IOTModel, examples: Sequence[Example], kind: str = "exact", codes: Optional[Sequence[int]] = None) -> dict:
    """Dev score under every forced decoder order.

    A multi-order model is swept over its own orders by default; a
    fixed-order model over all six decoder orders, which share its weights.
    """
    trained = list(model.dec_orders.codes)
    if codes is None:
        codes = trained if len(trained) > 1 else list(range(1, 7))
    view = model.with_decoder_orders(codes)
    scores = [float(instance_scores(view, examples, kind, order_override=c).mean()) for c in codes]
    top, low = max(scores), min(scores)
    out = {
        "codes": [int(c) for c in codes],
        "scores": scores,
        "spread": top - low,
        "relative_spread": (top - low) / top if top > 0 else 0.0,
    }
    if len(trained) == 1:
        out["trained_code"] = trained[0]
    return out


def ensemble_scores(models: Sequence[IOTModel], examples: Sequence[Example], kind: str = "exact") -> dict:
    """Ensemble score next to each member's own score."""
    key = SCORE_KEYS[kind]
    results = attach_metrics(ensemble_decode(models, [e.src for e in examples]), examples)
    members = [float(instance_scores(m, examples, kind).mean()) for m in models]
    return {
        "ensemble": float(np.mean([r.metrics[key] for r in results])),
        "members": members,
        "hypotheses": [r.hypothesis for r in results],
    }


def param_overhead(model: IOTModel) -> dict:
    total = model.num_parameters()
    pred = sum(p.size for n, p in model.params.items() if n.startswith("pred."))
    return {"total_params": int(total), "predictor_params": int(pred)}


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------

def _csv_rows(report: StudyReport) -> list:
    d = report.data
    if report.kind == "subsets":
        rows = [["selected_order", "count"] + [f"order_{c}" for c in d["codes"]]]
        for code, count, row in zip(d["codes"], d["counts"], d["matrix"]):
            rows.append([code, count] + ["" if v is None else repr(v) for v in row])
        return rows
    if report.kind in ("ratios", "variance"):
        col = "ratio" if report.kind == "ratios" else "corpus_score"
        vals = d["ratios"] if report.kind == "ratios" else d["corpus_scores"]
        return [["order_code", col]] + [[c, repr(v)] for c, v in zip(d["codes"], vals)]
    if report.kind == "robustness":
        return [["order_code", "score"]] + [[c, repr(v)] for c, v in zip(d["codes"], d["scores"])]
    return [["key", "value"]] + [[k, json.dumps(v, sort_keys=True)] for k, v in sorted(d.items()) if not isinstance(v, (list, dict))]


def write_report(report: StudyReport, out_dir, stem: Optional[str] = None) -> tuple[Path, Path]:
    """Write ``<stem>.json`` (data plus provenance) and ``<stem>.csv`` (table only)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or report.kind
    jpath, cpath = out / f"{stem}.json", out / f"{stem}.csv"
    jpath.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(cpath, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(_csv_rows(report))
    return jpath, cpath
