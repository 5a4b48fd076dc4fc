"""Command-line entry point: ``iotlab <command> [flags]``.

Exit status is 0 on success, 1 for usage errors and 2 for runtime failures
(missing files, bad configs, diverging training).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from .checkpoint import CheckpointError
from .config import ExperimentConfig, load_config
from .data import generate_corpus, write_corpus_file
from .decoding import evaluate
from .objective import ConfigError
from .studies import (
    StudyReport,
    ensemble_scores,
    param_overhead,
    preference_ratios,
    robustness_matrix,
    score_kind_for,
    subset_decode_matrix,
    variance_report,
    write_report,
)
from .tensor import NonFiniteError
from .train import fit, load_model

log = logging.getLogger("iotlab")

COMMANDS = ("train", "eval", "ratios", "variance", "subsets", "robustness", "ensemble", "params", "gen-data")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iotlab", description="Instance-wise ordered transformer lab")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, needs_config=False):
        p.add_argument("--config", required=needs_config, help="experiment JSON config")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (created if absent)")
        p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
        return p

    common(sub.add_parser("train", help="train a model"), needs_config=True)
    common(sub.add_parser("gen-data", help="write corpus files for inspection"), needs_config=True)

    for name in ("eval", "subsets", "robustness", "params"):
        p = common(sub.add_parser(name))
        p.add_argument("--ckpt", required=True)
        if name != "params":
            p.add_argument("--split", choices=("dev", "test"), default="dev")
        if name == "eval":
            p.add_argument("--order-override", help="CODE (decoder) or ENC,DEC")

    for name in ("ratios", "variance", "ensemble"):
        p = common(sub.add_parser(name))
        p.add_argument("--ckpts", required=True, help="comma-separated checkpoint paths")
        p.add_argument("--split", choices=("dev", "test"), default="dev")
    return parser


def parse_override(text: Optional[str]):
    if text is None:
        return None
    parts = text.split(",")
    try:
        codes = [int(p) for p in parts]
    except ValueError:
        raise UsageError(f"--order-override expects CODE or ENC,DEC, got {text!r}") from None
    if len(codes) == 1:
        return codes[0]
    if len(codes) == 2:
        return (codes[0], codes[1])
    raise UsageError(f"--order-override expects CODE or ENC,DEC, got {text!r}")


def _resolve_config(args, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else base
    if cfg is None:
        raise UsageError("--config is required")
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def _emit(payload: dict, args, name: str) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.json").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def _split(cfg: ExperimentConfig, split: str) -> list:
    return generate_corpus(cfg.task, cfg.seed)[split]


def _load_many(spec: str) -> list:
    paths = [p for p in spec.split(",") if p]
    if not paths:
        raise UsageError("--ckpts needs at least one path")
    return [load_model(p) for p in paths], paths


def cmd_train(args) -> None:
    cfg = _resolve_config(args)
    if args.dump_config:
        sys.stdout.write(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
        return
    if not args.out:
        raise UsageError("train needs --out")
    result = fit(cfg, out_dir=args.out)
    summary = {"best": result.best, "config": cfg.to_json(), "seed": cfg.seed, "events": result.events}
    Path(args.out, "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    sys.stdout.write(json.dumps(result.best, sort_keys=True) + "\n")


def cmd_gen_data(args) -> None:
    cfg = _resolve_config(args)
    if args.dump_config:
        sys.stdout.write(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
        return
    if not args.out:
        raise UsageError("gen-data needs --out")
    corpus = generate_corpus(cfg.task, cfg.seed)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    for split, examples in corpus.items():
        write_corpus_file(Path(args.out) / f"{split}.txt", examples)
    Path(args.out, "task.json").write_text(
        json.dumps({"task": cfg.task.to_json(), "seed": cfg.seed}, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _single(args):
    model, ckpt_cfg, _ = load_model(args.ckpt)
    cfg = _resolve_config(args, ckpt_cfg)
    if args.dump_config:
        sys.stdout.write(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
        return None
    return model, cfg


def _meta(cfg: ExperimentConfig, args, **extra) -> dict:
    meta = {"config": cfg.to_json(), "seed": cfg.seed}
    if getattr(args, "split", None):
        meta["split"] = args.split
    meta.update(extra)
    return meta


def cmd_eval(args) -> None:
    override = parse_override(args.order_override)
    loaded = _single(args)
    if loaded is None:
        return
    model, cfg = loaded
    report = evaluate(model, _split(cfg, args.split), order_override=override)
    results = report.pop("results")
    report["truncated"] = sum(r.truncated for r in results)
    report["order_override"] = args.order_override
    report["meta"] = _meta(cfg, args, checkpoint=args.ckpt)
    _emit(report, args, f"eval_{args.split}")


def _study(args, kind: str, data: dict, cfg: ExperimentConfig, **extra) -> None:
    report = StudyReport(kind, data, _meta(cfg, args, **extra))
    if args.out:
        write_report(report, args.out)
    sys.stdout.write(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")


def cmd_single_study(args) -> None:
    loaded = _single(args)
    if loaded is None:
        return
    model, cfg = loaded
    if args.command == "params":
        _study(args, "params", param_overhead(model), cfg, checkpoint=args.ckpt)
        return
    kind = score_kind_for(cfg.task)
    examples = _split(cfg, args.split)
    fn = subset_decode_matrix if args.command == "subsets" else robustness_matrix
    _study(args, args.command, fn(model, examples, kind), cfg, checkpoint=args.ckpt, score=kind)


def cmd_multi_study(args) -> None:
    loaded, paths = _load_many(args.ckpts)
    models = [m for m, _, _ in loaded]
    cfg = _resolve_config(args, loaded[0][1])
    if args.dump_config:
        sys.stdout.write(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
        return
    kind = score_kind_for(cfg.task)
    examples = _split(cfg, args.split)
    if args.command == "ensemble":
        if len(models) == 1:
            log.warning("ensemble of a single checkpoint is a plain decode")
        data = ensemble_scores(models, examples, kind)
        data.pop("hypotheses")
    elif args.command == "ratios":
        data = preference_ratios(models, examples, kind)
    else:
        data = variance_report(models, examples, kind)
    _study(args, args.command, data, cfg, checkpoints=paths, score=kind)


HANDLERS = {
    "train": cmd_train,
    "gen-data": cmd_gen_data,
    "eval": cmd_eval,
    "subsets": cmd_single_study,
    "robustness": cmd_single_study,
    "params": cmd_single_study,
    "ratios": cmd_multi_study,
    "variance": cmd_multi_study,
    "ensemble": cmd_multi_study,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"iotlab {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ConfigError, CheckpointError, NonFiniteError, ValueError, KeyError) as exc:
        print(f"iotlab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def entry() -> None:
    sys.exit(main())
