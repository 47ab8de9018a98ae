"""Command-line experiment harness.

Subcommands cover each pipeline stage: ``generate``, ``train-experts``,
``train-gate``, ``evaluate``, ``stratify`` and the multi-seed ``benchmark``.
All state comes from the JSON config plus flags; on failure the process
exits nonzero after printing one machine-readable ``error: {...}`` line to
stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .config import METHODS, load_config
from .errors import EvigateError


def _add_common(p: argparse.ArgumentParser, seeds: bool = False) -> None:
    p.add_argument("--config", required=True, help="path to the JSON config")
    p.add_argument("--out", default=None,
                   help="output directory (default: config output_dir)")
    if seeds:
        p.add_argument("--seeds", required=True,
                       help="comma-separated seed list, e.g. 0,1,2,3,4")
    else:
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evigate",
        description="Multi-expert evidential classification benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesise the four dataset splits")
    _add_common(p)

    p = sub.add_parser("train-experts",
                       help="train evidential experts and softmax baselines")
    _add_common(p)
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel training processes")

    p = sub.add_parser("train-gate", help="train the fusion gate")
    _add_common(p)

    p = sub.add_parser("evaluate", help="score methods on test/unseen splits")
    _add_common(p)
    p.add_argument("--methods", default=None,
                   help=f"comma-separated subset of {','.join(METHODS)}")

    p = sub.add_parser("stratify",
                       help="confident/uncertain stratification table")
    _add_common(p)
    p.add_argument("--methods", default="edl,naive,gated",
                   help="comma-separated methods to stratify")

    p = sub.add_parser("benchmark", help="full multi-seed pipeline + summary")
    _add_common(p, seeds=True)
    p.add_argument("--methods", default=None,
                   help="comma-separated subset of methods")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel seed processes")
    return parser


def _parse_methods(text: str | None) -> list[str] | None:
    if text is None:
        return None
    return [m.strip() for m in text.split(",") if m.strip()]


def _load(args) -> tuple:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    outdir = Path(args.out if args.out else cfg.output_dir)
    return cfg, outdir


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            cfg, outdir = _load(args)
            dataset = pipeline.stage_generate(cfg, outdir)
            counts = {s: len(b) for s, b in dataset.items()}
            print(f"generated {counts} -> {outdir}")
        elif args.command == "train-experts":
            cfg, outdir = _load(args)
            pipeline.stage_train_experts(cfg, outdir, jobs=args.jobs)
            n = len(cfg.experts) + cfg.baselines.ensemble_size
            print(f"trained {len(cfg.experts)} experts + "
                  f"{cfg.baselines.ensemble_size} baselines "
                  f"({n} checkpoints) -> {outdir}")
        elif args.command == "train-gate":
            cfg, outdir = _load(args)
            pipeline.stage_train_gate(cfg, outdir)
            print(f"trained gate -> {pipeline.gate_path(outdir)}")
        elif args.command == "evaluate":
            cfg, outdir = _load(args)
            rows = pipeline.stage_evaluate(cfg, outdir,
                                           _parse_methods(args.methods))
            print(f"wrote {len(rows)} result rows -> {outdir / 'results.csv'}")
        elif args.command == "stratify":
            cfg, outdir = _load(args)
            rows = pipeline.stage_stratify(cfg, outdir,
                                           _parse_methods(args.methods))
            print(f"wrote {len(rows)} stratification rows -> "
                  f"{outdir / 'stratification.csv'}")
        elif args.command == "benchmark":
            cfg, outdir = _load(args)
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            rows = pipeline.stage_benchmark(cfg, seeds, outdir,
                                            _parse_methods(args.methods),
                                            jobs=args.jobs)
            print(f"benchmark over seeds {seeds}: {len(rows)} rows -> "
                  f"{outdir / 'benchmark_results.csv'}")
        else:  # pragma: no cover
            raise EvigateError(f"unknown command {args.command!r}")
    except EvigateError as exc:
        print("error: " + json.dumps({
            "command": args.command,
            "type": type(exc).__name__,
            "message": str(exc),
        }), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
