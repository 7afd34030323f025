"""Command line entry point: ``fscil run | compare | gen-data``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import datagen
from .datagen import SyntheticSpec
from .errors import FSCILError
from .harness import ExperimentConfig, compare, run


def _cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.seed_override is not None:
        cfg.seeds = [args.seed_override]
        cfg.validate()
    out = Path(args.out or cfg.output_dir)
    reports = run(cfg, out)
    for rep in reports:
        for mode, m in rep["modes"].items():
            print(f"seed {rep['seed']:>3} {mode:<16} avg_acc {m['avg_acc']:.4f} "
                  f"last {m['sessions'][-1]['acc']:.4f} base_drop {m['base_drop']:.4f}")
    print(f"wrote {len(reports)} report(s) and results.csv to {out}")
    return 0


def _cmd_compare(args) -> int:
    print(compare(args.reports).render())
    return 0


def _cmd_gen_data(args) -> int:
    raw = json.loads(Path(args.spec).read_text()) if args.spec else {}
    try:
        spec = SyntheticSpec(**raw)
    except TypeError as exc:
        raise SystemExit(f"error: bad spec: {exc}")
    bench = datagen.generate(spec)
    datagen.save(bench, args.out)
    print(f"wrote {bench.n_classes} classes, {datagen.file_size(bench)} bytes to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fscil", description="Few-shot class-incremental learning lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed-override", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("compare", help="order runs from report files")
    p.add_argument("reports", nargs="+")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("gen-data", help="write a synthetic benchmark file")
    p.add_argument("--spec", default=None, help="JSON file with SyntheticSpec fields")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FSCILError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
