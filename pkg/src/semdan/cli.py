"""Command-line entry point.

Exit codes: 0 success, 1 configuration/validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import datagen
from .autodiff import ShapeError
from .checkpoint import CheckpointError
from .conditioning import DataError
from .datagen import ParseError
from .harness import (AGGREGATE_COLUMNS, DEFAULT_K_GRID, RunConfig, aggregate, best_k, evaluate_run,
                      export_features, run_grid, sweep_k, task_spec, trace_norms, write_csv)
from .nn import ConfigError
from .trainer import NumericalError

log = logging.getLogger("semdan")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_overrides(cfg: RunConfig, sets: list[str]) -> None:
    """``--set train.iterations=500`` / ``--set task.overrides.seed=3`` style field overrides."""
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        target = cfg.to_dict()
        node = target
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(raw)
        for name, value in target.items():
            setattr(cfg, name, value)


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig(task={"preset": getattr(args, "preset", None) or "swap3"})
    _apply_overrides(cfg, getattr(args, "set", None))
    if getattr(args, "seeds", None):
        cfg.seeds = [int(s) for s in args.seeds.split(",")]
    if getattr(args, "strategies", None):
        cfg.strategies = [s for s in args.strategies.split(",") if s]
    if getattr(args, "iterations", None):
        cfg.train = {**cfg.train, "iterations": args.iterations}
    return cfg


def cmd_gen_data(args) -> int:
    if args.spec:
        try:
            spec = datagen.DomainShiftSpec.from_dict(json.loads(Path(args.spec).read_text()))
        except TypeError as exc:
            raise ConfigError(f"bad spec: {exc}") from None
    else:
        overrides = {}
        for item in args.set or []:
            key, _, raw = item.partition("=")
            overrides[key] = _parse_value(raw)
        spec = task_spec({"preset": args.preset, "overrides": overrides})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    source, target = datagen.generate(spec)
    datagen.save_csv(source, out / "source.csv")
    datagen.save_csv(target, out / "target.csv")
    (out / "spec.json").write_text(spec.to_json() + "\n")
    print(f"wrote {len(source)} source and {len(target)} target rows to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = cfg.resolve_output(args.out)
    dirs = run_grid(cfg, out, jobs=args.jobs)
    rows = aggregate(dirs)
    write_csv(out / "aggregate.csv", rows, AGGREGATE_COLUMNS)
    for r in rows:
        print(f"{r['strategy']:>16}  {r['target_acc']}  (n={r['n_seeds']})")
    return EXIT_OK


def cmd_eval(args) -> int:
    result = evaluate_run(Path(args.run_dir), args.checkpoint, args.data)
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sweep_k(args) -> int:
    cfg = _load_config(args)
    out = cfg.resolve_output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ks = [float(k) for k in args.k.split(",")] if args.k else list(DEFAULT_K_GRID)
    rows = sweep_k(cfg, out, ks, cfg.seeds, kind=args.kind, jobs=args.jobs)
    for r in rows:
        print(f"{r['label']:>16}  {100 * r['mean_acc']:.1f} ± {100 * r['std_acc']:.1f}")
    print(f"best k: {best_k(rows):g}  ->  {out / 'sweep_k.csv'}")
    return EXIT_OK


def cmd_trace_norms(args) -> int:
    path = trace_norms(Path(args.run_dir), Path(args.out) if args.out else None)
    print(path)
    return EXIT_OK


def cmd_export_features(args) -> int:
    path = export_features(Path(args.run_dir), args.checkpoint, Path(args.out) if args.out else None)
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semdan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write source.csv, target.csv and spec.json")
    p.add_argument("--preset", default="swap3", choices=sorted(datagen.PRESETS))
    p.add_argument("--spec", help="DomainShiftSpec JSON file (overrides --preset)")
    p.add_argument("--set", action="append", metavar="FIELD=VALUE", help="override a spec field")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    def run_args(p, strategies=True):
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--preset", help="task preset when no config is given")
        p.add_argument("--set", action="append", metavar="PATH=VALUE",
                       help="override a config field, e.g. train.iterations=500")
        p.add_argument("--seeds", help="comma-separated seed list")
        if strategies:
            p.add_argument("--strategies", help="comma-separated, e.g. source_only,dann,concat_fp,sdan:3,ssdan:3+E")
        p.add_argument("--iterations", type=int)
        p.add_argument("--out", help="output directory (default: config output_dir, $SEMDAN_OUTPUT_ROOT, ./runs)")
        p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("train", help="train every (strategy, seed) pair and aggregate")
    run_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a run's entropy-selected model")
    p.add_argument("run_dir")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="labeled CSV to evaluate on instead of the run's task")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-k", help="accuracy versus norm control factor k")
    run_args(p, strategies=False)
    p.add_argument("--k", help="comma-separated k grid (default 1,2,3,4,8,16,64,256)")
    p.add_argument("--kind", default="sdan", choices=["sdan", "ssdan"])
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("trace-norms", help="feature / prediction-branch norm trace of a run")
    p.add_argument("run_dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_trace_norms)

    p = sub.add_parser("export-features", help="dump features, labels, domains and predictions")
    p.add_argument("run_dir")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_features)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ParseError, DataError, ShapeError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
