"""Config-driven experiment fan-out: training grids, k sweeps, norm traces, feature export."""

from __future__ import annotations

import csv
import json
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datagen
from .autodiff import Tensor
from .conditioning import ConditioningStrategy
from .datagen import Dataset, DomainShiftSpec
from .losses import LambdaSchedule
from .nn import ConfigError
from .trainer import NumericalError, TrainConfig, evaluate, load_model, load_state, predict_proba, run

OUTPUT_ROOT_ENV = "SEMDAN_OUTPUT_ROOT"
DEFAULT_K_GRID = (1, 2, 3, 4, 8, 16, 64, 256)

_STRATEGY_RE = re.compile(r"^(?P<kind>[a-z_]+)(?::(?P<k>[0-9.eE+-]+?))?(?P<ent>\+E)?$")


@dataclass(frozen=True)
class StrategyChoice:
    """A named entry of a strategy list; ``source_only`` is dann with the ramp pinned to zero."""

    name: str
    strategy: ConditioningStrategy
    source_only: bool = False

    @property
    def dirname(self) -> str:
        if self.source_only:
            return "source_only"
        s = self.strategy
        out = s.kind
        if s.kind in ("sdan", "ssdan"):
            out += f"-k{s.k:g}"
        if s.entropy_weighting:
            out += "-E"
        return out

    def apply(self, train: TrainConfig, seed: int) -> TrainConfig:
        d = train.to_dict()
        d["strategy"] = self.strategy.to_dict()
        d["seed"] = seed
        if self.source_only:
            d["schedule"] = LambdaSchedule("constant", 0.0).to_dict()
        return TrainConfig.from_dict(d)


def parse_strategy(text: str) -> StrategyChoice:
    """Parse ``kind[:k][+E]`` (e.g. ``sdan:3``, ``ssdan:3+E``) or ``source_only``."""
    text = text.strip()
    if text in ("source_only", "source-only"):
        return StrategyChoice("source_only", ConditioningStrategy("dann"), source_only=True)
    m = _STRATEGY_RE.match(text)
    if not m:
        raise ConfigError(f"cannot parse strategy {text!r}")
    try:
        k = float(m["k"]) if m["k"] else 1.0
        strat = ConditioningStrategy(m["kind"], k, bool(m["ent"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return StrategyChoice(text, strat)


@dataclass
class RunConfig:
    task: dict
    train: dict = field(default_factory=dict)
    strategies: list[str] = field(default_factory=lambda: ["sdan"])
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str | None = None
    keep_all_checkpoints: bool = False

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        unknown = set(raw) - {"task", "train", "strategies", "seeds", "output_dir", "keep_all_checkpoints"}
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        cfg = cls(**raw)
        task = dict(cfg.task)
        for key in ("source_csv", "target_csv"):
            if key in task and not Path(task[key]).is_absolute():
                task[key] = str((path.parent / task[key]).resolve())
        cfg.task = task
        return cfg

    def to_dict(self) -> dict:
        return {"task": self.task, "train": self.train, "strategies": list(self.strategies),
                "seeds": list(self.seeds), "output_dir": self.output_dir,
                "keep_all_checkpoints": self.keep_all_checkpoints}

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig.from_dict(self.train)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from None

    def resolve_output(self, override: str | None = None) -> Path:
        out = override or self.output_dir or os.environ.get(OUTPUT_ROOT_ENV) or "runs"
        return Path(out)


def task_spec(task: dict) -> DomainShiftSpec | None:
    if "preset" in task:
        try:
            preset = datagen.PRESETS[task["preset"]]
        except KeyError:
            raise ConfigError(f"unknown preset {task['preset']!r}; known: {sorted(datagen.PRESETS)}") from None
        try:
            return preset(**task.get("overrides", {}))
        except TypeError as exc:
            raise ConfigError(f"bad preset override: {exc}") from None
    if "spec" in task:
        try:
            return DomainShiftSpec.from_dict(task["spec"])
        except TypeError as exc:
            raise ConfigError(f"bad task spec: {exc}") from None
    return None


def load_task(task: dict) -> tuple[Dataset, Dataset]:
    spec = task_spec(task)
    if spec is not None:
        return datagen.generate(spec)
    if "source_csv" in task and "target_csv" in task:
        for key in ("source_csv", "target_csv"):
            if not Path(task[key]).exists():
                raise ConfigError(f"{key} not found: {task[key]}")
        return datagen.load_csv(task["source_csv"], "source"), datagen.load_csv(task["target_csv"], "target")
    raise ConfigError("task needs one of: preset, spec, or source_csv + target_csv")


# ------------------------------------------------------------------ runs

def _run_job(job: tuple[dict, dict, str, bool]) -> dict:
    task, train, run_dir, keep_all = job
    config = TrainConfig.from_dict(train)
    source, target = load_task(task)
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"task": task, "train": train}, indent=2, sort_keys=True) + "\n")
    try:
        result = run(config, source, target, out_dir=out, keep_all_checkpoints=keep_all)
    except NumericalError as exc:
        (out / "nan_dump.json").write_text(json.dumps(exc.snapshot, sort_keys=True) + "\n")
        raise
    return result.summary


def run_grid(cfg: RunConfig, out_root: Path, strategies: list[str] | None = None,
             seeds: list[int] | None = None, jobs: int = 1, subdir: str = "") -> list[Path]:
    """Train every (strategy, seed) pair into its own directory; returns the run dirs."""
    base = cfg.train_config()
    choices = [parse_strategy(s) for s in (strategies or cfg.strategies)]
    seeds = list(cfg.seeds if seeds is None else seeds)
    load_task(cfg.task)  # fail fast on a bad task before fanning out
    job_list, dirs = [], []
    for choice in choices:
        for seed in seeds:
            run_dir = out_root / subdir / f"{choice.dirname}_seed{seed}"
            dirs.append(run_dir)
            job_list.append((cfg.task, choice.apply(base, seed).to_dict(), str(run_dir), cfg.keep_all_checkpoints))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_run_job, job_list))
    else:
        for job in job_list:
            _run_job(job)
    return dirs


def _label(summary: dict) -> str:
    if summary.get("lambda_max", 1.0) == 0.0 and summary["strategy"] == "dann":
        return "source_only"
    s = summary["strategy"]
    if s in ("sdan", "ssdan"):
        s += f":{summary['k']:g}"
    if summary.get("entropy_weighting"):
        s += "+E"
    return s


def aggregate(run_dirs: list[Path]) -> list[dict]:
    """Mean and (population) std of target accuracy per strategy, from summary.json files only."""
    groups: dict[str, list[dict]] = {}
    for d in run_dirs:
        summary = json.loads((Path(d) / "summary.json").read_text())
        groups.setdefault(_label(summary), []).append(summary)
    rows = []
    for label, items in groups.items():
        acc = np.array([s["target_acc"] for s in items])
        pca = np.array([s["per_class_acc"] for s in items])
        rows.append({
            "strategy": label,
            "k": items[0]["k"],
            "lambda_ema": items[0]["lambda_ema"],
            "n_seeds": len(items),
            "target_acc_mean": float(acc.mean()),
            "target_acc_std": float(acc.std()),
            "per_class_acc_mean": float(pca.mean()),
            "per_class_acc_std": float(pca.std()),
            "target_acc": f"{100 * acc.mean():.1f} ± {100 * acc.std():.1f}",
        })
    return rows


def write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


AGGREGATE_COLUMNS = ["strategy", "k", "lambda_ema", "n_seeds", "target_acc_mean", "target_acc_std",
                     "per_class_acc_mean", "per_class_acc_std", "target_acc"]
SWEEP_COLUMNS = ["row", "label", "k", "mean_acc", "std_acc", "n_seeds"]


def sweep_k(cfg: RunConfig, out_root: Path, ks=DEFAULT_K_GRID, seeds: list[int] | None = None,
            kind: str = "sdan", jobs: int = 1) -> list[dict]:
    """Accuracy versus k for one strategy kind, with source-only and dann reference rows first."""
    if any(not k > 0 for k in ks):
        raise ConfigError(f"k values must be positive, got {list(ks)}")
    if kind not in ("sdan", "ssdan"):
        raise ConfigError(f"k sweeps apply to sdan or ssdan, got {kind!r}")
    names = ["source_only", "dann"] + [f"{kind}:{k:g}" for k in ks]
    dirs = run_grid(cfg, out_root, names, seeds, jobs=jobs, subdir="sweep_k")
    n = len(dirs) // len(names)
    rows = []
    for i, name in enumerate(names):
        accs = np.array([json.loads((d / "summary.json").read_text())["target_acc"] for d in dirs[i * n:(i + 1) * n]])
        is_ref = i < 2
        rows.append({
            "row": "reference" if is_ref else "k",
            "label": name,
            "k": "" if is_ref else float(ks[i - 2]),
            "mean_acc": float(accs.mean()),
            "std_acc": float(accs.std()),
            "n_seeds": len(accs),
        })
    write_csv(out_root / "sweep_k.csv", rows, SWEEP_COLUMNS)
    return rows


def best_k(rows: list[dict]) -> float:
    """k with the highest mean accuracy (smallest k on ties)."""
    krows = [r for r in rows if r["row"] == "k"]
    best = max(krows, key=lambda r: (r["mean_acc"], -r["k"]))
    return best["k"]


# ------------------------------------------------------------------ diagnostics

def read_metrics(run_dir: Path) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    if not path.exists():
        raise ConfigError(f"no metrics stream at {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def trace_norms(run_dir: Path, out: Path | None = None) -> Path:
    records = read_metrics(run_dir)
    if not records or any(r.get("norm_branch") is None for r in records):
        raise ConfigError(f"{run_dir}: run has no prediction-branch norm diagnostics "
                          "(strategy does not condition on predictions)")
    out = out or Path(run_dir) / "norms.csv"
    rows = [{"iteration": r["iteration"], "mean_norm_f": r["norm_f"], "mean_norm_branch": r["norm_branch"],
             "ratio": r["norm_ratio"]} for r in records]
    write_csv(out, rows, ["iteration", "mean_norm_f", "mean_norm_branch", "ratio"])
    return out


def export_features(run_dir: Path, checkpoint: Path | None = None, out: Path | None = None) -> Path:
    run_dir = Path(run_dir)
    cfg = json.loads((run_dir / "config.json").read_text())
    checkpoint = Path(checkpoint) if checkpoint else run_dir / "final.ckpt"
    _, ck_config, _ = load_state(checkpoint)
    if ck_config.to_dict() != TrainConfig.from_dict(cfg["train"]).to_dict():
        raise ConfigError(f"checkpoint {checkpoint} was not produced by the config in {run_dir}")
    G, F, _ = load_model(checkpoint)
    source, target = load_task(cfg["task"])
    out = out or run_dir / "features.csv"
    d = G.out_dim
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(d)] + ["label", "domain", "predicted"])
        for ds in (source, target):
            feats = G(Tensor(ds.features)).values
            pred = np.argmax(predict_proba(G, F, ds.features), axis=1)
            for row, y, yhat in zip(feats, ds.eval_labels(), pred):
                w.writerow([repr(float(v)) for v in row] + [int(y), ds.domain, int(yhat)])
    return out


def evaluate_run(run_dir: Path, checkpoint: Path | None = None, data: Path | None = None) -> dict:
    run_dir = Path(run_dir)
    G, F, _ = load_model(Path(checkpoint) if checkpoint else run_dir / "final.ckpt")
    if data is not None:
        datasets = {"data": datagen.load_csv(data, "target")}
    else:
        cfg = json.loads((run_dir / "config.json").read_text())
        source, target = load_task(cfg["task"])
        datasets = {"source": source, "target": target}
    out = {}
    for name, ds in datasets.items():
        if not ds.has_labels:
            raise ConfigError(f"{name}: evaluation needs labels (found -1 entries)")
        ev = evaluate((G, F), ds)
        out[name] = {"accuracy": ev.accuracy, "per_class_accuracy": ev.per_class_accuracy,
                     "mean_entropy": ev.mean_entropy}
    return out
