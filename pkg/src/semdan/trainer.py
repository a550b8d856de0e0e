"""Adversarial training loop shared by every conditioning strategy.

One iteration runs G then F on both domains, refreshes the prototypes
(structure-aware strategy only), builds the conditioned discriminator
inputs and then updates

    G with grad[L_y - lambda * L_adv],  F with grad[L_y],  D with grad[L_adv].

The production path realises this with a single backward pass through a
gradient-reversal node; ``via_grl=False`` performs the three updates
explicitly and exists as a test oracle.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import DomainError, Tensor
from .conditioning import (ConditioningStrategy, PrototypeBank, batch_prototypes, condition_input, ema_update,
                           entropy, entropy_weight)
from .datagen import Dataset
from .losses import LambdaSchedule, adv_loss, ce_loss, lambda_at
from .nn import ConfigError, Mlp, SgdMomentum, init_network, inverse_decay, set_parameters

log = logging.getLogger(__name__)

METRICS_SCHEMA_VERSION = 1


class NumericalError(RuntimeError):
    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass
class TrainConfig:
    strategy: ConditioningStrategy = field(default_factory=ConditioningStrategy)
    iterations: int = 1000
    batch_size: int = 36
    lr_g: float = 0.01
    lr_f: float = 0.01
    lr_d: float = 0.01
    momentum: float = 0.9
    lr_decay: bool = False
    schedule: LambdaSchedule = field(default_factory=LambdaSchedule)
    lambda_ema: float = 0.5
    seed: int = 0
    eval_every: int = 50
    g_hidden: tuple[int, ...] = (32,)
    feature_dim: int = 32
    d_hidden_mult: int = 4
    bank_init: str = "first_touch"
    renormalize_projection: bool = False

    def __post_init__(self):
        if isinstance(self.strategy, dict):
            self.strategy = ConditioningStrategy(**self.strategy)
        if isinstance(self.schedule, dict):
            self.schedule = LambdaSchedule(**self.schedule)
        self.g_hidden = tuple(int(h) for h in self.g_hidden)
        for name in ("iterations", "batch_size", "eval_every", "feature_dim", "d_hidden_mult"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lr_g", "lr_f", "lr_d"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0 <= self.lambda_ema <= 1:
            raise ConfigError("lambda_ema must lie in [0, 1]")
        if self.bank_init not in ("first_touch", "random"):
            raise ConfigError(f"unknown bank_init {self.bank_init!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["g_hidden"] = list(self.g_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


@dataclass
class TrainState:
    G: Mlp
    F: Mlp
    D: Mlp
    opt: SgdMomentum
    bank: PrototypeBank | None
    rng: np.random.Generator
    iteration: int = 0
    best: dict | None = None            # entropy-selected snapshot so far
    last_widths: tuple[int, int] | None = None


def init_state(config: TrainConfig, in_dim: int, c: int) -> TrainState:
    """Networks, optimizer and bank, each seeded from its own child stream."""
    seq = np.random.SeedSequence(config.seed)
    g_seq, f_seq, d_seq, bank_seq, batch_seq = seq.spawn(5)
    d = config.feature_dim
    G = init_network([in_dim, *config.g_hidden, d], np.random.default_rng(g_seq))
    F = init_network([d, c], np.random.default_rng(f_seq), head="softmax")
    m = config.strategy.input_width(d, c)
    D = init_network([m, config.d_hidden_mult * m, 1], np.random.default_rng(d_seq), head="sigmoid")
    bank = None
    if config.strategy.kind == "ssdan":
        if config.bank_init == "random":
            bank = PrototypeBank.random(c, d, config.lambda_ema, np.random.default_rng(bank_seq))
        else:
            bank = PrototypeBank.empty(c, d, config.lambda_ema)
    opt = SgdMomentum({"g": config.lr_g, "f": config.lr_f, "d": config.lr_d}, config.momentum)
    return TrainState(G, F, D, opt, bank, np.random.default_rng(batch_seq))


def sample_batches(state: TrainState, source: Dataset, target: Dataset, b: int):
    """Uniform sampling with replacement, source first then target."""
    i_s = state.rng.integers(0, len(source), size=b)
    i_t = state.rng.integers(0, len(target), size=b)
    return source.features[i_s], source.labels[i_s], target.features[i_t]


@dataclass
class StepOutput:
    L_y: float
    L_adv: float
    lambda_adv: float
    norm_f: float
    norm_branch: float | None
    norm_ratio: float | None


def _forward_losses(state: TrainState, config: TrainConfig, xs, ys, xt, lam: float, use_grl: bool):
    G, F, D = state.G, state.F, state.D
    f_s, f_t = G(Tensor(xs)), G(Tensor(xt))
    p_s, p_t = F(f_s), F(f_t)
    strategy = config.strategy
    if state.bank is not None:
        M_batch, present = batch_prototypes(ad.detach(f_s), ys, state.bank.num_classes)
        ema_update(state.bank, M_batch, present)
    L_y = ce_loss(p_s, ys)
    adv_s = ad.grad_reverse(f_s, lam) if use_grl else f_s
    adv_t = ad.grad_reverse(f_t, lam) if use_grl else f_t
    renorm = config.renormalize_projection
    cs = condition_input(strategy, f_s, p_s, state.bank, f_adv=adv_s, renormalize=renorm)
    ct = condition_input(strategy, f_t, p_t, state.bank, f_adv=adv_t, renormalize=renorm)
    state.last_widths = (cs.tensor.shape[1], ct.tensor.shape[1])
    d_s, d_t = D(cs.tensor), D(ct.tensor)
    ws = wt = None
    if strategy.entropy_weighting:
        ws, wt = entropy_weight(p_s), entropy_weight(p_t)
    L_adv = adv_loss(d_s, d_t, ws, wt)
    return L_y, L_adv, (cs, ct)


def _norm_stats(cs, ct) -> tuple[float, float | None, float | None]:
    fn = np.concatenate([cs.feature_norm, ct.feature_norm])
    if cs.branch_norm is None:
        return float(fn.mean()), None, None
    bn = np.concatenate([cs.branch_norm, ct.branch_norm])
    ok = bn > 0
    ratio = float(np.mean(fn[ok] / bn[ok])) if ok.any() else None
    return float(fn.mean()), float(bn.mean()), ratio


def total_objective(state: TrainState, config: TrainConfig, L_y: Tensor, L_adv: Tensor, lam: float,
                    via_grl: bool, lrs: dict[str, float]) -> None:
    """Apply one parameter update for the minimax objective.

    With ``via_grl`` the graph must already contain gradient reversal with
    coefficient ``lam`` between the features and the discriminator; a single
    backward of ``L_y + L_adv`` then yields every group's gradient.
    """
    nets = {"g": state.G, "f": state.F, "d": state.D}
    for net in nets.values():
        net.zero_grad()
    if via_grl:
        ad.backward(ad.add(L_y, L_adv))
        grads = {k: _grads_or_zero(net) for k, net in nets.items()}
    else:
        ad.backward(L_y)
        gy = {k: _grads_or_zero(net) for k, net in nets.items()}
        for net in nets.values():
            net.zero_grad()
        ad.backward(L_adv)
        ga = {k: _grads_or_zero(net) for k, net in nets.items()}
        grads = {
            "g": [a - lam * b for a, b in zip(gy["g"], ga["g"])],
            "f": gy["f"],
            "d": ga["d"],
        }
    for k, net in nets.items():
        state.opt.step(k, net, grads[k], lr=lrs[k])


def _grads_or_zero(net: Mlp) -> list[np.ndarray]:
    return [p.grad if p.grad is not None else np.zeros(p.shape) for p in net.parameters()]


def _snapshot(state: TrainState, ly, la, lam: float) -> dict:
    def clean(x):
        return x if x is None or math.isfinite(x) else repr(x)
    return {"iteration": state.iteration, "L_y": clean(ly), "L_adv": clean(la), "lambda_adv": lam,
            "params": {k: [p.values.tolist() for p in net.parameters()]
                       for k, net in (("g", state.G), ("f", state.F), ("d", state.D))}}


def train_iteration(state: TrainState, batches, config: TrainConfig, via_grl: bool = True) -> StepOutput:
    xs, ys, xt = batches
    progress = state.iteration / config.iterations
    lam = lambda_at(config.schedule, progress)
    try:
        L_y, L_adv, (cs, ct) = _forward_losses(state, config, xs, ys, xt, lam, use_grl=via_grl)
    except DomainError as exc:
        # non-finite activations are caught by the primitives before a loss exists
        raise NumericalError(f"non-finite forward pass at iteration {state.iteration}: {exc}",
                             _snapshot(state, None, None, lam)) from exc
    ly, la = L_y.item(), L_adv.item()
    if not (math.isfinite(ly) and math.isfinite(la)):
        raise NumericalError(f"non-finite loss at iteration {state.iteration}: L_y={ly}, L_adv={la}",
                             _snapshot(state, ly, la, lam))
    lrs = {"g": config.lr_g, "f": config.lr_f, "d": config.lr_d}
    if config.lr_decay:
        lrs = {k: inverse_decay(v, progress) for k, v in lrs.items()}
    total_objective(state, config, L_y, L_adv, lam, via_grl, lrs)
    state.iteration += 1
    nf, nb, ratio = _norm_stats(cs, ct)
    return StepOutput(ly, la, lam, nf, nb, ratio)


# ---------------------------------------------------------------- evaluation

def predict_proba(G: Mlp, F: Mlp, x: np.ndarray) -> np.ndarray:
    return F(G(Tensor(x))).values


@dataclass
class EvalResult:
    accuracy: float
    per_class_accuracy: float
    mean_entropy: float
    class_recalls: list[float]


def evaluate_predictions(p: np.ndarray, labels: np.ndarray, c: int | None = None) -> EvalResult:
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    c = p.shape[1] if c is None else c
    pred = np.argmax(p, axis=1)
    correct = pred == labels
    recalls = [float(correct[labels == e].mean()) for e in range(c) if np.any(labels == e)]
    return EvalResult(float(correct.mean()), float(np.mean(recalls)), float(entropy(p).mean()), recalls)


def evaluate(model: tuple[Mlp, Mlp], dataset: Dataset) -> EvalResult:
    G, F = model
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return evaluate_predictions(predict_proba(G, F, dataset.features), dataset.eval_labels(), F.out_dim)


def domain_accuracy(state: TrainState, config: TrainConfig, source: Dataset, target: Dataset) -> float:
    """Fraction of samples whose domain the discriminator gets right (source -> D > 0.5)."""
    outs = []
    for ds in (source, target):
        f = state.G(Tensor(ds.features))
        p = state.F(f)
        cond = condition_input(config.strategy, f, p, state.bank, renormalize=config.renormalize_projection)
        outs.append(state.D(cond.tensor).values[:, 0])
    return float((np.sum(outs[0] > 0.5) + np.sum(outs[1] <= 0.5)) / (len(outs[0]) + len(outs[1])))


def select_model(history: list[tuple[Any, float]]) -> Any:
    """Checkpoint with the lowest mean target entropy; ties go to the later entry."""
    if not history:
        raise ValueError("model selection needs a nonempty history")
    best_i = 0
    for i, (_, h) in enumerate(history):
        if h <= history[best_i][1]:
            best_i = i
    return history[best_i][0]


# ---------------------------------------------------------------- state I/O

def _net_arrays(prefix: str, net: Mlp) -> dict[str, np.ndarray]:
    return {f"{prefix}.{i}": p.values for i, p in enumerate(net.parameters())}


def save_state(path: str | Path, state: TrainState, config: TrainConfig, c: int, in_dim: int) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, net in (("G", state.G), ("F", state.F), ("D", state.D)):
        arrays.update(_net_arrays(name, net))
    for group, vel in sorted(state.opt.velocity.items()):
        for i, v in enumerate(vel):
            arrays[f"vel.{group}.{i}"] = v
    if state.bank is not None:
        arrays["bank.M"] = state.bank.M
        arrays["bank.initialized"] = state.bank.initialized.astype(np.float64)
    best_meta = None
    if state.best is not None:
        for name in ("G", "F"):
            for i, a in enumerate(state.best[name]):
                arrays[f"best.{name}.{i}"] = a
        best_meta = {"iteration": state.best["iteration"], "mean_entropy": state.best["mean_entropy"]}
    meta = {
        "config": config.to_dict(),
        "c": c,
        "in_dim": in_dim,
        "iteration": state.iteration,
        "rng": state.rng.bit_generator.state,
        "layer_sizes": {"G": state.G.sizes, "F": state.F.sizes, "D": state.D.sizes},
        "velocity_groups": sorted(state.opt.velocity),
        "best": best_meta,
    }
    ckpt.save(path, arrays, meta)


def load_state(path: str | Path) -> tuple[TrainState, TrainConfig, dict]:
    arrays, meta = ckpt.load(path)
    config = TrainConfig.from_dict(meta["config"])
    state = init_state(config, meta["in_dim"], meta["c"])
    for name, net in (("G", state.G), ("F", state.F), ("D", state.D)):
        if net.sizes != meta["layer_sizes"][name]:
            raise ckpt.CheckpointError(f"checkpoint {name} sizes {meta['layer_sizes'][name]} "
                                       f"do not match config-derived {net.sizes}")
        set_parameters(net, [arrays[f"{name}.{i}"] for i in range(2 * len(net.layers))])
    for group in meta["velocity_groups"]:
        n = len({"g": state.G, "f": state.F, "d": state.D}[group].parameters())
        state.opt.velocity[group] = [arrays[f"vel.{group}.{i}"].copy() for i in range(n)]
    if state.bank is not None:
        state.bank.M = arrays["bank.M"].copy()
        state.bank.initialized = arrays["bank.initialized"].astype(bool)
    state.rng.bit_generator.state = meta["rng"]
    state.iteration = meta["iteration"]
    if meta["best"] is not None:
        state.best = dict(meta["best"])
        for name, net in (("G", state.G), ("F", state.F)):
            state.best[name] = [arrays[f"best.{name}.{i}"] for i in range(2 * len(net.layers))]
    return state, config, meta


def load_model(path: str | Path, which: str = "selected") -> tuple[Mlp, Mlp, TrainConfig]:
    """(G, F) from a checkpoint: the entropy-selected snapshot, or the current weights."""
    state, config, _ = load_state(path)
    if which == "selected" and state.best is not None:
        set_parameters(state.G, state.best["G"])
        set_parameters(state.F, state.best["F"])
    return state.G, state.F, config


# ---------------------------------------------------------------- full run

@dataclass
class RunResult:
    records: list[dict]
    selected_iteration: int
    summary: dict
    state: TrainState


def make_record(state: TrainState, config: TrainConfig, step: StepOutput, source: Dataset,
                target: Dataset) -> dict:
    model = (state.G, state.F)
    ev_s = evaluate(model, source)
    if target.has_labels:
        ev_t = evaluate(model, target)
        t_acc, t_pc, t_rec, t_ent = ev_t.accuracy, ev_t.per_class_accuracy, ev_t.class_recalls, ev_t.mean_entropy
    else:
        t_acc = t_pc = t_rec = None
        t_ent = float(entropy(predict_proba(state.G, state.F, target.features)).mean())
    return {
        "schema_version": METRICS_SCHEMA_VERSION,
        "iteration": state.iteration,
        "L_y": step.L_y,
        "L_adv": step.L_adv,
        "lambda_adv": step.lambda_adv,
        "target_acc": t_acc,
        "target_per_class_acc": t_pc,
        "target_class_recalls": t_rec,
        "source_acc": ev_s.accuracy,
        "domain_acc": domain_accuracy(state, config, source, target),
        "target_entropy": t_ent,
        "norm_f": step.norm_f,
        "norm_branch": step.norm_branch,
        "norm_ratio": step.norm_ratio,
        "prototypes": state.bank.M.tolist() if state.bank is not None else None,
    }


def run(config: TrainConfig, source: Dataset, target: Dataset, out_dir: str | Path | None = None,
        resume_from: str | Path | None = None, stop_at: int | None = None,
        keep_all_checkpoints: bool = False, num_classes: int | None = None) -> RunResult:
    """Train for ``config.iterations`` steps, evaluating every ``eval_every``.

    With ``out_dir``, metrics go to ``metrics.jsonl`` (appended when
    resuming), ``checkpoints/latest.ckpt`` is refreshed at every evaluation
    (plus ``iter_XXXXXX.ckpt`` files when ``keep_all_checkpoints``), and
    ``final.ckpt``/``summary.json`` are written at the end.  ``stop_at``
    halts early, leaving a resumable checkpoint.
    """
    c = num_classes or max(int(source.labels.max()) + 1, _class_count(target))
    in_dim = source.features.shape[1]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        state, saved, meta = load_state(resume_from)
        c = meta["c"]
        if saved.to_dict() != config.to_dict():
            raise ConfigError("resume checkpoint was written with a different config")
    else:
        state = init_state(config, in_dim, c)
        if out is not None:
            (out / "metrics.jsonl").write_text("")
    records: list[dict] = []
    last = config.iterations if stop_at is None else min(stop_at, config.iterations)
    while state.iteration < last:
        step = train_iteration(state, sample_batches(state, source, target, config.batch_size), config)
        if state.iteration % config.eval_every == 0 or state.iteration == config.iterations:
            rec = make_record(state, config, step, source, target)
            records.append(rec)
            snap = {"iteration": state.iteration, "mean_entropy": rec["target_entropy"],
                    "G": [p.values for p in state.G.parameters()],
                    "F": [p.values for p in state.F.parameters()]}
            state.best = snap if state.best is None else select_model(
                [(state.best, state.best["mean_entropy"]), (snap, snap["mean_entropy"])])
            if out is not None:
                with (out / "metrics.jsonl").open("a") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                save_state(out / "checkpoints" / "latest.ckpt", state, config, c, in_dim)
                if keep_all_checkpoints:
                    save_state(out / "checkpoints" / f"iter_{state.iteration:06d}.ckpt", state, config, c, in_dim)
    summary: dict = {}
    if state.best is not None and state.iteration >= config.iterations:
        G, F = _clone_nets(state)
        set_parameters(G, state.best["G"])
        set_parameters(F, state.best["F"])
        ev_s = evaluate((G, F), source)
        ev = evaluate((G, F), target) if target.has_labels else None
        summary = {
            "strategy": config.strategy.kind,
            "k": config.strategy.k,
            "entropy_weighting": config.strategy.entropy_weighting,
            "lambda_ema": config.lambda_ema,
            "lambda_max": config.schedule.lambda_max,
            "seed": config.seed,
            "selected_iteration": state.best["iteration"],
            "target_acc": ev.accuracy if ev else None,
            "per_class_acc": ev.per_class_accuracy if ev else None,
            "target_entropy": state.best["mean_entropy"],
            "source_acc": ev_s.accuracy,
            "final_iteration": state.iteration,
        }
        if out is not None:
            save_state(out / "final.ckpt", state, config, c, in_dim)
            (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunResult(records, state.best["iteration"] if state.best else 0, summary, state)


def _class_count(ds: Dataset) -> int:
    y = ds.eval_labels()
    return int(y.max()) + 1 if len(y) and y.max() >= 0 else 0


def _clone_nets(state: TrainState) -> tuple[Mlp, Mlp]:
    G = Mlp([replace(l) for l in state.G.layers], state.G.head)
    F = Mlp([replace(l) for l in state.F.layers], state.F.head)
    return G, F
