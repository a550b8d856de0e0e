"""Classification and adversarial losses, and the adversarial-weight ramp."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .conditioning import DataError

LOG_FLOOR = 1e-12


def _safe_log(x: Tensor) -> Tensor:
    return ad.log(ad.clamp_min(x, LOG_FLOOR))


def ce_loss(p: Tensor, y) -> Tensor:
    """Mean of -log p[i, y_i] over the batch."""
    y = np.asarray(y, dtype=np.int64)
    c = p.shape[1]
    bad = np.flatnonzero((y < 0) | (y >= c))
    if bad.size:
        raise DataError(f"label {y[bad[0]]} at index {bad[0]} outside [0, {c})")
    return ad.neg(ad.mean_all(_safe_log(ad.gather_rows(p, y))))


def _normalized(w: Tensor | np.ndarray | None, n: int) -> Tensor | None:
    if w is None:
        return None
    w = np.asarray(w.values if isinstance(w, Tensor) else w, dtype=np.float64).reshape(n, 1)
    return Tensor(w / w.mean())


def adv_loss(d_out_s: Tensor, d_out_t: Tensor, weights_s=None, weights_t=None) -> Tensor:
    """-E_s log D - E_t log(1 - D); each expectation is its own (optionally weighted) mean."""
    ls = ad.neg(_safe_log(d_out_s))
    lt = ad.neg(_safe_log(ad.add(ad.neg(d_out_t), Tensor(1.0))))
    ws = _normalized(weights_s, d_out_s.shape[0])
    wt = _normalized(weights_t, d_out_t.shape[0])
    if ws is not None:
        ls = ad.mul(ls, ws)
    if wt is not None:
        lt = ad.mul(lt, wt)
    return ad.add(ad.mean_all(ls), ad.mean_all(lt))


@dataclass(frozen=True)
class LambdaSchedule:
    kind: str = "dann_ramp"
    lambda_max: float = 1.0
    gamma: float = 10.0

    def __post_init__(self):
        if self.kind not in ("constant", "dann_ramp"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.lambda_max < 0:
            raise ValueError("lambda_max must be >= 0")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lambda_max": self.lambda_max, "gamma": self.gamma}


def lambda_at(schedule: LambdaSchedule, progress: float) -> float:
    progress = min(max(progress, 0.0), 1.0)
    if schedule.kind == "constant":
        return schedule.lambda_max
    return schedule.lambda_max * (2.0 / (1.0 + math.exp(-schedule.gamma * progress)) - 1.0)
