"""Discriminator-input construction for every conditioning strategy.

The prediction branch is always detached before it reaches the
discriminator, so the adversarial loss never sends gradient into the
classifier.  Prototypes are stored one row per class, which makes the
structure-aware projection a plain ``p_hat @ M``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

KINDS = ("dann", "concat_fp", "sdan", "ssdan", "multilinear")
NORM_EPS = 1e-12


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ConditioningStrategy:
    kind: str = "sdan"
    k: float = 1.0
    entropy_weighting: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown conditioning kind {self.kind!r}; expected one of {KINDS}")
        if not self.k > 0:
            raise ValueError(f"norm control factor k must be positive, got {self.k}")
        if self.kind == "concat_fp" and self.k != 1.0:
            raise ValueError("concat_fp concatenates raw predictions; k is fixed at 1")

    @property
    def uses_predictions(self) -> bool:
        return self.kind != "dann"

    def input_width(self, d: int, c: int) -> int:
        return {"dann": d, "concat_fp": d + c, "sdan": d + c, "ssdan": 2 * d, "multilinear": d * c}[self.kind]

    @property
    def label(self) -> str:
        s = self.kind
        if self.kind in ("sdan", "ssdan"):
            s += f"(k={self.k:g})"
        if self.entropy_weighting:
            s += "+E"
        return s

    def to_dict(self) -> dict:
        return {"kind": self.kind, "k": self.k, "entropy_weighting": self.entropy_weighting}


@dataclass
class PrototypeBank:
    """Class prototypes, one row per class, updated by EMA and never differentiated."""

    M: np.ndarray
    lambda_ema: float = 0.5
    initialized: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.M = np.array(self.M, dtype=np.float64)
        if self.initialized is None:
            self.initialized = np.zeros(self.M.shape[0], dtype=bool)
        if not 0.0 <= self.lambda_ema <= 1.0:
            raise ValueError(f"lambda_ema must lie in [0, 1], got {self.lambda_ema}")

    @classmethod
    def empty(cls, c: int, d: int, lambda_ema: float = 0.5) -> PrototypeBank:
        return cls(np.zeros((c, d)), lambda_ema)

    @classmethod
    def random(cls, c: int, d: int, lambda_ema: float, rng: np.random.Generator, scale: float = 1.0) -> PrototypeBank:
        """Random start; every row counts as initialized so the first batch is blended in."""
        return cls(rng.normal(0.0, scale, size=(c, d)), lambda_ema, np.ones(c, dtype=bool))

    @property
    def num_classes(self) -> int:
        return self.M.shape[0]

    def snapshot(self) -> np.ndarray:
        return self.M.copy()


def normalize_predictions(f: Tensor, p: Tensor) -> Tensor:
    """Rescale each prediction row to carry its feature row's Euclidean norm."""
    if f.shape[0] != p.shape[0]:
        raise ShapeError(f"feature and prediction batches differ: {f.shape} vs {p.shape}")
    ratio = ad.mul(ad.row_l2_norm(f), ad.reciprocal(ad.clamp_min(ad.row_l2_norm(p), NORM_EPS)))
    return ad.row_scale(p, ratio)


def batch_prototypes(f_s, y_s, c: int) -> tuple[np.ndarray, np.ndarray]:
    feats = f_s.values if isinstance(f_s, Tensor) else np.asarray(f_s, dtype=np.float64)
    y = np.asarray(y_s)
    bad = np.flatnonzero((y < 0) | (y >= c))
    if bad.size:
        raise DataError(f"label {y[bad[0]]} at index {bad[0]} outside [0, {c})")
    counts = np.bincount(y, minlength=c).astype(np.float64)
    sums = np.zeros((c, feats.shape[1]))
    np.add.at(sums, y, feats)
    present = counts > 0
    M_batch = np.zeros_like(sums)
    M_batch[present] = sums[present] / counts[present, None]
    return M_batch, present


def ema_update(bank: PrototypeBank, M_batch: np.ndarray, present: np.ndarray) -> PrototypeBank:
    if M_batch.shape != bank.M.shape:
        raise ShapeError(f"batch prototypes {M_batch.shape} do not match bank {bank.M.shape}")
    present = np.asarray(present, dtype=bool)
    lam = bank.lambda_ema
    for e in np.flatnonzero(present):
        if bank.initialized[e]:
            bank.M[e] = lam * bank.M[e] + (1.0 - lam) * M_batch[e]
        else:
            bank.M[e] = M_batch[e]
            bank.initialized[e] = True
    return bank


def project_structure(p_hat: Tensor, bank: PrototypeBank) -> Tensor:
    if p_hat.shape[1] != bank.num_classes:
        raise ShapeError(f"prediction width {p_hat.shape[1]} does not match {bank.num_classes} prototypes")
    return ad.matmul(p_hat, Tensor(bank.M))


def entropy(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=1)


def entropy_weight(p) -> Tensor:
    pv = p.values if isinstance(p, Tensor) else np.asarray(p)
    return Tensor((1.0 + np.exp(-entropy(pv))).reshape(-1, 1))


@dataclass
class ConditionedInput:
    """Discriminator input plus the per-row norms behind the norm-ratio diagnostic."""

    tensor: Tensor
    feature_norm: np.ndarray
    branch_norm: np.ndarray | None


def condition_input(strategy: ConditioningStrategy, f: Tensor, p: Tensor, bank: PrototypeBank | None = None,
                    f_adv: Tensor | None = None, renormalize: bool = False) -> ConditionedInput:
    """Build the discriminator input for ``strategy``.

    ``f_adv`` is the feature tensor that should carry adversarial gradient
    (normally ``f`` passed through gradient reversal); the prediction branch
    is computed from ``f``/``p`` and detached.
    """
    if f.shape[0] != p.shape[0]:
        raise ShapeError(f"feature and prediction batches differ: {f.shape} vs {p.shape}")
    feat = f if f_adv is None else f_adv
    fnorm = np.sqrt(np.sum(f.values ** 2, axis=1))
    kind = strategy.kind
    if kind == "dann":
        return ConditionedInput(feat, fnorm, None)
    if kind == "concat_fp":
        branch = ad.detach(p)
    elif kind == "multilinear":
        out = ad.outer_rows(feat, ad.detach(p))
        return ConditionedInput(out, fnorm, np.sqrt(np.sum(p.values ** 2, axis=1)))
    else:
        p_hat = normalize_predictions(f, p)
        if kind == "ssdan":
            if bank is None:
                raise ValueError("ssdan conditioning needs a prototype bank")
            used = np.unique(np.argmax(p.values, axis=1))
            missing = [int(e) for e in used if not bank.initialized[e]]
            if missing:
                # width must stay 2d, so uninitialized (zero) rows simply contribute nothing
                warnings.warn(f"prototype rows {missing} not initialized; projecting with zero rows",
                              RuntimeWarning, stacklevel=2)
            p_hat = project_structure(p_hat, bank)
            if renormalize:
                p_hat = normalize_predictions(f, p_hat)
        branch = ad.mul(ad.detach(p_hat), Tensor(strategy.k)) if strategy.k != 1.0 else ad.detach(p_hat)
    bnorm = np.sqrt(np.sum(branch.values ** 2, axis=1))
    return ConditionedInput(ad.concat_cols(feat, branch), fnorm, bnorm)
