"""Synthetic Gaussian-mixture domain-shift tasks and CSV I/O.

Each class owns ``modes_per_class`` isotropic Gaussian clusters.  The
target domain is drawn from the same clusters after an optional
permutation of cluster positions (``mode_swap``) followed by a similarity
transform: scale, rotate by ``rotation_deg`` about the origin, translate.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .nn import ConfigError


class ParseError(ValueError):
    pass


@dataclass
class DomainShiftSpec:
    c: int
    means: list[list[float]]          # (c * modes_per_class) x in_dim, cluster j belongs to class j // modes_per_class
    stds: list[float]
    modes_per_class: int = 1
    rotation_deg: float = 0.0
    translation: list[float] | None = None
    scale: float = 1.0
    mode_swap: list[int] | None = None  # target cluster j sits where source cluster mode_swap[j] sits
    label_noise: float = 0.0
    n_s: int = 600
    n_t: int = 600
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def n_clusters(self) -> int:
        return self.c * self.modes_per_class

    @property
    def in_dim(self) -> int:
        return len(self.means[0])

    def validate(self) -> None:
        if self.c < 1:
            raise ConfigError(f"class count must be >= 1, got {self.c}")
        if self.modes_per_class < 1:
            raise ConfigError("modes_per_class must be >= 1")
        k = self.n_clusters
        if len(self.means) != k:
            raise ConfigError(f"expected {k} cluster means, got {len(self.means)}")
        if len({len(m) for m in self.means}) != 1:
            raise ConfigError("cluster means have inconsistent dimensions")
        if len(self.stds) != k or any(not s > 0 for s in self.stds):
            raise ConfigError(f"need {k} positive stddevs, got {self.stds}")
        if self.translation is not None and len(self.translation) != self.in_dim:
            raise ConfigError("translation dimension does not match feature dimension")
        if (self.rotation_deg != 0.0) and self.in_dim < 2:
            raise ConfigError("rotation needs at least 2 feature dimensions")
        if self.mode_swap is not None and sorted(self.mode_swap) != list(range(k)):
            raise ConfigError(f"mode_swap {self.mode_swap} is not a permutation of range({k})")
        if not 0.0 <= self.label_noise < 1.0:
            raise ConfigError("label_noise must lie in [0, 1)")
        if not self.scale > 0:
            raise ConfigError("scale must be positive")
        if self.n_s < 1 or self.n_t < 1:
            raise ConfigError("sample counts must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DomainShiftSpec:
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    # generative parameters per domain
    def cluster_params(self, domain: str) -> tuple[np.ndarray, np.ndarray]:
        means = np.asarray(self.means, dtype=np.float64)
        stds = np.asarray(self.stds, dtype=np.float64)
        if domain == "source":
            return means, stds
        if domain != "target":
            raise ValueError(f"domain must be 'source' or 'target', got {domain!r}")
        perm = np.arange(self.n_clusters) if self.mode_swap is None else np.asarray(self.mode_swap)
        return self.transform(means[perm]), stds[perm] * self.scale

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Similarity transform mapping source coordinates into target coordinates."""
        x = np.asarray(x, dtype=np.float64) * self.scale
        if self.rotation_deg:
            th = math.radians(self.rotation_deg)
            rot = np.eye(x.shape[1])
            rot[:2, :2] = [[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]]
            x = x @ rot.T
        if self.translation is not None:
            x = x + np.asarray(self.translation, dtype=np.float64)
        return x


@dataclass
class Dataset:
    features: np.ndarray
    _labels: np.ndarray = field(repr=False)
    domain: str = "source"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self._labels = np.asarray(self._labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self._labels) != len(self.features):
            raise ValueError("features must be n x in_dim with one label per row")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def labels(self) -> np.ndarray:
        """Training labels; only the source domain exposes them."""
        if self.domain != "source":
            raise PermissionError("target labels are for evaluation only; use eval_labels()")
        return self._labels

    def eval_labels(self) -> np.ndarray:
        return self._labels

    @property
    def has_labels(self) -> bool:
        return bool(np.all(self._labels >= 0))


def _sample(spec: DomainShiftSpec, domain: str, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    means, stds = spec.cluster_params(domain)
    m = spec.modes_per_class
    # balanced classes, modes uniform within class
    labels = np.arange(n) % spec.c
    modes = rng.integers(0, m, size=n)
    cluster = labels * m + modes
    x = means[cluster] + stds[cluster, None] * rng.standard_normal((n, spec.in_dim))
    order = rng.permutation(n)
    return x[order], labels[order]


def generate(spec: DomainShiftSpec) -> tuple[Dataset, Dataset]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    xs, ys = _sample(spec, "source", spec.n_s, rng)
    xt, yt = _sample(spec, "target", spec.n_t, rng)
    if spec.label_noise > 0:
        flip = rng.random(spec.n_s) < spec.label_noise
        ys = ys.copy()
        ys[flip] = rng.integers(0, spec.c, size=int(flip.sum()))
    return Dataset(xs, ys, "source"), Dataset(xt, yt, "target")


def class_log_posterior(spec: DomainShiftSpec, x: np.ndarray, domain: str) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    means, stds = spec.cluster_params(domain)
    dim = spec.in_dim
    sq = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    logpdf = -0.5 * sq / stds ** 2 - dim * np.log(stds) - 0.5 * dim * np.log(2 * np.pi)
    per_class = logpdf.reshape(len(x), spec.c, spec.modes_per_class)
    return logsumexp(per_class, axis=2) - np.log(spec.modes_per_class)


def bayes_oracle(spec: DomainShiftSpec, x: np.ndarray, domain: str) -> np.ndarray:
    """Bayes-optimal labels under the true generative model; ties go to the lowest class."""
    return np.argmax(class_log_posterior(spec, x, domain), axis=1)


# ------------------------------------------------------------------ presets

SWAP3_MEANS = [[0.0, 0.0], [3.0, 0.0], [1.5, 2.6]]


def swap3(**overrides) -> DomainShiftSpec:
    """Three classes in 2-D, target rotated 25 degrees and translated.

    Cluster order is kept (identity permutation): with a pair swapped the
    swapped classes cannot be recovered without target labels, see
    ``swap3_trap``.
    """
    params = dict(
        c=3,
        means=[list(m) for m in SWAP3_MEANS],
        stds=[0.5, 0.5, 0.5],
        rotation_deg=25.0,
        translation=[1.5, 0.5],
        mode_swap=None,
        n_s=600,
        n_t=600,
    )
    params.update(overrides)
    return DomainShiftSpec(**params)


def swap3_trap(**overrides) -> DomainShiftSpec:
    """``swap3`` with classes 1 and 2 exchanging target positions."""
    return swap3(**{"mode_swap": [0, 2, 1], **overrides})


PRESETS = {"swap3": swap3, "swap3-trap": swap3_trap}


# ------------------------------------------------------------------ CSV I/O

def save_csv(dataset: Dataset, path: str | Path, include_labels: bool = True) -> None:
    path = Path(path)
    d = dataset.features.shape[1]
    labels = dataset.eval_labels() if include_labels else np.full(len(dataset), -1)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(d)] + ["label"])
        for row, y in zip(dataset.features, labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])


def load_csv(path: str | Path, domain: str = "source") -> Dataset:
    """Parse a CSV whose last column is an integer label (-1 marks unlabeled rows)."""
    path = Path(path)
    rows, labels = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: line 1: empty file, expected a header")
        try:
            [float(h) for h in header]
        except ValueError:
            pass
        else:
            raise ParseError(f"{path}: line 1: missing header (found numeric row)")
        width = len(header)
        if width < 2 or header[-1].strip().lower() != "label":
            raise ParseError(f"{path}: line 1: header must name feature columns followed by 'label'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(f"{path}: line {lineno}: expected {width} cells, got {len(row)}")
            try:
                rows.append([float(v) for v in row[:-1]])
                labels.append(int(row[-1]))
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        return Dataset(np.zeros((0, width - 1)), np.zeros(0, dtype=np.int64), domain)
    return Dataset(np.array(rows), np.array(labels), domain)
