"""Synthetic cluster benchmark, OOD noise generators and dataset CSV files."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, DataError
from .numerics import Rng

__all__ = [
    "ClusterSpec",
    "Dataset",
    "standardize",
    "gen_clusters",
    "gen_ood_train",
    "gen_ood_test",
    "feature_range",
    "bayes_posterior",
    "overlap_mask",
    "save_csv",
    "load_csv",
]

TRAIN_FRACTION = 0.8


@dataclass
class ClusterSpec:
    """Isotropic Gaussian classes in raw (unstandardized) coordinates.

    The two classes in ``overlap_pair`` sit ``overlap_gap`` standard
    deviations apart, giving a region of genuine class confusion (Bayes
    error about 23% between them at the default 1.5).
    """

    centers: np.ndarray
    scale: float = 1.0
    n_per_class: int = 1000
    overlap_pair: tuple[int, int] = (0, 1)

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        k = self.centers.shape[0]
        if k < 2:
            raise ConfigurationError("need at least two classes")
        if self.scale <= 0 or self.n_per_class < 1:
            raise ConfigurationError("scale must be > 0 and n_per_class >= 1")
        i, j = self.overlap_pair
        if not (0 <= i < k and 0 <= j < k and i != j):
            raise ConfigurationError(f"bad overlap pair {self.overlap_pair} for {k} classes")
        self.overlap_pair = (int(i), int(j))

    @property
    def n_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @classmethod
    def default(cls, n_classes=3, dim=2, n_per_class=1000, scale=1.0, overlap_gap=1.5, spread=6.0):
        """All centers on the main diagonal, in units of ``scale``.

        The overlap pair straddles the origin; class ``j >= 2`` sits
        ``spread * (j - 1)`` beyond the second one. Keeping the classes on
        one line leaves the off-diagonal corners of the feature box empty,
        which is where the uniform OOD test noise is clearly distinct.
        """
        if n_classes < 2:
            raise ConfigurationError("need at least two classes")
        if dim < 1:
            raise ConfigurationError("dim must be >= 1")
        u = np.ones(dim) / np.sqrt(dim)
        offsets = [-0.5 * overlap_gap, 0.5 * overlap_gap]
        offsets += [0.5 * overlap_gap + spread * j for j in range(1, n_classes - 1)]
        centers = np.outer(offsets, u) * scale
        return cls(centers, scale, n_per_class, (0, 1))

    def to_dict(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "scale": self.scale,
            "n_per_class": self.n_per_class,
            "overlap_pair": list(self.overlap_pair),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["centers"]), d["scale"], d["n_per_class"], tuple(d["overlap_pair"]))


@dataclass
class Dataset:
    """Standardized features with integer labels.

    ``mean`` and ``scale`` map raw to stored coordinates,
    ``features = (raw - mean) / scale``; they always come from the
    training split.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    mean: np.ndarray = None
    scale: np.ndarray = None
    split: str = "train"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-d array")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        d = self.features.shape[1]
        if self.labels.shape != (self.features.shape[0],):
            raise DataError("one label per feature row required")
        if not np.all(np.isfinite(self.features)):
            raise DataError("non-finite feature values")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")
        self.mean = np.zeros(d) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        self.scale = np.ones(d) if self.scale is None else np.asarray(self.scale, dtype=np.float64)
        if np.any(self.scale <= 0):
            raise DataError("standardization scale must be positive")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def raw_features(self) -> np.ndarray:
        return self.features * self.scale + self.mean


def standardize(x, mean, scale):
    return (np.asarray(x, dtype=np.float64) - mean) / scale


def _fit_scaler(x):
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    return mean, np.where(scale > 0, scale, 1.0)


def gen_clusters(spec: ClusterSpec, seed: int) -> tuple[Dataset, Dataset]:
    """Draw the benchmark and split it 80/20 per class.

    Both splits are standardized with the training statistics.
    """
    rng = Rng(seed)
    k, d = spec.n_classes, spec.dim
    n_train = int(round(TRAIN_FRACTION * spec.n_per_class))
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c in range(k):
        pts = rng.normal(0.0, spec.scale, size=(spec.n_per_class, d)) + spec.centers[c]
        order = rng.permutation(spec.n_per_class)
        tr_x.append(pts[order[:n_train]])
        te_x.append(pts[order[n_train:]])
        tr_y.append(np.full(n_train, c))
        te_y.append(np.full(spec.n_per_class - n_train, c))
    tr_x, tr_y = np.concatenate(tr_x), np.concatenate(tr_y)
    te_x, te_y = np.concatenate(te_x), np.concatenate(te_y)
    shuffle = rng.permutation(len(tr_y))
    tr_x, tr_y = tr_x[shuffle], tr_y[shuffle]
    mean, scale = _fit_scaler(tr_x)
    train = Dataset(standardize(tr_x, mean, scale), tr_y, k, mean, scale, "train")
    test = Dataset(standardize(te_x, mean, scale), te_y, k, mean, scale, "test")
    return train, test


def gen_ood_train(dim: int, n: int, rng: Rng, std: float = 2.0) -> np.ndarray:
    """Gaussian noise around the origin of standardized space."""
    if n < 0:
        raise ConfigurationError("n must be >= 0")
    return rng.normal(0.0, std, size=(n, dim))


def feature_range(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    return dataset.features.min(axis=0), dataset.features.max(axis=0)


def gen_ood_test(lo, hi, n: int, rng: Rng, margin: float = 1.0) -> np.ndarray:
    """Uniform noise over the training box widened by ``margin`` per side."""
    if margin < 0:
        raise ConfigurationError("margin must be >= 0")
    lo = np.asarray(lo, dtype=np.float64) - margin
    hi = np.asarray(hi, dtype=np.float64) + margin
    if n < 0:
        raise ConfigurationError("n must be >= 0")
    return rng.uniform(lo, hi, size=(n, lo.size))


def bayes_posterior(spec: ClusterSpec, x_raw) -> np.ndarray:
    """True class posterior of the generating mixture (equal class priors)."""
    x = np.atleast_2d(np.asarray(x_raw, dtype=np.float64))
    sq = ((x[:, None, :] - spec.centers[None, :, :]) ** 2).sum(axis=-1)
    logits = -0.5 * sq / spec.scale**2
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def overlap_mask(spec: ClusterSpec, x_raw, max_posterior: float = 0.75) -> np.ndarray:
    """Points where even the Bayes classifier is at most ``max_posterior`` sure."""
    return bayes_posterior(spec, x_raw).max(axis=1) <= max_posterior


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i + 1}" for i in range(dataset.dim)] + ["label"])
        for row, y in zip(dataset.features, dataset.labels):
            w.writerow([format(v, ".17g") for v in row] + [int(y)])


def load_csv(path, n_classes: int) -> Dataset:
    """Read a ``f1,...,fd,label`` file. Errors name the offending line."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: missing header")
    header = rows[0]
    if len(header) < 2 or header[-1] != "label":
        raise DataError(f"{path}:1: header must be f1,...,fd,label")
    d = len(header) - 1
    feats = np.empty((len(rows) - 1, d))
    labels = np.empty(len(rows) - 1, dtype=np.int64)
    for i, row in enumerate(rows[1:]):
        line = i + 2
        if len(row) != d + 1:
            raise DataError(f"{path}:{line}: expected {d + 1} fields, got {len(row)}")
        try:
            vals = [float(v) for v in row[:-1]]
            label = int(row[-1])
        except ValueError as exc:
            raise DataError(f"{path}:{line}: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"{path}:{line}: non-finite feature value")
        if not 0 <= label < n_classes:
            raise DataError(f"{path}:{line}: label {label} outside [0, {n_classes})")
        feats[i] = vals
        labels[i] = label
    return Dataset(feats, labels, n_classes, split=path.stem)
