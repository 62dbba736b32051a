"""Seeded synthetic Gaussian-cluster classification data."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._rng import stream
from .exceptions import ConfigError, LPAError

SCENARIOS = ("balanced", "longtail", "domain_shift")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    domains: np.ndarray | None = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.intp)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise LPAError(f"features {features.shape} and labels {labels.shape} disagree")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise LPAError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(features)):
            raise LPAError("features must be finite")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        if self.domains is not None:
            object.__setattr__(self, "domains", np.asarray(self.domains, dtype=np.intp))

    def __len__(self):
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, index) -> "Dataset":
        doms = None if self.domains is None else self.domains[index]
        return Dataset(self.features[index], self.labels[index], self.n_classes, doms)


@dataclass(frozen=True)
class DatasetSpec:
    scenario: str = "balanced"
    n_classes: int = 10
    n_features: int = 16
    n_max: int = 500
    noise: float = 1.0
    radius: float = 4.0
    imbalance_ratio: float = 1.0
    train_rotations: tuple = (0.0, 30.0, 60.0)
    test_rotation: float = 90.0
    seed: int = 0
    val_fraction: float = 0.1
    eval_per_class: int = 100

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}", "scenario")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes", "n_classes")
        if self.n_features < 1:
            raise ConfigError("need at least one feature", "n_features")
        if self.n_max < 1:
            raise ConfigError("need at least one sample per class", "n_max")
        if self.noise < 0:
            raise ConfigError("noise scale must be >= 0", "noise")
        if self.radius <= 0:
            raise ConfigError("radius must be positive", "radius")
        if self.imbalance_ratio < 1:
            raise ConfigError("imbalance ratio must be >= 1", "imbalance_ratio")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)", "val_fraction")
        if self.eval_per_class < 1:
            raise ConfigError("eval_per_class must be >= 1", "eval_per_class")
        object.__setattr__(self, "train_rotations", tuple(float(r) for r in self.train_rotations))


def class_means(spec: DatasetSpec) -> np.ndarray:
    """Cluster centres drawn uniformly on the sphere of radius ``spec.radius``."""
    g = stream(spec.seed, "means").standard_normal((spec.n_classes, spec.n_features))
    return spec.radius * g / np.linalg.norm(g, axis=1, keepdims=True)


def _sample(spec, counts, stream_name):
    means = class_means(spec)
    labels = np.repeat(np.arange(spec.n_classes), counts)
    noise = stream(spec.seed, stream_name).standard_normal((len(labels), spec.n_features))
    features = means[labels] + spec.noise * noise
    order = stream(spec.seed, stream_name + "-shuffle").permutation(len(labels))
    return Dataset(features[order], labels[order], spec.n_classes)


def longtail_counts(n_max: int, ratio: float, n_classes: int) -> np.ndarray:
    """``round(n_max * ratio ** (-c / (C - 1)))``, at least one per class."""
    c = np.arange(n_classes)
    counts = np.floor(n_max * float(ratio) ** (-c / (n_classes - 1)) + 0.5).astype(int)
    return np.maximum(counts, 1)


def gen_balanced(spec: DatasetSpec) -> Dataset:
    return _sample(spec, np.full(spec.n_classes, spec.n_max), "noise")


def gen_longtail(spec: DatasetSpec) -> Dataset:
    counts = longtail_counts(spec.n_max, spec.imbalance_ratio, spec.n_classes)
    return _sample(spec, counts, "noise")


def gen_eval(spec: DatasetSpec, n_per_class: int | None = None) -> Dataset:
    """Class-balanced evaluation draw from the same clusters, independent noise."""
    n = spec.eval_per_class if n_per_class is None else n_per_class
    return _sample(spec, np.full(spec.n_classes, n), "eval-noise")


def rotate(features, degrees: float) -> np.ndarray:
    """Rotate the first two coordinates by ``degrees``."""
    x = np.array(features, dtype=np.float64, copy=True)
    if x.shape[1] < 2:
        raise LPAError("rotation needs at least two feature coordinates")
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    x0, x1 = x[:, 0].copy(), x[:, 1].copy()
    x[:, 0] = c * x0 - s * x1
    x[:, 1] = s * x0 + c * x1
    return x


def gen_domain_shift(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """Each training domain is the balanced base set rotated by its angle;
    the test domain rotates an independent draw by the held-out angle."""
    if spec.n_features < 2:
        raise LPAError("domain shift needs n_features >= 2")
    if len(spec.train_rotations) < 2:
        raise LPAError("domain shift needs at least two training domains")
    base = gen_balanced(spec)
    feats, labels, domains = [], [], []
    for k, angle in enumerate(spec.train_rotations):
        feats.append(rotate(base.features, angle))
        labels.append(base.labels)
        domains.append(np.full(len(base), k))
    train = Dataset(np.vstack(feats), np.concatenate(labels), spec.n_classes, np.concatenate(domains))
    held = gen_eval(spec, spec.n_max)
    test = Dataset(
        rotate(held.features, spec.test_rotation),
        held.labels,
        spec.n_classes,
        np.full(len(held), len(spec.train_rotations)),
    )
    return train, test


def train_val_split(ds: Dataset, val_fraction: float = 0.1) -> tuple[Dataset, Dataset]:
    """Hold out the last ``floor(val_fraction * N_c)`` rows of each class
    (at least one when the class has two or more rows)."""
    train_idx, val_idx = [], []
    for c in range(ds.n_classes):
        rows = np.flatnonzero(ds.labels == c)
        n_val = int(val_fraction * len(rows))
        if val_fraction > 0 and len(rows) >= 2:
            n_val = max(n_val, 1)
        train_idx.append(rows[: len(rows) - n_val])
        val_idx.append(rows[len(rows) - n_val :])
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))
    return ds.subset(train_idx), ds.subset(val_idx)


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    extra: dict = field(default_factory=dict)


def make_splits(spec: DatasetSpec) -> Splits:
    """Training and validation sets for a scenario.

    Long-tail validation is a class-balanced draw (as with CIFAR-LT, the
    evaluation set is balanced); domain shift validates on the held-out
    domain and keeps the in-domain holdout under ``extra["in_domain"]``.
    """
    if spec.scenario == "balanced":
        train, val = train_val_split(gen_balanced(spec), spec.val_fraction)
        return Splits(train, val)
    if spec.scenario == "longtail":
        return Splits(gen_longtail(spec), gen_eval(spec))
    train, test = gen_domain_shift(spec)
    train, in_domain = train_val_split(train, spec.val_fraction)
    return Splits(train, test, {"in_domain": in_domain})


def with_seed(spec: DatasetSpec, seed: int) -> DatasetSpec:
    return replace(spec, seed=seed)


def save_csv(ds: Dataset, path) -> Path:
    """Header ``feature_0..feature_{d-1},label,domain``; floats use repr so
    reloading is bit-exact.  ``domain`` is empty when the set has none."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"feature_{j}" for j in range(ds.n_features)] + ["label", "domain"])
        for i in range(len(ds)):
            dom = "" if ds.domains is None else int(ds.domains[i])
            w.writerow([repr(float(v)) for v in ds.features[i]] + [int(ds.labels[i]), dom])
    return path


def load_csv(path, n_classes: int | None = None) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise LPAError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    if header[-2:] != ["label", "domain"]:
        raise LPAError(f"{path}: expected trailing label,domain columns")
    d = len(header) - 2
    features = np.array([[float(v) for v in r[:d]] for r in body], dtype=np.float64).reshape(-1, d)
    labels = np.array([int(r[d]) for r in body], dtype=np.intp)
    dom = [r[d + 1] for r in body]
    domains = None if all(v == "" for v in dom) else np.array([int(v) for v in dom])
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 0
    return Dataset(features, labels, n_classes, domains)
