"""Synthetic data, heterogeneity injection and poisoning transforms."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ContractViolation, RngStream


class InfeasiblePartition(ContractViolation):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ContractViolation("features rows must match labels length")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    input_dim: int = 16
    samples_per_class: int = 500
    class_separation: float = 4.0
    noise_std: float = 1.0


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int = 10
    beta: float = 0.5
    min_samples_per_client: int = 10


@dataclass(frozen=True)
class DomainSpec:
    """Feature shift: rotate the coordinate pair ``plane``, scale, then offset.

    The default plane mixes the second class-mean axis with a pure-noise axis,
    so larger angles move class signal out of the features the model learned.
    """

    rotation_angle: float = 0.0
    feature_scale: float = 1.0
    feature_offset: np.ndarray | None = None
    plane: tuple = (1, 2)

    def __post_init__(self):
        if not self.feature_scale > 0:
            raise ContractViolation("feature_scale must be positive")
        if len(self.plane) != 2 or self.plane[0] == self.plane[1] or min(self.plane) < 0:
            raise ContractViolation("plane must name two distinct coordinates")


@dataclass(frozen=True)
class FlipSpec:
    mode: str = "symmetric"
    epsilon: float = 0.5

    def __post_init__(self):
        if self.mode not in ("symmetric", "pair"):
            raise ContractViolation(f"unknown flip mode {self.mode!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ContractViolation("flip epsilon must lie in [0, 1]")


@dataclass(frozen=True)
class FlipLog:
    original: np.ndarray
    flipped: np.ndarray


@dataclass(frozen=True)
class TriggerSpec:
    mask: np.ndarray
    pattern: np.ndarray
    target_class: int = 0
    poison_fraction: float = 0.5
    lam: float = 1.0

    def __post_init__(self):
        if self.mask.shape != self.pattern.shape:
            raise ContractViolation("trigger mask and pattern must have equal length")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ContractViolation("trigger mask must be binary")
        if not 0.0 <= self.poison_fraction <= 1.0:
            raise ContractViolation("poison_fraction must lie in [0, 1]")
        if self.lam < 0:
            raise ContractViolation("backdoor lambda must be non-negative")

    @classmethod
    def on_dims(cls, dim, dims, value, target_class=0, poison_fraction=0.5, lam=1.0):
        mask = np.zeros(dim)
        mask[list(dims)] = 1.0
        return cls(mask, mask * value, target_class, poison_fraction, lam)


def class_means(num_classes: int, dim: int, separation: float) -> np.ndarray:
    """Class centres evenly spaced on a circle in the first two coordinates.

    Adjacent centres are ``separation`` apart. Every class has the same two
    neighbours at the same distance, so per-class accuracy is uniform and any
    accuracy gap between label mixes comes from the model, not the geometry.
    """
    means = np.zeros((num_classes, dim))
    if num_classes < 2:
        return means
    if num_classes == 2:
        means[:, 0] = (-separation / 2, separation / 2)
        return means
    if dim < 2:
        raise ContractViolation("more than two classes need input_dim >= 2")
    radius = separation / (2.0 * math.sin(math.pi / num_classes))
    theta = 2.0 * math.pi * np.arange(num_classes) / num_classes
    means[:, 0] = radius * np.cos(theta)
    means[:, 1] = radius * np.sin(theta)
    return means


def gen_synthetic(spec: SyntheticSpec, rng: RngStream) -> Dataset:
    gen = rng.generator()
    means = class_means(spec.num_classes, spec.input_dim, spec.class_separation)
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    X = means[labels] + spec.noise_std * gen.standard_normal((labels.size, spec.input_dim))
    order = gen.permutation(labels.size)
    return Dataset(np.ascontiguousarray(X[order]), labels[order].astype(np.int64), spec.num_classes)


def dirichlet_partition(labels, spec: PartitionSpec, rng: RngStream, max_retries: int = 100) -> list[np.ndarray]:
    """Split sample indices among clients with per-class Dirichlet(beta) proportions.

    Attempts that leave a client below ``min_samples_per_client`` are
    discarded and every class's proportion vector is redrawn.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractViolation("cannot partition an empty label set")
    M = spec.num_clients
    if M < 1:
        raise ContractViolation("num_clients must be >= 1")
    if not spec.beta > 0:
        raise ContractViolation("Dirichlet beta must be positive")
    if M == 1:
        return [np.arange(labels.size)]
    gen = rng.generator()
    classes = np.unique(labels)
    for _ in range(max_retries):
        buckets = [[] for _ in range(M)]
        for c in classes:
            idx = np.flatnonzero(labels == c)
            gen.shuffle(idx)
            p = gen.dirichlet(np.full(M, spec.beta))
            cuts = (np.cumsum(p)[:-1] * idx.size).astype(int)
            for k, part in enumerate(np.split(idx, cuts)):
                buckets[k].append(part)
        parts = [np.sort(np.concatenate(b)) for b in buckets]
        if min(p.size for p in parts) >= spec.min_samples_per_client:
            return parts
    raise InfeasiblePartition(
        f"no partition with >= {spec.min_samples_per_client} samples per client after {max_retries} draws"
    )


def apply_flip(labels, spec: FlipSpec, rng: RngStream, num_classes: int) -> tuple[np.ndarray, FlipLog]:
    if num_classes < 2:
        raise ContractViolation("label flipping needs at least two classes")
    labels = np.asarray(labels, dtype=np.int64)
    gen = rng.generator()
    flip = gen.random(labels.size) < spec.epsilon
    if spec.mode == "symmetric":
        shift = gen.integers(1, num_classes, size=labels.size)
    else:
        shift = np.ones(labels.size, dtype=np.int64)
    out = np.where(flip, (labels + shift) % num_classes, labels)
    return out, FlipLog(labels.copy(), flip)


def apply_trigger(features, spec: TriggerSpec) -> np.ndarray:
    """Stamp the trigger: ``(1 - mask) * x + mask * pattern``. Accepts a row or a matrix."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != spec.mask.shape[0]:
        raise ContractViolation("trigger dimension mismatch")
    return (1.0 - spec.mask) * x + spec.mask * spec.pattern


def apply_domain(dataset: Dataset, spec: DomainSpec) -> Dataset:
    X = dataset.features
    out = X.copy()
    if spec.rotation_angle != 0.0:
        i, j = spec.plane
        if max(i, j) >= X.shape[1]:
            raise ContractViolation(f"rotation plane {spec.plane} outside {X.shape[1]} features")
        c, s = math.cos(spec.rotation_angle), math.sin(spec.rotation_angle)
        out[:, i] = c * X[:, i] - s * X[:, j]
        out[:, j] = s * X[:, i] + c * X[:, j]
    out *= spec.feature_scale
    if spec.feature_offset is not None:
        out += np.asarray(spec.feature_offset, dtype=np.float64)
    return Dataset(out, dataset.labels.copy(), dataset.num_classes)


def poison_dataset(dataset: Dataset, spec: TriggerSpec, rng: RngStream, return_indices: bool = False):
    n = len(dataset)
    k = int(math.floor(spec.poison_fraction * n + 0.5))
    chosen = np.sort(rng.generator().permutation(n)[:k])
    X = dataset.features.copy()
    y = dataset.labels.copy()
    X[chosen] = apply_trigger(X[chosen], spec)
    y[chosen] = spec.target_class
    out = Dataset(X, y, dataset.num_classes)
    return (out, chosen) if return_indices else out


# -- text serialisation --------------------------------------------------------

_MAGIC = "# fedharness-dataset v1"


def save_dataset(dataset: Dataset, path) -> None:
    """Write ``dataset`` as text: a magic line, ``rows dim classes``, then ``label,x0,...`` rows."""
    lines = [_MAGIC, f"{len(dataset)} {dataset.dim} {dataset.num_classes}"]
    for y, row in zip(dataset.labels, dataset.features):
        lines.append(",".join([str(int(y))] + [repr(float(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> Dataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != _MAGIC:
        raise ContractViolation(f"{path}: not a fedharness dataset file")
    n, d, C = (int(t) for t in lines[1].split())
    rows = [ln.split(",") for ln in lines[2:2 + n]]
    if len(rows) != n or any(len(r) != d + 1 for r in rows):
        raise ContractViolation(f"{path}: row count or width does not match header")
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    X = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64).reshape(n, d)
    return Dataset(X, labels, C)
