"""Vector arithmetic and splittable random streams.

Parameter vectors are plain 1-D ``float64`` numpy arrays. Functions here
validate shapes and finiteness and never mutate their inputs.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np


class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


def as_vector(values) -> np.ndarray:
    """Return a read-only float64 copy of ``values``, checking it is finite and 1-D."""
    v = np.array(values, dtype=np.float64, copy=True)
    if v.ndim != 1 or v.size == 0:
        raise ContractViolation(f"parameter vector must be 1-D and non-empty, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ContractViolation("parameter vector has non-finite entries")
    v.flags.writeable = False
    return v


def _check_dims(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise ContractViolation(f"dimension mismatch: {x.shape} vs {y.shape}")


def vec_axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if not math.isfinite(a):
        raise ContractViolation("axpy scale must be finite")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_dims(x, y)
    return as_vector(a * x + y)


def l2_distance(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_dims(x, y)
    return float(np.linalg.norm(x - y))


def cosine_similarity(x, y, *, with_status: bool = False):
    """Cosine of the angle between ``x`` and ``y``, clamped to [-1, 1].

    A zero-norm argument yields 0.0. Pass ``with_status=True`` to get a
    ``(value, degenerate)`` pair so callers can report such cases.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_dims(x, y)
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        return (0.0, True) if with_status else 0.0
    c = float(np.dot(x / nx, y / ny))
    c = min(1.0, max(-1.0, c))
    return (c, False) if with_status else c


def exact_weighted_sum(vectors: np.ndarray, weights=None) -> np.ndarray:
    """Per-coordinate sum of ``weights[i] * vectors[i]`` with correctly rounded accumulation.

    Uses ``math.fsum`` so the result does not depend on row order.
    """
    V = np.asarray(vectors, dtype=np.float64)
    if weights is not None:
        V = V * np.asarray(weights, dtype=np.float64)[:, None]
    return np.array([math.fsum(col) for col in V.T], dtype=np.float64)


def _label_word(label: str) -> int:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream identified by a master seed and a derivation path.

    Children are derived by hashing ``(label, index)`` pairs into a numpy
    ``SeedSequence`` spawn key, so sibling streams never share state.
    """

    master_seed: int
    lineage: tuple = field(default=())

    def derive(self, label: str, index: int = 0) -> "RngStream":
        return RngStream(self.master_seed, self.lineage + ((label, int(index)),))

    def seed_sequence(self) -> np.random.SeedSequence:
        key = []
        for label, index in self.lineage:
            key.append(_label_word(label))
            key.append(index & 0xFFFFFFFF)
            key.append((index >> 32) & 0xFFFFFFFF)
        return np.random.SeedSequence(entropy=self.master_seed & (2**64 - 1), spawn_key=tuple(key))

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        return np.random.Generator(np.random.Philox(self.seed_sequence()))


def derive_stream(parent: RngStream, label: str, index: int = 0) -> RngStream:
    return parent.derive(label, index)
