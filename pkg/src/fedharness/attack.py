"""Model-poisoning adversaries.

Every crafted update is built from the round's benign deltas only; raw
client data is never visible here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import ContractViolation, RngStream, as_vector
from .data import FlipSpec, TriggerSpec

ATTACK_KINDS = ("none", "random_noise", "lie", "min_max", "min_sum", "data_flip", "backdoor")
MODEL_POISONING = ("random_noise", "lie", "min_max", "min_sum")


@dataclass(frozen=True)
class AttackSpec:
    """Adversary configuration. Data-flip and backdoor settings are carried flat and
    turned into :class:`FlipSpec` / :class:`TriggerSpec` on demand."""

    kind: str = "none"
    evil_fraction: float = 0.0
    sigma: float = 1.0
    z: float = 1.5
    direction: str = "neg_std"
    tol: float = 1e-6
    flip_mode: str = "symmetric"
    epsilon: float = 0.5
    trigger_dims: tuple = (12, 13, 14, 15)
    trigger_value: float = 5.0
    target_class: int = 0
    poison_fraction: float = 0.5
    lam: float = 1.0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ContractViolation(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.evil_fraction < 0.5:
            raise ContractViolation("evil_fraction must lie in [0, 0.5)")
        if self.direction not in ("neg_std", "neg_mean"):
            raise ContractViolation(f"unknown perturbation direction {self.direction!r}")

    @property
    def flip(self) -> FlipSpec:
        return FlipSpec(self.flip_mode, self.epsilon)

    def trigger(self, dim: int) -> TriggerSpec:
        return TriggerSpec.on_dims(dim, self.trigger_dims, self.trigger_value, self.target_class,
                                   self.poison_fraction, self.lam)


def evil_ids(master_seed: int, evil_fraction: float, num_clients: int) -> tuple[int, ...]:
    """The ``floor(evil_fraction * M)`` malicious client ids, fixed by the master seed."""
    k = int(math.floor(evil_fraction * num_clients + 1e-9))
    if k == 0:
        return ()
    perm = RngStream(master_seed).derive("evil_ids").generator().permutation(num_clients)
    return tuple(sorted(int(i) for i in perm[:k]))


def _stack(benign) -> np.ndarray:
    B = np.asarray([np.asarray(b, dtype=np.float64) for b in benign])
    if B.ndim != 2 or B.shape[0] < 2:
        raise ContractViolation("attack needs at least two benign deltas")
    return B


def attack_random_noise(dim: int, sigma: float, rng: RngStream) -> np.ndarray:
    if sigma < 0:
        raise ContractViolation("noise sigma must be non-negative")
    return as_vector(sigma * rng.generator().standard_normal(dim))


def attack_lie(benign_deltas, z: float) -> np.ndarray:
    """Coordinatewise ``mean + z * std`` (population std) of the benign deltas."""
    B = _stack(benign_deltas)
    return as_vector(B.mean(axis=0) + z * B.std(axis=0))


def _direction(B: np.ndarray, direction: str) -> np.ndarray:
    p = -B.std(axis=0) if direction == "neg_std" else -B.mean(axis=0)
    norm = np.linalg.norm(p)
    return p / norm if norm > 0 else p


def _largest_scale(feasible, upper: float, tol: float, iters: int = 60) -> float:
    lo, hi = 0.0, upper
    if feasible(hi):
        return hi
    for _ in range(iters):
        if hi - lo <= tol * max(1.0, hi):
            break
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def _crafted(benign_deltas, direction: str, tol: float, kind: str) -> tuple[np.ndarray, float]:
    B = _stack(benign_deltas)
    mean = B.mean(axis=0)
    D2 = _kernels.pairwise_sq_dists(np.ascontiguousarray(B))
    if D2.max() == 0.0:
        return mean, 0.0
    p = _direction(B, direction)
    if not np.any(p):
        return mean, 0.0
    if kind == "min_max":
        bound = math.sqrt(D2.max())

        def feasible(g):
            return np.sqrt(((mean + g * p - B) ** 2).sum(axis=1)).max() <= bound
    else:
        bound = D2.sum(axis=1).max()

        def feasible(g):
            return ((mean + g * p - B) ** 2).sum() <= bound
    gamma = _largest_scale(feasible, 2.0 * math.sqrt(D2.max()), tol)
    return mean + gamma * p, gamma


def attack_min_max(benign_deltas, direction: str = "neg_std", tol: float = 1e-6, *, return_gamma=False):
    """Push the benign mean along ``direction`` as far as the max distance to any benign
    delta stays within the largest benign pairwise distance."""
    out, gamma = _crafted(benign_deltas, direction, tol, "min_max")
    return (as_vector(out), gamma) if return_gamma else as_vector(out)


def attack_min_sum(benign_deltas, direction: str = "neg_std", tol: float = 1e-6, *, return_gamma=False):
    """As :func:`attack_min_max` but bounding the sum of squared distances to the benign set."""
    out, gamma = _crafted(benign_deltas, direction, tol, "min_sum")
    return (as_vector(out), gamma) if return_gamma else as_vector(out)


def craft_malicious(spec: AttackSpec, benign_deltas, dim: int, evil: tuple[int, ...], rng: RngStream) -> dict:
    """Malicious delta per evil client id for a model-poisoning ``spec``; empty otherwise."""
    if spec.kind not in MODEL_POISONING or not evil:
        return {}
    if spec.kind == "random_noise":
        return {cid: attack_random_noise(dim, spec.sigma, rng.derive("noise", cid)) for cid in evil}
    if spec.kind == "lie":
        v = attack_lie(benign_deltas, spec.z)
    elif spec.kind == "min_max":
        v = attack_min_max(benign_deltas, spec.direction, spec.tol)
    else:
        v = attack_min_sum(benign_deltas, spec.direction, spec.tol)
    return {cid: v for cid in evil}
