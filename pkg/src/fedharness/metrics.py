"""Accuracy, robustness, fairness and contribution metrics."""

from __future__ import annotations

import itertools
import math
import statistics
from typing import Callable

import numpy as np

from .core import ContractViolation, cosine_similarity
from .data import Dataset, TriggerSpec, apply_trigger
from .model import ModelSpec, predict

SHAPLEY_MAX_CLIENTS = 12


def top1_accuracy(spec: ModelSpec, params, testset: Dataset) -> float:
    if len(testset) == 0:
        raise ContractViolation("accuracy of an empty test set is undefined")
    return float(np.mean(predict(spec, params, testset.features) == testset.labels))


def ood_accuracy(spec: ModelSpec, params, ood_set: Dataset) -> float:
    return top1_accuracy(spec, params, ood_set)


def mean_cross_client(results) -> float:
    vals = list(results.values()) if isinstance(results, dict) else list(results)
    if not vals:
        raise ContractViolation("no per-client accuracies to average")
    return math.fsum(vals) / len(vals)


def degradation(a_clean: float, a_byz: float) -> float:
    """Signed accuracy lost under attack."""
    return a_clean - a_byz


def backdoor_success(spec: ModelSpec, params, clean_test: Dataset, trig: TriggerSpec):
    """Fraction of triggered non-target rows predicted as the target class, or None if no such rows."""
    rows = clean_test.labels != trig.target_class
    if not rows.any():
        return None
    X = apply_trigger(clean_test.features[rows], trig)
    return float(np.mean(predict(spec, params, X) == trig.target_class))


def leave_one_out(w, w_i, alpha_i: float):
    """Global model with client ``i`` algebraically removed; None when ``alpha_i == 1``."""
    if alpha_i >= 1.0:
        return None
    if alpha_i < 0.0:
        raise ContractViolation("client weight must be non-negative")
    return (np.asarray(w, dtype=np.float64) - alpha_i * np.asarray(w_i, dtype=np.float64)) / (1.0 - alpha_i)


def contribution_match(deltas, weights):
    """Cosine between measured impacts and nominal weights; None if either is all zero."""
    deltas = np.asarray(deltas, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if deltas.shape != weights.shape:
        raise ContractViolation("impacts and weights must have equal length")
    value, degenerate = cosine_similarity(deltas, weights, with_status=True)
    return None if degenerate else value


def accuracy_consistency(results) -> float:
    """Population standard deviation of per-domain accuracies, in percent."""
    vals = np.asarray(list(results.values()) if isinstance(results, dict) else list(results), dtype=np.float64)
    if vals.size == 0:
        raise ContractViolation("no accuracies given")
    return 100.0 * statistics.pstdev(vals.tolist())


def shapley_exact(value_fn: Callable[[frozenset], float], M: int, rho: float = 1.0) -> np.ndarray:
    """Exact Shapley values by subset enumeration.

    ``value_fn`` maps a frozenset of client indices (including the empty set)
    to a score. Each coalition is evaluated once.
    """
    if M < 1:
        raise ContractViolation("need at least one client")
    if M > SHAPLEY_MAX_CLIENTS:
        raise ContractViolation(f"exact Shapley refuses M={M} > {SHAPLEY_MAX_CLIENTS}")
    values = {}
    for r in range(M + 1):
        for S in itertools.combinations(range(M), r):
            values[S] = float(value_fn(frozenset(S)))
    nu = np.zeros(M)
    for i in range(M):
        others = [j for j in range(M) if j != i]
        terms = []
        for r in range(M):
            denom = math.comb(M - 1, r)
            for S in itertools.combinations(others, r):
                with_i = tuple(sorted(S + (i,)))
                terms.append((values[with_i] - values[S]) / denom)
        nu[i] = rho / M * math.fsum(terms)
    return nu
