"""Server aggregation rules, post-processing defenses and AFL reweighting.

All rules take the round's ``ClientUpdate`` records in any order and sort
them by client id first, so outputs never depend on arrival order. ``mean``
and ``trimmed`` act on the submitted parameters; every other rule acts on
deltas and adds the result to the broadcast parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import ContractViolation, RngStream, as_vector, cosine_similarity, exact_weighted_sum

AGGREGATOR_KINDS = ("mean", "trimmed", "multi_krum", "bulyan", "foolsgold", "dnc", "rfa", "fltrust",
                    "sageflow", "rlr", "afl")


@dataclass(frozen=True)
class AggregatorSpec:
    kind: str = "mean"
    trim_frac: float = 0.2
    trim_mode: str = "median"
    f: int | None = None
    top_k: int = 5
    foolsgold_eps: float = 1e-5
    dnc_b: int = 1000
    dnc_c: float = 1.0
    dnc_iters: int = 1
    rfa_iters: int = 3
    rfa_smoothing: float = 1e-8
    fltrust_root_size: int = 100
    fltrust_warmup_epochs: int = 20
    sageflow_e_th: float = 2.2
    sageflow_delta: float = 5.0
    rlr_threshold: float = 4.0
    rlr_lr: float = 1.0
    afl_gamma: float = 0.01
    afl_step: float = 0.1
    crfl: bool = False
    crfl_rho: float = 15.0
    crfl_sigma: float = 0.01

    def __post_init__(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise ContractViolation(f"unknown aggregator kind {self.kind!r}")
        if self.trim_mode not in ("mean", "median"):
            raise ContractViolation(f"unknown trim mode {self.trim_mode!r}")


@dataclass
class AggregatorState:
    foolsgold_history: dict = field(default_factory=dict)
    afl_weights: np.ndarray | None = None
    scaffold_c_global: np.ndarray | None = None


def _sorted(updates, *aligned):
    if len(updates) == 0:
        raise ContractViolation("no updates to aggregate")
    order = sorted(range(len(updates)), key=lambda i: updates[i].client_id)
    out = [[updates[i] for i in order]]
    for seq in aligned:
        out.append(np.asarray([seq[i] for i in order], dtype=np.float64))
    return out


def _broadcast(updates) -> np.ndarray:
    u = updates[0]
    return np.asarray(u.new_params) - np.asarray(u.delta)


def _deltas(updates) -> np.ndarray:
    return np.ascontiguousarray([u.delta for u in updates], dtype=np.float64)


def _params(updates) -> np.ndarray:
    return np.ascontiguousarray([u.new_params for u in updates], dtype=np.float64)


def _mean_rows(V: np.ndarray) -> np.ndarray:
    return exact_weighted_sum(V) / V.shape[0]


def agg_mean(updates, weights) -> np.ndarray:
    updates, w = _sorted(updates, weights)
    if abs(math.fsum(w) - 1.0) > 1e-9:
        raise ContractViolation("aggregation weights must sum to 1")
    return as_vector(exact_weighted_sum(_params(updates), w))


def trimmed_rows(V: np.ndarray, frac: float, mode: str) -> np.ndarray:
    n = V.shape[0]
    if mode == "median":
        return np.median(V, axis=0)
    if not 0.0 <= frac < 0.5:
        raise ContractViolation("trim fraction must lie in [0, 0.5)")
    k = int(math.floor(frac * n))
    if n - 2 * k < 1:
        raise ContractViolation("trimming removes every value")
    S = np.sort(V, axis=0)[k:n - k]
    return _mean_rows(S)


def agg_trimmed(updates, frac: float, mode: str = "mean") -> np.ndarray:
    (updates,) = _sorted(updates)
    return as_vector(trimmed_rows(_params(updates), frac, mode))


def krum_scores(V: np.ndarray, f: int) -> np.ndarray:
    n = V.shape[0]
    m = max(n - f - 2, 1)
    D2 = _kernels.pairwise_sq_dists(np.ascontiguousarray(V))
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(D2[i], i)
        scores[i] = np.sort(others)[:m].sum()
    return scores


def krum_select(V: np.ndarray, f: int, top_k: int) -> np.ndarray:
    """Indices (in row order) of the ``top_k`` lowest Krum scores; ties go to the earlier row."""
    n = V.shape[0]
    if f < 0 or n - f - 2 < 1:
        raise ContractViolation(f"Krum infeasible: n={n}, f={f} leaves no neighbours to score")
    if not 1 <= top_k <= n - f:
        raise ContractViolation(f"top_k must lie in [1, n - f], got {top_k}")
    return np.argsort(krum_scores(V, f), kind="stable")[:top_k]


def agg_multi_krum(updates, f: int, top_k: int) -> np.ndarray:
    (updates,) = _sorted(updates)
    D = _deltas(updates)
    sel = np.sort(krum_select(D, f, top_k))
    return as_vector(_broadcast(updates) + _mean_rows(D[sel]))


def bulyan_rows(V: np.ndarray, f: int) -> np.ndarray:
    n = V.shape[0]
    if f < 0 or n < 4 * f + 3:
        raise ContractViolation(f"Bulyan needs n >= 4f + 3, got n={n}, f={f}")
    theta = n - 2 * f
    remaining = list(range(n))
    chosen = []
    while len(chosen) < theta:
        scores = krum_scores(V[remaining], f)
        best = remaining[int(np.argmin(scores))]
        chosen.append(best)
        remaining.remove(best)
    S = V[sorted(chosen)]
    beta = theta - 2 * f
    med = np.median(S, axis=0)
    closest = np.argsort(np.abs(S - med), axis=0, kind="stable")[:beta]
    return _mean_rows(np.take_along_axis(S, closest, axis=0))


def agg_bulyan(updates, f: int) -> np.ndarray:
    (updates,) = _sorted(updates)
    return as_vector(_broadcast(updates) + bulyan_rows(_deltas(updates), f))


def foolsgold_weights(H: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Per-client learning weights in [0, 1] from pairwise cosine similarity of histories."""
    n = H.shape[0]
    norms = np.maximum(np.linalg.norm(H, axis=1), eps)
    U = H / norms[:, None]
    cs = U @ U.T - np.eye(n)
    maxcs = cs.max(axis=1)
    for i in range(n):
        for j in range(n):
            if i != j and maxcs[i] < maxcs[j]:
                cs[i, j] *= maxcs[i] / maxcs[j]
    wv = np.clip(1.0 - cs.max(axis=1), 0.0, 1.0)
    top = wv.max()
    if top <= eps:
        return np.zeros(n)
    wv = wv / top
    wv[wv == 1.0] = 0.99
    nz = wv > 0
    wv[nz] = np.log(wv[nz] / (1.0 - wv[nz])) + 0.5
    return np.clip(wv, 0.0, 1.0)


def agg_foolsgold(updates, state: AggregatorState, eps: float = 1e-5, info: dict | None = None) -> np.ndarray:
    (updates,) = _sorted(updates)
    for u in updates:
        prev = state.foolsgold_history.get(u.client_id)
        state.foolsgold_history[u.client_id] = np.asarray(u.delta) if prev is None else prev + u.delta
    H = np.asarray([state.foolsgold_history[u.client_id] for u in updates])
    wv = foolsgold_weights(H, eps)
    if info is not None:
        info["foolsgold_weights"] = {u.client_id: float(w) for u, w in zip(updates, wv)}
    broadcast = _broadcast(updates)
    total = math.fsum(wv)
    if total == 0.0:
        return as_vector(broadcast)
    return as_vector(broadcast + exact_weighted_sum(_deltas(updates), wv / total))


def dnc_keep(D: np.ndarray, b: int, c: float, iters: int, num_evil: int, rng: RngStream) -> np.ndarray:
    """Boolean mask of clients surviving every spectral filtering pass."""
    n, d = D.shape
    if n < 2:
        raise ContractViolation("DnC needs at least two updates")
    keep = np.ones(n, dtype=bool)
    n_remove = int(math.ceil(c * num_evil))
    if n_remove == 0:
        return keep
    gen = rng.generator()
    sub = min(b, d)
    for _ in range(iters):
        cols = np.sort(gen.choice(d, size=sub, replace=False))
        X = D[:, cols]
        Xc = X - X.mean(axis=0)
        _, _, vt = np.linalg.svd(Xc, full_matrices=False)
        score = (Xc @ vt[0]) ** 2
        worst = np.argsort(-score, kind="stable")[:n_remove]
        keep[worst] = False
    if not keep.any():
        raise ContractViolation("DnC filtered out every client")
    return keep


def agg_dnc(updates, b: int, c: float, iters: int, num_evil: int, rng: RngStream,
            info: dict | None = None) -> np.ndarray:
    (updates,) = _sorted(updates)
    D = _deltas(updates)
    keep = dnc_keep(D, b, c, iters, num_evil, rng)
    if info is not None:
        info["dnc_removed"] = [u.client_id for u, k in zip(updates, keep) if not k]
    return as_vector(_broadcast(updates) + _mean_rows(D[keep]))


def weiszfeld(V: np.ndarray, weights, iters: int, smoothing: float) -> np.ndarray:
    """Smoothed Weiszfeld iterations for the weighted geometric median, starting at the weighted mean."""
    if iters < 1 or not smoothing > 0:
        raise ContractViolation("RFA needs iters >= 1 and smoothing > 0")
    a = np.asarray(weights, dtype=np.float64)
    z = exact_weighted_sum(V, a / a.sum())
    for _ in range(iters):
        dist = np.sqrt(((V - z) ** 2).sum(axis=1))
        beta = a / np.maximum(smoothing, dist)
        z = exact_weighted_sum(V, beta / beta.sum())
    return z


def agg_rfa(updates, weights, iters: int = 3, smoothing: float = 1e-8) -> np.ndarray:
    updates, w = _sorted(updates, weights)
    return as_vector(_broadcast(updates) + weiszfeld(_deltas(updates), w, iters, smoothing))


def fltrust_scores(D: np.ndarray, server_delta) -> np.ndarray:
    return np.array([max(0.0, cosine_similarity(d, server_delta)) for d in D])


def agg_fltrust(updates, server_update, info: dict | None = None) -> np.ndarray:
    (updates,) = _sorted(updates)
    broadcast = _broadcast(updates)
    D = _deltas(updates)
    s = np.asarray(server_update.delta, dtype=np.float64)
    t = fltrust_scores(D, s)
    if info is not None:
        info["fltrust_scores"] = {u.client_id: float(v) for u, v in zip(updates, t)}
    total = math.fsum(t)
    if total == 0.0:
        return as_vector(broadcast)
    s_norm = np.linalg.norm(s)
    norms = np.linalg.norm(D, axis=1)
    scale = np.divide(s_norm, norms, out=np.zeros_like(norms), where=norms > 0)
    return as_vector(broadcast + exact_weighted_sum(D * scale[:, None], t / total))


def sageflow_weights(public_eval, num_samples, e_th: float, delta: float) -> np.ndarray:
    ent = np.array([e for e, _ in public_eval], dtype=np.float64)
    loss = np.maximum(np.array([l for _, l in public_eval], dtype=np.float64), 1e-12)
    w = np.where(ent <= e_th, np.asarray(num_samples, dtype=np.float64) * loss ** (-delta), 0.0)
    total = math.fsum(w)
    return w / total if total > 0 else w


def agg_sageflow(updates, public_eval, e_th: float = 2.2, delta: float = 5.0,
                 info: dict | None = None) -> np.ndarray:
    """Drop clients whose public-set prediction entropy exceeds ``e_th``; weight the rest
    by ``N_i * loss_i ** -delta``. ``public_eval`` is aligned with ``updates``."""
    order = sorted(range(len(updates)), key=lambda i: updates[i].client_id)
    updates = [updates[i] for i in order]
    public_eval = [public_eval[i] for i in order]
    w = sageflow_weights(public_eval, [u.num_samples for u in updates], e_th, delta)
    if info is not None:
        info["sageflow_discarded"] = [u.client_id for u, x in zip(updates, w) if x == 0.0]
    if not w.any():
        if info is not None:
            info["flagged"] = "sageflow discarded every client"
        return as_vector(_broadcast(updates))
    return as_vector(exact_weighted_sum(_params(updates), w))


def rlr_rates(D: np.ndarray, threshold: float, lr: float) -> np.ndarray:
    s = np.abs(np.sign(D).sum(axis=0))
    return np.where(s >= threshold, lr, -lr)


def agg_rlr(updates, weights, threshold: float = 4.0, lr: float = 1.0) -> np.ndarray:
    if threshold < 0:
        raise ContractViolation("RLR threshold must be non-negative")
    updates, w = _sorted(updates, weights)
    D = _deltas(updates)
    return as_vector(_broadcast(updates) + rlr_rates(D, threshold, lr) * exact_weighted_sum(D, w))


def crfl_post(aggregated, rho: float, sigma: float, rng: RngStream) -> np.ndarray:
    """Clip the global parameters to norm ``rho`` then add Gaussian(0, sigma^2) noise."""
    if not rho > 0 or sigma < 0:
        raise ContractViolation("CRFL needs rho > 0 and sigma >= 0")
    w = np.asarray(aggregated, dtype=np.float64)
    norm = np.linalg.norm(w)
    if norm > rho:
        w = w * (rho / norm)
    if sigma > 0:
        w = w + sigma * rng.generator().standard_normal(w.shape)
    return as_vector(w)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (threshold bisection, then exact refit)."""
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min() - 1.0, v.max()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.maximum(v - mid, 0.0).sum() > 1.0:
            lo = mid
        else:
            hi = mid
    active = v > hi
    if not active.any():
        active = v >= v.max()
    tau = (math.fsum(v[active]) - 1.0) / active.sum()
    return np.maximum(v - tau, 0.0)


def afl_reweight(state: AggregatorState, per_client_losses, gamma: float = 0.01, step: float = 0.1) -> np.ndarray:
    losses = np.asarray(per_client_losses, dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        raise ContractViolation("AFL losses must be finite")
    if not step > 0:
        raise ContractViolation("AFL step must be positive")
    lam = state.afl_weights
    if lam is None:
        lam = np.full(losses.size, 1.0 / losses.size)
    state.afl_weights = project_simplex(lam + step * (losses - gamma * lam))
    return state.afl_weights
