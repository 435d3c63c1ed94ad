"""Built-in invariant and oracle suite behind ``fedharness verify``.

Every check compares the library against an independent reference (finite
differences, brute force, sorting, grid search) or against an identity
that must hold exactly. Each returns ``(passed, detail)``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats

from . import _kernels
from .aggregate import bulyan_rows, krum_select, project_simplex, trimmed_rows, weiszfeld
from .attack import AttackSpec, craft_malicious
from .core import RngStream, exact_weighted_sum
from .data import FlipSpec, PartitionSpec, SyntheticSpec, apply_flip, dirichlet_partition
from .engine import EvalConfig, ExperimentConfig, simulate
from .metrics import leave_one_out, shapley_exact
from .model import Batch, ModelSpec, init_params, loss_and_grad


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


# -- references ---------------------------------------------------------------------

def fd_gradient(loss_fn: Callable[[np.ndarray], float], params: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.empty_like(params)
    for k in range(params.size):
        e = np.zeros_like(params)
        e[k] = h
        g[k] = (loss_fn(params + e) - loss_fn(params - e)) / (2 * h)
    return g


def ref_krum_select(V: np.ndarray, f: int, top_k: int) -> list[int]:
    n = V.shape[0]
    m = n - f - 2
    scores = []
    for i in range(n):
        d = sorted(float(np.sum((V[i] - V[j]) ** 2)) for j in range(n) if j != i)
        scores.append(sum(d[:m]))
    return sorted(range(n), key=lambda i: (scores[i], i))[:top_k]


def ref_bulyan(V: np.ndarray, f: int) -> np.ndarray:
    n, d = V.shape
    pool = list(range(n))
    picked = []
    for _ in range(n - 2 * f):
        m = max(len(pool) - f - 2, 1)
        best, best_score = None, math.inf
        for i in pool:
            dist = sorted(float(np.sum((V[i] - V[j]) ** 2)) for j in pool if j != i)
            s = sum(dist[:m])
            if s < best_score:
                best, best_score = i, s
        picked.append(best)
        pool.remove(best)
    S = V[sorted(picked)]
    beta = len(picked) - 2 * f
    out = np.empty(d)
    for k in range(d):
        col = S[:, k]
        med = float(np.median(col))
        order = sorted(range(len(col)), key=lambda r: (abs(col[r] - med), r))[:beta]
        out[k] = math.fsum(col[r] for r in order) / beta
    return out


def ref_trimmed_mean(V: np.ndarray, frac: float) -> np.ndarray:
    n = V.shape[0]
    k = int(math.floor(frac * n))
    return np.array([math.fsum(sorted(V[:, j])[k:n - k]) / (n - 2 * k) for j in range(V.shape[1])])


def ref_median(V: np.ndarray) -> np.ndarray:
    n = V.shape[0]
    out = []
    for j in range(V.shape[1]):
        s = sorted(V[:, j])
        out.append(s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2)
    return np.array(out)


def ref_simplex(v: np.ndarray) -> np.ndarray:
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u * k > css - 1)[0][-1]
    tau = (css[rho] - 1) / (rho + 1)
    return np.maximum(v - tau, 0)


def geomedian_objective(V: np.ndarray, w: np.ndarray, z: np.ndarray) -> float:
    return float(np.sum(w * np.sqrt(((V - z) ** 2).sum(axis=1))))


def ref_grid_geomedian(V: np.ndarray, w: np.ndarray, levels: int = 6, size: int = 41) -> float:
    """Best objective over successively refined 2-D grids."""
    lo, hi = V.min(axis=0), V.max(axis=0)
    best_z = (lo + hi) / 2
    span = (hi - lo).max()
    for _ in range(levels):
        xs = np.linspace(best_z[0] - span / 2, best_z[0] + span / 2, size)
        ys = np.linspace(best_z[1] - span / 2, best_z[1] + span / 2, size)
        best = math.inf
        for x in xs:
            for y in ys:
                val = geomedian_objective(V, w, np.array([x, y]))
                if val < best:
                    best, best_z = val, np.array([x, y])
        span *= 4.0 / size
    return best


# -- checks -------------------------------------------------------------------------

def check_gradients(kind: str, instances: int = 20, gradient_fault: float = 0.0, seed: int = 11):
    """Analytic vs central-difference gradient, max relative error over random instances."""
    gen = np.random.default_rng(seed)
    worst = 0.0
    for t in range(instances):
        spec = ModelSpec(kind=kind, input_dim=int(gen.integers(2, 7)), num_classes=int(gen.integers(2, 6)),
                         hidden_dim=int(gen.integers(2, 6)))
        p = init_params(spec, RngStream(seed).derive("grad", t)) + 0.1 * gen.standard_normal(spec.num_params)
        n = int(gen.integers(1, 9))
        batch = Batch(gen.standard_normal((n, spec.input_dim)), gen.integers(0, spec.num_classes, n))
        _, g = loss_and_grad(spec, p, batch)
        g = g + gradient_fault * np.ones_like(g)
        g_fd = fd_gradient(lambda q: loss_and_grad(spec, q, batch)[0], np.array(p))
        err = np.linalg.norm(g - g_fd) / max(np.linalg.norm(g), np.linalg.norm(g_fd), 1e-12)
        worst = max(worst, float(err))
    return worst <= 1e-5, f"max relative error {worst:.2e} over {instances} instances"


def check_flip_matrix(per_class: int = 100_000, C: int = 10, eps: float = 0.5, seed: int = 3):
    """Empirical symmetric-flip transition matrix from ``per_class`` draws of every source class."""
    n = per_class * C
    labels = np.arange(n) % C
    flipped, _ = apply_flip(labels, FlipSpec("symmetric", eps), RngStream(seed).derive("flip"), C)
    M = np.zeros((C, C))
    np.add.at(M, (labels, flipped), 1)
    rows = M / M.sum(axis=1, keepdims=True)
    stay = float(np.trace(M) / n)
    off = rows[~np.eye(C, dtype=bool)]
    expected = np.where(np.eye(C, dtype=bool), 1 - eps, eps / (C - 1)) * M.sum(axis=1, keepdims=True)
    p = float(stats.chi2.sf(((M - expected) ** 2 / expected).sum(), C * (C - 1)))
    ok = abs(stay - (1 - eps)) <= 0.01 and np.all(np.abs(off - eps / (C - 1)) <= 0.005) and p > 0.001
    return ok, f"stay {stay:.4f}, off-diagonal in [{off.min():.4f}, {off.max():.4f}], chi-square p {p:.3g}"


def check_trimmed(instances: int = 200, seed: int = 5):
    gen = np.random.default_rng(seed)
    for _ in range(instances):
        n, d = int(gen.integers(1, 12)), int(gen.integers(1, 6))
        V = gen.standard_normal((n, d)) * gen.choice([1e-3, 1.0, 1e3])
        frac = float(gen.uniform(0, 0.49))
        if n - 2 * math.floor(frac * n) < 1:
            continue
        if not np.array_equal(trimmed_rows(V, frac, "mean"), ref_trimmed_mean(V, frac)):
            return False, f"trimmed mean mismatch at n={n}, frac={frac}"
        if not np.array_equal(trimmed_rows(V, frac, "median"), ref_median(V)):
            return False, f"median mismatch at n={n}"
    return True, f"{instances} instances exact"


def check_krum(instances: int = 100, seed: int = 6):
    gen = np.random.default_rng(seed)
    for _ in range(instances):
        n = int(gen.integers(4, 12))
        f = int(gen.integers(0, n - 2))
        top_k = int(gen.integers(1, n - f + 1))
        V = gen.standard_normal((n, int(gen.integers(1, 5))))
        if list(krum_select(V, f, top_k)) != ref_krum_select(V, f, top_k):
            return False, f"selection mismatch at n={n}, f={f}, k={top_k}"
    return True, f"{instances} instances match brute force"


def check_bulyan(instances: int = 50, seed: int = 7):
    gen = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        f = int(gen.integers(0, 3))
        n = 4 * f + 3 + int(gen.integers(0, 3))
        V = gen.standard_normal((n, int(gen.integers(1, 4))))
        worst = max(worst, float(np.abs(bulyan_rows(V, f) - ref_bulyan(V, f)).max()))
    return worst <= 1e-12, f"max deviation {worst:.1e} over {instances} instances"


def check_rfa(instances: int = 20, seed: int = 8):
    gen = np.random.default_rng(seed)
    worst = -math.inf
    for _ in range(instances):
        n = int(gen.integers(3, 9))
        V = gen.uniform(-1, 1, (n, 2))
        w = gen.uniform(0.1, 1.0, n)
        w = w / w.sum()
        z = weiszfeld(V, w, iters=200, smoothing=1e-10)
        gap = geomedian_objective(V, w, z) - ref_grid_geomedian(V, w)
        worst = max(worst, gap)
    return worst <= 1e-4, f"worst objective gap to grid optimum {worst:.2e}"


def check_simplex(instances: int = 100, seed: int = 9):
    gen = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        v = gen.standard_normal(int(gen.integers(1, 12))) * gen.choice([0.1, 1.0, 10.0])
        worst = max(worst, float(np.abs(project_simplex(v) - ref_simplex(v)).max()))
    return worst <= 1e-12, f"max deviation {worst:.1e}"


def check_shapley(seed: int = 10):
    gen = np.random.default_rng(seed)
    worst = 0.0
    for M in range(1, 7):
        table = {}
        null = int(gen.integers(0, M))

        def v(S, table=table, null=null):
            key = frozenset(S) - {null}
            if key not in table:
                table[key] = float(gen.uniform()) if key else 0.25
            return table[key]

        rho = float(gen.uniform(0.5, 2.0))
        nu = shapley_exact(v, M, rho)
        worst = max(worst, abs(math.fsum(nu) - rho * (v(frozenset(range(M))) - v(frozenset()))))
        if nu[null] != 0.0:
            return False, f"null player {null} got {nu[null]!r} at M={M}"
    return worst <= 1e-9, f"efficiency gap {worst:.1e}, null players exactly 0"


def check_leave_one_out(instances: int = 50, seed: int = 12):
    gen = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        M = int(gen.integers(2, 9))
        a = gen.uniform(0.1, 1.0, M)
        a /= a.sum()
        W = gen.standard_normal((M, 5))
        w = exact_weighted_sum(W, a)
        i = int(gen.integers(0, M))
        keep = [j for j in range(M) if j != i]
        direct = exact_weighted_sum(W[keep], a[keep] / a[keep].sum())
        got = leave_one_out(w, W[i], a[i])
        worst = max(worst, float(np.linalg.norm(got - direct) / max(np.linalg.norm(direct), 1e-300)))
    return worst <= 1e-10, f"max relative error {worst:.1e}"


def check_partition_cover(seed: int = 13):
    labels = np.repeat(np.arange(10), 100)
    for beta in (0.1, 0.5, 100.0):
        parts = dirichlet_partition(labels, PartitionSpec(10, beta, 5), RngStream(seed).derive("p", int(beta * 10)))
        joined = np.sort(np.concatenate(parts))
        if not np.array_equal(joined, np.arange(labels.size)):
            return False, f"partition at beta={beta} is not a disjoint cover"
    return True, "every index assigned exactly once"


def check_attack_isolation(seed: int = 14):
    gen = np.random.default_rng(seed)
    benign = [gen.standard_normal(8) for _ in range(5)]
    for kind in ("random_noise", "lie", "min_max", "min_sum"):
        out = craft_malicious(AttackSpec(kind=kind, evil_fraction=0.0), benign, 8, (), RngStream(seed))
        if out:
            return False, f"{kind} crafted updates with no evil clients"
    return True, "no crafted updates when evil fraction is 0"


def check_kernels(seed: int = 15):
    if not _kernels.BACKEND == "numba" and not _accel_available():
        return True, "numba unavailable, numpy kernels only"
    gen = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        d, C, H, n = 5, 4, 3, 7
        X = gen.standard_normal((n, d))
        y = gen.integers(0, C, n).astype(np.int64)
        p = gen.standard_normal((d + 1) * C)
        a = _kernels.logistic_loss_grad_np(p, X, y, C)[1]
        b = _kernels.logistic_loss_grad_jit(p, X, y, C)[1]
        q = gen.standard_normal((d + 1) * H + (H + 1) * C)
        c = _kernels.mlp_loss_grad_np(q, X, y, H, C)[1]
        e = _kernels.mlp_loss_grad_jit(q, X, y, H, C)[1]
        worst = max(worst, float(np.abs(a - b).max()), float(np.abs(c - e).max()))
    return worst <= 1e-12, f"numba vs numpy max deviation {worst:.1e}"


def _accel_available() -> bool:
    from ._accel import HAVE_NUMBA

    return HAVE_NUMBA


def check_determinism(seed: int = 16):
    cfg = ExperimentConfig(rounds=2, eval_every=1, master_seed=seed,
                           data=SyntheticSpec(samples_per_class=60), eval=EvalConfig(200, 200),
                           partition=PartitionSpec(6, 0.5, 5))
    a = simulate(cfg, workers=1)
    b = simulate(cfg, workers=3)
    same = a.per_round == b.per_round and a.state.global_params.tobytes() == b.state.global_params.tobytes()
    return same, "1 vs 3 workers bit-identical" if same else "worker count changed the result"


CHECKS = (
    ("gradient_logistic", lambda fault: check_gradients("logistic", gradient_fault=fault)),
    ("gradient_mlp", lambda fault: check_gradients("mlp1", gradient_fault=fault)),
    ("flip_matrix", lambda fault: check_flip_matrix()),
    ("trimmed_oracle", lambda fault: check_trimmed()),
    ("krum_brute_force", lambda fault: check_krum()),
    ("bulyan_reference", lambda fault: check_bulyan()),
    ("rfa_grid_optimum", lambda fault: check_rfa()),
    ("simplex_projection", lambda fault: check_simplex()),
    ("shapley_identities", lambda fault: check_shapley()),
    ("leave_one_out_identity", lambda fault: check_leave_one_out()),
    ("partition_cover", lambda fault: check_partition_cover()),
    ("attack_isolation", lambda fault: check_attack_isolation()),
    ("kernel_backends_agree", lambda fault: check_kernels()),
    ("determinism_replay", lambda fault: check_determinism()),
)


def run_suite(gradient_fault: float = 0.0, report: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    """Run every check. ``gradient_fault`` is added to analytic gradients to prove the check bites."""
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn(gradient_fault)
        except Exception as exc:  # a crash is a failed property, not a crashed suite
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        res = CheckResult(name, bool(ok), detail, time.perf_counter() - t0)
        results.append(res)
        if report is not None:
            report(res)
    return results
