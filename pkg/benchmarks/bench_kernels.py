"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes match a local step (batch 64, d 16, 10 classes, 32 hidden) and a
ten-client distance matrix over flattened MLP updates. The last column is
a full 30-round default scenario under whichever backend the env selects.
"""

import argparse
import time

import numpy as np

from fedharness import _kernels
from fedharness.catalog import get_scenario
from fedharness.engine import simulate


def best_of(fn, args, repeat):
    fn(*args)  # warm-up, includes jit compile
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    gen = np.random.default_rng(0)
    d, C, H, n = 16, 10, 32, 64
    X = gen.standard_normal((n, d))
    y = gen.integers(0, C, n).astype(np.int64)
    p_log = gen.standard_normal((d + 1) * C)
    p_mlp = gen.standard_normal((d + 1) * H + (H + 1) * C)
    U = gen.standard_normal((10, p_mlp.size))

    cases = [
        ("logistic loss+grad", _kernels.logistic_loss_grad_np, _kernels.logistic_loss_grad_jit, (p_log, X, y, C)),
        ("mlp loss+grad", _kernels.mlp_loss_grad_np, _kernels.mlp_loss_grad_jit, (p_mlp, X, y, H, C)),
        ("pairwise sq dists", _kernels.pairwise_sq_dists_np, _kernels.pairwise_sq_dists_jit, (U,)),
    ]
    print(f"{'kernel':<22s}{'numpy us':>12s}{'numba us':>12s}{'speedup':>10s}")
    for name, np_fn, jit_fn, fargs in cases:
        a = best_of(np_fn, fargs, args.repeat)
        b = best_of(jit_fn, fargs, args.repeat)
        print(f"{name:<22s}{a * 1e6:12.1f}{b * 1e6:12.1f}{a / b:10.2f}")

    t0 = time.perf_counter()
    simulate(get_scenario("label_skew_default"))
    print(f"label_skew_default, 30 rounds, backend {_kernels.BACKEND}: {time.perf_counter() - t0:.2f}s")


if __name__ == "__main__":
    main()
