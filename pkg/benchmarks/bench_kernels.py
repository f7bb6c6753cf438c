#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallbacks.

Shapes mirror the package's real hot paths: the two convolution layers of the
digit model at training batch size, their pooling stages, and the k-NN
distance scan of a full board against a large embedding index.

Run:  python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from semilex import _kernels as K


def timeit(fn, *args, repeats=5):
    fn(*args)  # warmup (and JIT compile on the numba side)
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if not K.NUMBA_ENABLED:
        raise SystemExit(
            "numba backend is disabled (SEMILEX_NUMBA=0 or numba missing); "
            "nothing to compare; rerun with the numba backend available."
        )

    rng = np.random.default_rng(0)
    x1 = rng.uniform(size=(64, 1, 28, 28))
    w1 = rng.normal(size=(8, 1, 3, 3))
    b1 = rng.normal(size=8)
    d1 = rng.normal(size=(64, 8, 26, 26))
    x2 = rng.uniform(size=(64, 8, 13, 13))
    w2 = rng.normal(size=(16, 8, 3, 3))
    b2 = rng.normal(size=16)
    d2 = rng.normal(size=(64, 16, 11, 11))
    pool_in = rng.normal(size=(64, 8, 26, 26))
    pool_out, pool_idx = K._maxpool2_forward_np(pool_in)
    queries = rng.normal(size=(81, 128))
    entries = rng.normal(size=(60_000, 128))

    cases = [
        ("conv1 forward  (64x1x28x28 * 8f)", K._conv2d_forward_nb, K._conv2d_forward_np,
         (x1, w1, b1)),
        ("conv2 forward  (64x8x13x13 * 16f)", K._conv2d_forward_nb, K._conv2d_forward_np,
         (x2, w2, b2)),
        ("conv1 backward", K._conv2d_backward_nb, K._conv2d_backward_np, (x1, w1, d1)),
        ("conv2 backward", K._conv2d_backward_nb, K._conv2d_backward_np, (x2, w2, d2)),
        ("maxpool forward (64x8x26x26)", K._maxpool2_forward_nb, K._maxpool2_forward_np,
         (pool_in,)),
        ("maxpool backward", K._maxpool2_backward_nb, K._maxpool2_backward_np,
         (pool_out, pool_idx, 26, 26)),
        ("knn sqdist (81 x 60k x 128)", K._pairwise_sqdist_nb, K._pairwise_sqdist_np,
         (queries, entries)),
    ]

    print(f"{'kernel':38} {'numba':>10} {'numpy':>10} {'speedup':>8}")
    print("-" * 70)
    for name, nb_fn, np_fn, inputs in cases:
        t_nb = timeit(nb_fn, *inputs, repeats=args.repeats)
        t_np = timeit(np_fn, *inputs, repeats=args.repeats)
        print(f"{name:38} {t_nb * 1e3:8.2f}ms {t_np * 1e3:8.2f}ms "
              f"{t_np / t_nb:7.2f}x")


if __name__ == "__main__":
    main()
