"""Benchmark the compiled ray-accumulation kernel against the NumPy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""
import argparse
import time

import numpy as np

from beamweaver._kernels import HAVE_COMPILED, ray_sum_compiled, ray_sum_numpy


def _inputs(rng, n_rays, k_sub, n_rx, n_t):
    phase = rng.standard_normal((n_rays, k_sub)) + 1j * rng.standard_normal((n_rays, k_sub))
    a_rx = rng.standard_normal((n_rays, n_rx)) + 1j * rng.standard_normal((n_rays, n_rx))
    tx = rng.standard_normal((n_rays, n_t)) + 1j * rng.standard_normal((n_rays, n_t))
    return phase, a_rx, tx


def _time(fn, args, out_shape, repeats):
    best = np.inf
    for _ in range(repeats):
        out = np.zeros(out_shape, dtype=np.complex128)
        t0 = time.perf_counter()
        fn(*args, out)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    shapes = [  # (rays, K, N_R, NT): small SSB sweep up to dense macro cell
        (30, 16, 2, 32),
        (50, 16, 4, 128),
        (150, 64, 4, 128),
        (500, 64, 8, 256),
    ]
    print(f"compiled kernel available: {HAVE_COMPILED}")
    print(f"{'rays':>5} {'K':>4} {'N_R':>4} {'NT':>4} "
          f"{'numpy [ms]':>11} {'compiled [ms]':>14} {'speedup':>8}")
    for r, k, nr, nt in shapes:
        inp = _inputs(rng, r, k, nr, nt)
        t_np = _time(ray_sum_numpy, inp, (k, nr, nt), args.repeats)
        if HAVE_COMPILED:
            t_cy = _time(ray_sum_compiled, inp, (k, nr, nt), args.repeats)
            print(f"{r:>5} {k:>4} {nr:>4} {nt:>4} {t_np * 1e3:>11.3f} "
                  f"{t_cy * 1e3:>14.3f} {t_np / t_cy:>7.2f}x")
        else:
            print(f"{r:>5} {k:>4} {nr:>4} {nt:>4} {t_np * 1e3:>11.3f} "
                  f"{'-':>14} {'-':>8}")


if __name__ == "__main__":
    main()
