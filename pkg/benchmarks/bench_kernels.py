"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--rows 20000] [--repeat 5]

Prints the best-of-repeat wall time per kernel and backend, and the largest
absolute difference between the two outputs.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from mftlab import _pykernels

try:
    from mftlab import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _cases(rows: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    m = 3
    G = rng.standard_normal((m, m))
    R = G @ G.T + m * np.eye(m)
    V = 2.0 * rng.standard_normal((rows, m))
    lo, hi = -np.ones(m), np.ones(m)
    n, L = 2, 3
    x = rng.standard_normal((rows, n))
    node = rng.integers(0, L, rows).astype(np.int64)
    A = rng.standard_normal((L, n, n))
    C = rng.standard_normal((n, n))
    drift = rng.standard_normal((rows, n))
    diff = rng.standard_normal((rows, n))
    dw = 0.1 * rng.standard_normal(rows)
    return {
        "project_box_batch": (V, R, lo, hi),
        "euler_step": (x, node, A, C, drift, diff, 0.01, dw),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    cases = _cases(args.rows)
    print(f"rows={args.rows}  repeat={args.repeat}")
    print(f"{'kernel':<20}{'python [ms]':>14}{'cython [ms]':>14}{'speedup':>10}{'max |diff|':>14}")
    for name, a in cases.items():
        py = getattr(_pykernels, name)
        t_py = min(timeit.repeat(lambda: py(*a), number=1, repeat=args.repeat))
        if _ckernels is None:
            print(f"{name:<20}{t_py * 1e3:>14.2f}{'n/a':>14}{'':>10}{'':>14}")
            continue
        cy = getattr(_ckernels, name)
        t_cy = min(timeit.repeat(lambda: cy(*a), number=1, repeat=args.repeat))
        diff = float(np.max(np.abs(np.asarray(py(*a)) - np.asarray(cy(*a)))))
        print(f"{name:<20}{t_py * 1e3:>14.2f}{t_cy * 1e3:>14.2f}{t_py / t_cy:>10.1f}{diff:>14.2e}")


if __name__ == "__main__":
    main()
