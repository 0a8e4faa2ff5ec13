"""Compare the numba and numpy backends of the hot kernels.

    python benchmarks/bench_kernels.py [--size 4096] [--repeats 20]

Both variants are imported directly, so the backend flag does not matter
here.  Results are also checked for bit equality.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from hindsight import kernels


def _sgd_case(fn, size: int):
    rng = np.random.default_rng(0)
    w0, x, y = rng.standard_normal(size), rng.standard_normal(size), rng.standard_normal(size)

    def run():
        w, m = w0.copy(), np.zeros(size)
        for _ in range(10):
            fn(w, m, x, y, 0.01, 0.9)
        return w

    return run


def _burn_case(fn, size: int):
    a, b = np.full(size, 0.5), np.full(size, 0.25)
    return lambda: fn(a, b, 50)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=4096)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args(argv)

    kernels.sgd_momentum_step_numba(np.zeros(2), np.zeros(2), np.ones(2), np.ones(2), 0.1, 0.9)
    kernels.burn_numba(np.zeros(2), np.zeros(2), 1)

    cases = [
        ("sgd_momentum_step x10", _sgd_case, kernels.sgd_momentum_step_numba, kernels.sgd_momentum_step_numpy),
        ("burn 50 rounds", _burn_case, kernels.burn_numba, kernels.burn_numpy),
    ]
    print(f"{'kernel':<24}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  identical")
    for name, make, fast, slow in cases:
        run_fast, run_slow = make(fast, args.size), make(slow, args.size)
        t_fast = min(timeit.repeat(run_fast, number=1, repeat=args.repeats))
        t_slow = min(timeit.repeat(run_slow, number=1, repeat=args.repeats))
        same = np.array_equal(np.asarray(run_fast()), np.asarray(run_slow()))
        print(f"{name:<24}{1e3 * t_fast:>10.3f}{1e3 * t_slow:>10.3f}{t_slow / t_fast:>8.1f}x  {same}")


if __name__ == "__main__":
    main()
