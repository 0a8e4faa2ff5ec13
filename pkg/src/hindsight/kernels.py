"""Numeric kernels for the synthetic training workload.

Two kernels dominate the harness's runtime:

* ``sgd_momentum_step`` -- one in-place SGD-with-momentum update of a linear
  model on a single batch.  Both implementations perform the same IEEE
  operations element by element, so their results are bit-identical and a
  run recorded with one backend can be replayed with the other.
* ``burn`` -- the busy-work knob.  Repeated dot products whose result is
  returned but never fed back into the model, so the amount of burn does not
  change any logged value or state digest.

The module-level names dispatch to numba or numpy according to
:mod:`hindsight._accel`; the ``*_numba``/``*_numpy`` variants are always
available for tests and benchmarks.
"""

from __future__ import annotations

import time

import numpy as np

from . import _accel
from ._accel import njit


@njit(nogil=True, cache=True)
def sgd_momentum_step_numba(weights, momentum, x, y, lr, mu):
    for i in range(weights.shape[0]):
        grad = (weights[i] * x[i] - y[i]) * x[i]
        momentum[i] = mu * momentum[i] + grad
        weights[i] = weights[i] - lr * momentum[i]


def sgd_momentum_step_numpy(weights, momentum, x, y, lr, mu):
    grad = (weights * x - y) * x
    momentum *= mu
    momentum += grad
    weights -= lr * momentum


@njit(nogil=True, cache=True)
def burn_numba(a, b, rounds):
    acc = 0.0
    for _ in range(rounds):
        s = 0.0
        for i in range(a.shape[0]):
            s += a[i] * b[i]
        acc = 0.5 * acc + s
    return acc


def burn_numpy(a, b, rounds):
    acc = 0.0
    for _ in range(rounds):
        acc = 0.5 * acc + float(np.dot(a, b))
    return acc


if _accel.USE_NUMBA:
    sgd_momentum_step = sgd_momentum_step_numba
    burn = burn_numba
else:
    sgd_momentum_step = sgd_momentum_step_numpy
    burn = burn_numpy


def warm_up() -> None:
    """Force JIT compilation so it never lands inside a timed region."""
    w = np.zeros(4)
    m = np.zeros(4)
    x = np.ones(4)
    sgd_momentum_step(w, m, x, x, 0.1, 0.9)
    burn(w, x, 1)


_calibration_cache: dict[tuple[str, int], float] = {}


def seconds_per_burn_round(size: int, *, probe_seconds: float = 0.05) -> float:
    """Measured cost of one ``burn`` round over vectors of ``size`` elements.

    Cached per (backend, size) for the life of the process.
    """
    key = (_accel.backend_name(), int(size))
    if key in _calibration_cache:
        return _calibration_cache[key]
    warm_up()
    a = np.full(max(int(size), 1), 0.5)
    b = np.full(max(int(size), 1), 0.25)
    rounds = 1
    while True:
        t0 = time.perf_counter()
        burn(a, b, rounds)
        elapsed = time.perf_counter() - t0
        if elapsed >= probe_seconds or rounds >= 1 << 24:
            break
        rounds *= 2
    # best of three at the final round count
    best = elapsed
    for _ in range(2):
        t0 = time.perf_counter()
        burn(a, b, rounds)
        best = min(best, time.perf_counter() - t0)
    per_round = best / rounds
    _calibration_cache[key] = per_round
    return per_round


def calibrate_work_units(size: int, steps_per_epoch: int, compute_cost: float) -> int:
    """Burn rounds per step so that one epoch takes about ``compute_cost`` s."""
    if compute_cost <= 0 or steps_per_epoch <= 0:
        return 0
    per_round = seconds_per_burn_round(size)
    return max(0, int(round(compute_cost / steps_per_epoch / per_round)))
