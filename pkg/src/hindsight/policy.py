"""Adaptive periodic checkpointing rule.

All times here are per unit: ``mat`` is the time to materialize one
checkpoint of a block, ``restore`` the time to restore one, and ``compute``
the time of one execution of the block.  ``n`` counts executions so far and
``k`` checkpoints so far.

* record overhead:   mat/compute < n*eps/k
* replay latency:    mat + restore + (n/G - 1)*compute < n*compute
* G-free latency:    mat/compute < n/(k*(1+c))          (restore = c*mat)
* joint (record):    mat/compute < n/(k+1) * min(1/(1+c), eps)

Every threshold is computed through :func:`_bound` so that the joint test
agrees bit-for-bit with the conjunction of the two invariants it combines.
All comparisons are strict; ties never checkpoint.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

DEFAULT_EPSILON = 0.0667
DEFAULT_C = 1.0
# average restore/materialize ratio observed on reference workloads
REPORTED_C = 1.38


@dataclass(frozen=True)
class PolicyParams:
    epsilon: float = DEFAULT_EPSILON
    c: float = DEFAULT_C
    g_assumed: int = 2

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if not self.c > 0.0:
            raise ValueError(f"c must be positive, got {self.c}")
        if self.g_assumed < 2:
            raise ValueError(f"g_assumed must be at least 2, got {self.g_assumed}")

    @property
    def threshold(self) -> float:
        return threshold_factor(self.c, self.epsilon)


def threshold_factor(c: float, epsilon: float) -> float:
    return min(_latency_factor(c), epsilon)


def _latency_factor(c: float) -> float:
    return 1.0 / (1.0 + c)


def _bound(n: int, k: int, factor: float) -> float:
    return n / k * factor


def _check(compute: float, n: int) -> None:
    if not compute > 0.0:
        raise ValueError(f"compute time must be positive, got {compute}")
    if n < 1:
        raise ValueError(f"need at least one execution, got n={n}")


def record_overhead_ok(mat: float, compute: float, n: int, k: int, epsilon: float) -> bool:
    _check(compute, n)
    if k == 0:
        return True
    return mat / compute < _bound(n, k, epsilon)


def replay_bound_ok(mat: float, compute: float, n: int, k: int, c: float) -> bool:
    """The G-free sufficient condition for the replay latency invariant."""
    _check(compute, n)
    if k == 0:
        return True
    return mat / compute < _bound(n, k, _latency_factor(c))


def replay_latency_ok(mat: float, restore: float, compute: float, n: int, g: int) -> bool:
    """Record-then-replay beats two plain executions at parallelism ``g``."""
    _check(compute, n)
    if g < 1:
        raise ValueError(f"parallelism must be at least 1, got {g}")
    return mat + restore + (n / g - 1) * compute < n * compute


def joint_should_materialize(mat_projected: float, compute: float, n: int, k: int, params: PolicyParams) -> bool:
    """Decide, after an execution and before materializing, whether to checkpoint.

    ``mat_projected`` is the expected per-checkpoint cost including the
    candidate checkpoint.
    """
    _check(compute, n)
    return mat_projected / compute < _bound(n, k + 1, params.threshold)


def update_scaling_factor(observed: Iterable[tuple[float, float]]) -> float:
    """Mean restore/materialize ratio over ``(mat, restore)`` observations.

    With nothing observed the naive assumption ``c = 1.0`` stands.
    """
    ratios = []
    for mat, restore in observed:
        if not mat > 0.0:
            raise ValueError(f"materialization time must be positive, got {mat}")
        ratios.append(restore / mat)
    if not ratios:
        return DEFAULT_C
    return sum(ratios) / len(ratios)
