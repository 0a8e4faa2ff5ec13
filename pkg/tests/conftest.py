from __future__ import annotations

import os

import pytest

from hindsight import kernels


@pytest.fixture(scope="session", autouse=True)
def _compiled_kernels():
    kernels.warm_up()


@pytest.fixture
def run_dir(tmp_path):
    d = tmp_path / "runs"
    d.mkdir()
    return d


def cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover
        return os.cpu_count() or 1
