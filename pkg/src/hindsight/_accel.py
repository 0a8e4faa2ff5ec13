"""numba switch.

Hot kernels are written twice: a numba ``@njit`` version and a plain numpy
version.  Setting ``HINDSIGHT_DISABLE_NUMBA=1`` (or running without numba
installed) selects the numpy path for the whole process.  The flag is read
once, at import time.
"""

from __future__ import annotations

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

ENV_FLAG = "HINDSIGHT_DISABLE_NUMBA"

_TRUTHY = {"1", "true", "yes", "on"}


def numba_available() -> bool:
    return numba is not None


def numba_requested() -> bool:
    return os.environ.get(ENV_FLAG, "").strip().lower() not in _TRUTHY


USE_NUMBA = numba_available() and numba_requested()


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise.

    Compilation is lazy, so decorating costs nothing when the numpy path is
    selected.
    """
    if numba is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
