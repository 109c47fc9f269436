"""Backend switch for the hot loops.

Kernels are compiled with numba when it is importable, unless the
environment variable ``FPSOLVE_DISABLE_NUMBA`` is set to a truthy value, in
which case the pure-numpy implementations in :mod:`fpsolve._kernels` are used.
The flag is read once at import time.
"""
import os

_FLAG = os.environ.get("FPSOLVE_DISABLE_NUMBA", "").strip().lower()
NUMBA_REQUESTED = _FLAG not in ("1", "true", "yes", "on")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and NUMBA_REQUESTED
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(func):
    """Compile ``func`` in nopython mode when numba is usable.

    On the numpy backend the function is returned unchanged, so model
    callables written against this decorator run under plain numpy.
    """
    if USE_NUMBA:
        return numba.njit(cache=True)(func)
    return func


def is_compiled(func):
    return HAVE_NUMBA and isinstance(func, numba.core.registry.CPUDispatcher)
