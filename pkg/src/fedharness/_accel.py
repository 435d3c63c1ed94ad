"""Numba switch.

Set ``FEDHARNESS_NO_NUMBA=1`` to force the pure-numpy kernels.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("FEDHARNESS_NO_NUMBA", "0") not in ("1", "true", "yes")


def njit(func):
    """Compile ``func`` with numba when available, else return it untouched."""
    if HAVE_NUMBA:
        return numba.njit(cache=True, fastmath=False)(func)
    return func
