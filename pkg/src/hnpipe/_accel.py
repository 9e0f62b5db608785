"""Numba switch.

Set ``HNPIPE_DISABLE_NUMBA=1`` to force the pure-numpy kernels, e.g. when
debugging or on platforms without llvmlite.
"""
import os

_disabled = os.environ.get("HNPIPE_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


BACKEND = "numba" if HAVE_NUMBA else "numpy"
