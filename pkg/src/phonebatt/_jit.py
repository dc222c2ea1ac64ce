"""Numba switch for the hot kernels.

Set ``PHONEBATT_NO_NUMBA=1`` before import to run every kernel as plain
Python (same source, same floating-point operations).  Useful for debugging
and for the speed comparison in ``benchmarks/``.
"""
import os

_disabled = os.environ.get("PHONEBATT_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError
    import numba

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


numba_default = {
    "nopython": True,
    "nogil": True,
    "cache": True,
    "fastmath": False,
    "error_model": "numpy",
}


def njit(fn=None, **overrides):
    """``numba.njit`` with package defaults, or the identity when disabled."""

    def wrap(f):
        if not HAS_NUMBA:
            return f
        opts = dict(numba_default)
        opts.update(overrides)
        opts.pop("nopython", None)
        return numba.njit(**opts)(f)

    if fn is None:
        return wrap
    return wrap(fn)
