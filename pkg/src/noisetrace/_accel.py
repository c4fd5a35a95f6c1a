"""Optional numba acceleration.

Set ``NOISETRACE_DISABLE_NUMBA=1`` to force the pure-numpy kernels.
"""
import os

_DISABLED = os.environ.get("NOISETRACE_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("numba disabled by environment")
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:
    _njit = None
    HAVE_NUMBA = False


def njit(fn):
    """``numba.njit(cache=True)`` when available, otherwise the plain function."""
    if not HAVE_NUMBA:
        return fn
    return _njit(cache=True, nogil=True)(fn)


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
