"""Numba switch.

Set ``SUBTREE_DISABLE_JIT=1`` to run every kernel through its pure-numpy
implementation. The flag is read once, at import time.
"""
import os

_FLAG = os.environ.get("SUBTREE_DISABLE_JIT", "").strip().lower()
DISABLED = _FLAG not in ("", "0", "false", "no")

HAVE_NUMBA = False
if not DISABLED:
    try:
        from numba import njit as _njit

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        pass


def njit(func):
    """Compile ``func`` in nopython mode, or return it untouched."""
    if not HAVE_NUMBA:
        return func
    return _njit(cache=True)(func)
