"""Kernel backend selection.

Hot loops have two implementations: a numba ``@njit`` kernel and a vectorised
numpy fallback. The numba path is used when numba imports and the
``MUSIC_NUMBA`` environment variable is not set to a false value
(``0``, ``false``, ``no``, ``off``). The flag is read once at import.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_OFF = {"0", "false", "no", "off"}

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("MUSIC_NUMBA", "1").strip().lower() not in _OFF


def njit(fn):
    """Compile ``fn`` with numba when available; otherwise return it unchanged."""
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def pick(numba_impl, numpy_impl):
    """Return the kernel for the active backend."""
    return numba_impl if USE_NUMBA else numpy_impl


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
