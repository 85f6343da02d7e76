"""Numba switch.

Hot kernels are compiled with ``numba.njit`` unless the environment variable
``MORPHOSCOPE_NUMBA`` is set to ``0``/``false``/``no`` or numba cannot be
imported, in which case the pure-numpy implementations are used instead.
The flag is read once, at import time.
"""

import os

_FLAG = os.environ.get("MORPHOSCOPE_NUMBA", "1").strip().lower()

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "no", "off")


def njit(fn):
    """Compile ``fn`` in nopython mode when numba is present, else return it."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
