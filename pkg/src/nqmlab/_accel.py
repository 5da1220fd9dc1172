"""Numba switch.

Set ``NQMLAB_DISABLE_NUMBA=1`` to force the pure-numpy code paths (useful for
debugging and for the parity benchmark). When numba is missing the numpy
paths are used automatically.
"""

import os

_FALSY = {"", "0", "false", "no", "off"}

try:
    from numba import njit as _numba_njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba ships with the test image
    NUMBA_AVAILABLE = False
    _numba_njit = None


def _env_disabled():
    return os.environ.get("NQMLAB_DISABLE_NUMBA", "0").strip().lower() not in _FALSY


USE_NUMBA = NUMBA_AVAILABLE and not _env_disabled()


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity decorator otherwise.

    Compilation is always lazy, so importing the package never triggers a JIT.
    """
    if not NUMBA_AVAILABLE:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda func: func
    kwargs.setdefault("cache", True)
    return _numba_njit(*args, **kwargs)
