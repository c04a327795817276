"""Backend selection for the numeric kernels.

The table and series kernels exist twice: a numba ``@njit`` version with
scalar loops, and a vectorised pure-numpy version. ``CAPSPHERE_BACKEND``
(``numba`` or ``numpy``) picks one at import time; ``set_backend`` switches
at runtime for tests and benchmarks.
"""

import os
import warnings

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is the optional "accel" extra
    numba = None
    HAVE_NUMBA = False

_VALID = ("numba", "numpy")


def _initial_backend():
    requested = os.environ.get("CAPSPHERE_BACKEND", "").strip().lower()
    if requested and requested not in _VALID:
        raise ValueError(f"CAPSPHERE_BACKEND must be one of {_VALID}, got {requested!r}")
    if requested == "numpy" or not HAVE_NUMBA:
        return "numpy"
    return "numba"


_backend = _initial_backend()


def get_backend():
    return _backend


def set_backend(name):
    global _backend
    if name not in _VALID:
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _backend = name


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def set_threads(n):
    if HAVE_NUMBA and n:
        with warnings.catch_warnings():
            # threading-layer probing complains about old TBB builds it then skips
            warnings.simplefilter("ignore", numba.NumbaWarning)
            numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
