"""Kernel dispatch: every public name forwards to the active backend."""

import numpy as np

from capsphere import _accel
from capsphere.kernels import numpy_kernels

if _accel.HAVE_NUMBA:
    from capsphere.kernels import numba_kernels
else:  # pragma: no cover
    numba_kernels = numpy_kernels


def _impl():
    return numba_kernels if _accel.get_backend() == "numba" else numpy_kernels


def _arr(x):
    return np.ascontiguousarray(np.atleast_1d(np.asarray(x, dtype=float)))


def jn_table(nmax, x):
    return _impl().jn_table(int(nmax), _arr(x))


def yn_table(nmax, x):
    return _impl().yn_table(int(nmax), _arr(x))


def rho_table(nmax, x):
    return _impl().rho_table(int(nmax), _arr(x))


def hankel_quotient_table(nmax, a, b):
    a, b = np.broadcast_arrays(_arr(a), _arr(b))
    return _impl().hankel_quotient_table(int(nmax), np.ascontiguousarray(a), np.ascontiguousarray(b))


def legendre_table(nmax, t):
    return _impl().legendre_table(int(nmax), _arr(t))


def cap_geometry_sums(alpha, s, nb, npref):
    return _impl().cap_geometry_sums(float(alpha), float(s), int(nb), int(npref))
