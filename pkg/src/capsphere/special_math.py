"""Spherical Bessel/Hankel and Legendre functions for real arguments.

``h2`` is the outgoing Hankel function of the second kind,
h_n^(2)(x) = j_n(x) - i y_n(x), consistent with an e^{+j omega t} time factor.

The order-1 associated Legendre function is returned *without* the
Condon-Shortley phase: P_n^1(x) = +sqrt(1 - x^2) P_n'(x).
"""

from dataclasses import dataclass
import math

import numpy as np

from capsphere import kernels
from capsphere.errors import DomainError, SingularArgumentError, StabilityError


@dataclass(frozen=True)
class TruncationPolicy:
    """Stopping rule for the modal series.

    A series is accepted at the first order n >= floor where the last
    ``consecutive_small`` terms each satisfy |t| < rel_tol * |partial sum|.
    """

    rel_tol: float = 1e-12
    min_terms: int = 8
    max_terms: int = 1000
    consecutive_small: int = 5

    def __post_init__(self):
        if not 0.0 < self.rel_tol < 1e-6:
            raise DomainError("rel_tol must lie in (0, 1e-6)")
        if self.min_terms < 2:
            raise DomainError("min_terms must be >= 2")
        if self.max_terms < self.min_terms:
            raise DomainError("max_terms must be >= min_terms")
        if self.consecutive_small < 1:
            raise DomainError("consecutive_small must be >= 1")

    def floor(self, x):
        """Minimum number of terms for a series whose decay sets in at n ~ x."""
        return min(self.max_terms, max(self.min_terms, int(math.ceil(x)) + 30))


DEFAULT_POLICY = TruncationPolicy()


def _check_order(n):
    if int(n) != n or n < 0:
        raise DomainError(f"order must be a non-negative integer, got {n}")
    return int(n)


def _check_positive(x):
    if not x > 0:
        raise SingularArgumentError(f"singular argument x={x}")
    return float(x)


def _finite(value, n, x):
    if not np.all(np.isfinite(value)):
        raise StabilityError(f"order/argument out of stable range (n={n}, x={x})")
    return value


def spherical_bessel_j(n, x):
    n = _check_order(n)
    if x < 0:
        raise DomainError("x must be >= 0")
    return float(_finite(kernels.jn_table(n, x)[0, n], n, x))


def spherical_bessel_y(n, x):
    n = _check_order(n)
    x = _check_positive(x)
    with np.errstate(over="ignore", invalid="ignore"):
        return float(_finite(kernels.yn_table(n, x)[0, n], n, x))


def spherical_hankel2(n, x):
    n = _check_order(n)
    x = _check_positive(x)
    return complex(spherical_bessel_j(n, x) - 1j * spherical_bessel_y(n, x))


def _deriv(table, n, x):
    # f_n' = f_{n-1} - (n+1)/x f_n, with f_0' = -f_1
    if n == 0:
        return -table[1]
    return table[n - 1] - (n + 1) / x * table[n]


def spherical_bessel_j_deriv(n, x):
    n = _check_order(n)
    if x < 0:
        raise DomainError("x must be >= 0")
    if x == 0:
        return 1.0 / 3.0 if n == 1 else 0.0
    table = kernels.jn_table(n + 1, x)[0]
    return float(_finite(_deriv(table, n, x), n, x))


def spherical_bessel_y_deriv(n, x):
    n = _check_order(n)
    x = _check_positive(x)
    with np.errstate(over="ignore", invalid="ignore"):
        table = kernels.yn_table(n + 1, x)[0]
    return float(_finite(_deriv(table, n, x), n, x))


def spherical_hankel2_deriv(n, x):
    n = _check_order(n)
    x = _check_positive(x)
    j = kernels.jn_table(n + 1, x)[0]
    with np.errstate(over="ignore", invalid="ignore"):
        y = kernels.yn_table(n + 1, x)[0]
    return complex(_finite(_deriv(j, n, x) - 1j * _deriv(y, n, x), n, x))


def _check_unit(x):
    if not -1.0 <= x <= 1.0:
        raise DomainError(f"argument out of domain [-1, 1]: {x}")


def legendre_p(n, x):
    n = _check_order(n)
    _check_unit(x)
    p, _ = kernels.legendre_table(n, x)
    return float(p[0, n])


def assoc_legendre_p1(n, x):
    n = _check_order(n)
    if n < 1:
        raise DomainError("degree must be >= 1")
    _check_unit(x)
    _, p1 = kernels.legendre_table(n, x)
    return float(p1[0, n])
