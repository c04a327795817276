import math

import numpy as np
import pytest

from capsphere import _accel, kernels
from capsphere import atf_core as ac
from capsphere import pressure_field as pf

pytestmark = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")

X = np.array([0.05, 0.7, 3.0, 14.6, 40.0, 150.0])


def both(fn):
    out = []
    for name in ("numpy", "numba"):
        prev = _accel.get_backend()
        _accel.set_backend(name)
        try:
            out.append(fn())
        finally:
            _accel.set_backend(prev)
    return out


def close(a, b, rtol):
    a, b = np.asarray(a), np.asarray(b)
    fin = np.isfinite(a) & (np.abs(a) > 1e-280)
    assert np.array_equal(np.isfinite(a), np.isfinite(b))
    np.testing.assert_allclose(a[fin], b[fin], rtol=rtol)


@pytest.mark.parametrize("name", ["jn_table", "yn_table", "rho_table"])
def test_tables_agree(name):
    fn = getattr(kernels, name)
    a, b = both(lambda: fn(60, X))
    close(a, b, 1e-13)


def test_quotient_and_legendre_agree():
    a, b = both(lambda: kernels.hankel_quotient_table(80, X * 1.3, X))
    close(a, b, 1e-13)
    t = np.array([-1.0, -0.3, 0.0, 0.77, 1.0])
    (pa, qa), (pb, qb) = both(lambda: kernels.legendre_table(200, t))
    close(pa, pb, 1e-13)
    close(qa, qb, 1e-13)


def test_cap_sums_agree():
    for s in (1.0, 0.2, -0.9):
        a, b = both(lambda: kernels.cap_geometry_sums(math.radians(12), s, 4000, 64))
        close(a[0], b[0], 1e-11)
        for u, v in zip(a[1:], b[1:]):
            assert u == pytest.approx(v, rel=1e-11)


def test_atfs_agree():
    g = pf.SceneGeometry(source_azimuth=math.radians(30))
    a, b = both(lambda: (ac.own_atf(g).values, ac.external_atf(g).values))
    close(a[0], b[0], 1e-10)
    close(a[1], b[1], 1e-10)


def test_backend_switch_errors():
    with pytest.raises(ValueError):
        _accel.set_backend("fortran")
