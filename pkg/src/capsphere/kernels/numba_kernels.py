"""Scalar-loop kernels compiled with numba (pure Python if numba is absent)."""

import math

import numpy as np

from capsphere._accel import njit

_BIG = 1e250
_SMALL = 1e-250


@njit(cache=True)
def _jn_row(nmax, x, out):
    for n in range(nmax + 1):
        out[n] = 0.0
    if x == 0.0:
        out[0] = 1.0
        return
    s = math.sin(x)
    c = math.cos(x)
    j0 = s / x
    j1 = s / (x * x) - c / x
    if nmax <= x:
        out[0] = j0
        if nmax >= 1:
            out[1] = j1
        for n in range(1, nmax):
            out[n + 1] = (2 * n + 1) / x * out[n] - out[n - 1]
        return
    # Miller: minimal solution by downward recurrence, normalised at order 0 or 1
    start = nmax + 15 + int(math.ceil(x))
    f_next = 0.0
    f = 1.0
    if start <= nmax:
        out[start] = f
    for n in range(start, 0, -1):
        f_prev = (2 * n + 1) / x * f - f_next
        f_next = f
        f = f_prev
        if n - 1 <= nmax:
            out[n - 1] = f
        if abs(f) > _BIG:
            f *= _SMALL
            f_next *= _SMALL
            for m in range(n - 1, nmax + 1):
                out[m] *= _SMALL
    if abs(j0) >= abs(j1):
        scale = j0 / out[0]
    else:
        scale = j1 / out[1]
    for n in range(nmax + 1):
        out[n] *= scale


@njit(cache=True)
def jn_table(nmax, x):
    out = np.empty((x.shape[0], nmax + 1))
    for i in range(x.shape[0]):
        _jn_row(nmax, x[i], out[i])
    return out


@njit(cache=True)
def yn_table(nmax, x):
    out = np.empty((x.shape[0], nmax + 1))
    for i in range(x.shape[0]):
        xi = x[i]
        s = math.sin(xi)
        c = math.cos(xi)
        out[i, 0] = -c / xi
        if nmax >= 1:
            out[i, 1] = -c / (xi * xi) - s / xi
        for n in range(1, nmax):
            out[i, n + 1] = (2 * n + 1) / xi * out[i, n] - out[i, n - 1]
    return out


@njit(cache=True)
def rho_table(nmax, x):
    """h_n(x) / h_n'(x) for the outgoing spherical Hankel function."""
    out = np.empty((x.shape[0], nmax + 1), dtype=np.complex128)
    for i in range(x.shape[0]):
        xi = x[i]
        # r = h_{n-1}/h_n, from the exact quotient h0/h1 = i x / (i - x)
        r = 1j * xi / (1j - xi)
        out[i, 0] = -r
        for n in range(1, nmax + 1):
            out[i, n] = 1.0 / (r - (n + 1) / xi)
            r = 1.0 / ((2 * n + 1) / xi - r)
    return out


@njit(cache=True)
def hankel_quotient_table(nmax, a, b):
    """h_n(a) / h_n(b) built from ratio recurrences (no overflow)."""
    out = np.empty((a.shape[0], nmax + 1), dtype=np.complex128)
    for i in range(a.shape[0]):
        ai = a[i]
        bi = b[i]
        q = (bi / ai) * np.exp(-1j * (ai - bi))
        out[i, 0] = q
        ra = 1j * ai / (1j - ai)
        rb = 1j * bi / (1j - bi)
        for n in range(1, nmax + 1):
            q = q * rb / ra
            out[i, n] = q
            ra = 1.0 / ((2 * n + 1) / ai - ra)
            rb = 1.0 / ((2 * n + 1) / bi - rb)
    return out


@njit(cache=True)
def legendre_table(nmax, t):
    p = np.empty((t.shape[0], nmax + 1))
    p1 = np.empty((t.shape[0], nmax + 1))
    for i in range(t.shape[0]):
        ti = t[i]
        st = math.sqrt(max(0.0, 1.0 - ti * ti))
        p[i, 0] = 1.0
        p1[i, 0] = 0.0
        if nmax >= 1:
            p[i, 1] = ti
            p1[i, 1] = st
        for n in range(2, nmax + 1):
            p[i, n] = ((2 * n - 1) * ti * p[i, n - 1] - (n - 1) * p[i, n - 2]) / n
            p1[i, n] = ((2 * n - 1) * ti * p1[i, n - 1] - n * p1[i, n - 2]) / (n - 1)
    return p, p1


@njit(cache=True)
def cap_geometry_sums(alpha, s, nb, npref):
    """k-independent sums of the cap velocity series used for tail subtraction.

    Returns prefix sums (3, npref+1) of U_n P_n(s) c_m(n) for m = 0, 1, 2 and
    the full sums to ``nb`` of the m = 1, 2 weights and of the 1/((n+1)(2n+1))
    weight.
    """
    ca = math.cos(alpha)
    sa = math.sin(alpha)
    sqa = math.sqrt(max(0.0, 1.0 - ca * ca))
    pref = np.zeros((3, npref + 1))
    tot1 = 0.0
    tot2 = 0.0
    totb = 0.0
    # Legendre recurrences at cos(alpha) (P, P^1) and at s (P)
    pa_prev, pa = 1.0, ca
    qa_prev, qa = 0.0, sqa
    ps_prev, ps = 1.0, s
    for n in range(nb + 1):
        if n == 0:
            un = sa * sa / 4.0
            psn = 1.0
        elif n == 1:
            un = (1.0 - ca * ca * ca) / 2.0
            psn = s
        else:
            pa_new = ((2 * n - 1) * ca * pa - (n - 1) * pa_prev) / n
            qa_new = ((2 * n - 1) * ca * qa - n * qa_prev) / (n - 1)
            ps_new = ((2 * n - 1) * s * ps - (n - 1) * ps_prev) / n
            pa_prev, pa = pa, pa_new
            qa_prev, qa = qa, qa_new
            ps_prev, ps = ps, ps_new
            un = -(2 * n + 1) * sa * (sa * pa - ca * qa) / (2.0 * (n - 1) * (n + 2))
            psn = ps
        w = un * psn
        fn = float(n)
        c0 = 1.0 / (fn + 1.0)
        c1 = 0.0
        c2 = 0.0
        if n >= 3:
            a1 = 1.0 / (2.0 * (2.0 * fn - 1.0))
            a2 = 1.0 / (8.0 * (2.0 * fn - 1.0) * (2.0 * fn - 3.0))
            c1 = 2.0 * a1 / (fn + 1.0) ** 2
            c2 = (4.0 * a2 - 2.0 * a1 * a1) / (fn + 1.0) ** 2 + 4.0 * a1 * a1 / (fn + 1.0) ** 3
        if n < npref:
            pref[0, n + 1] = pref[0, n] + w * c0
            pref[1, n + 1] = pref[1, n] + w * c1
            pref[2, n + 1] = pref[2, n] + w * c2
        tot1 += w * c1
        tot2 += w * c2
        totb += w / ((fn + 1.0) * (2.0 * fn + 1.0))
    return pref, tot1, tot2, totb
