"""Vectorised numpy kernels; loops run over the order n, arrays over arguments."""

import numpy as np

_BIG = 1e250
_SMALL = 1e-250


def jn_table(nmax, x):
    x = np.asarray(x, dtype=float)
    out = np.zeros((x.shape[0], nmax + 1))
    zero = x == 0.0
    out[zero, 0] = 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        j0 = np.sin(x) / x
        j1 = np.sin(x) / (x * x) - np.cos(x) / x

    up = (~zero) & (nmax <= x)
    if up.any():
        xu = x[up]
        t = np.empty((xu.shape[0], nmax + 1))
        t[:, 0] = j0[up]
        if nmax >= 1:
            t[:, 1] = j1[up]
        for n in range(1, nmax):
            t[:, n + 1] = (2 * n + 1) / xu * t[:, n] - t[:, n - 1]
        out[up] = t

    down = (~zero) & ~(nmax <= x)
    if down.any():
        xd = x[down]
        starts = nmax + 15 + np.ceil(xd).astype(int)
        t = np.zeros((xd.shape[0], nmax + 1))
        f_next = np.zeros(xd.shape[0])
        f = np.ones(xd.shape[0])
        for n in range(int(starts.max()), 0, -1):
            active = starts >= n
            f_prev = np.where(active, (2 * n + 1) / xd * f - f_next, 0.0)
            f_next = np.where(active, f, 0.0)
            f = np.where(active, f_prev, 1.0)
            if n - 1 <= nmax:
                t[:, n - 1] = np.where(active, f, 0.0)
            big = np.abs(f) > _BIG
            if big.any():
                f[big] *= _SMALL
                f_next[big] *= _SMALL
                if n - 1 <= nmax:
                    t[big, n - 1:] *= _SMALL
        use0 = np.abs(j0[down]) >= np.abs(j1[down])
        scale = np.where(use0, j0[down] / t[:, 0], j1[down] / np.where(use0, 1.0, t[:, 1]))
        out[down] = t * scale[:, None]
    return out


def yn_table(nmax, x):
    x = np.asarray(x, dtype=float)
    out = np.empty((x.shape[0], nmax + 1))
    with np.errstate(over="ignore", invalid="ignore"):
        out[:, 0] = -np.cos(x) / x
        if nmax >= 1:
            out[:, 1] = -np.cos(x) / (x * x) - np.sin(x) / x
        for n in range(1, nmax):
            out[:, n + 1] = (2 * n + 1) / x * out[:, n] - out[:, n - 1]
    return out


def rho_table(nmax, x):
    x = np.asarray(x, dtype=float)
    out = np.empty((x.shape[0], nmax + 1), dtype=complex)
    r = 1j * x / (1j - x)
    out[:, 0] = -r
    for n in range(1, nmax + 1):
        out[:, n] = 1.0 / (r - (n + 1) / x)
        r = 1.0 / ((2 * n + 1) / x - r)
    return out


def hankel_quotient_table(nmax, a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.empty((a.shape[0], nmax + 1), dtype=complex)
    q = (b / a) * np.exp(-1j * (a - b))
    out[:, 0] = q
    ra = 1j * a / (1j - a)
    rb = 1j * b / (1j - b)
    for n in range(1, nmax + 1):
        q = q * rb / ra
        out[:, n] = q
        ra = 1.0 / ((2 * n + 1) / a - ra)
        rb = 1.0 / ((2 * n + 1) / b - rb)
    return out


def legendre_table(nmax, t):
    t = np.asarray(t, dtype=float)
    p = np.empty((t.shape[0], nmax + 1))
    p1 = np.empty((t.shape[0], nmax + 1))
    p[:, 0] = 1.0
    p1[:, 0] = 0.0
    if nmax >= 1:
        p[:, 1] = t
        p1[:, 1] = np.sqrt(np.maximum(0.0, 1.0 - t * t))
    for n in range(2, nmax + 1):
        p[:, n] = ((2 * n - 1) * t * p[:, n - 1] - (n - 1) * p[:, n - 2]) / n
        p1[:, n] = ((2 * n - 1) * t * p1[:, n - 1] - n * p1[:, n - 2]) / (n - 1)
    return p, p1


def cap_geometry_sums(alpha, s, nb, npref):
    ca, sa = np.cos(alpha), np.sin(alpha)
    pa, pa1 = legendre_table(nb, np.array([ca]))
    ps, _ = legendre_table(nb, np.array([s]))
    n = np.arange(nb + 1, dtype=float)
    un = np.empty(nb + 1)
    un[0] = sa * sa / 4.0
    un[1] = (1.0 - ca**3) / 2.0
    nn = n[2:]
    un[2:] = -(2 * nn + 1) * sa * (sa * pa[0, 2:] - ca * pa1[0, 2:]) / (2.0 * (nn - 1) * (nn + 2))
    w = un * ps[0]
    c0 = 1.0 / (n + 1.0)
    c1 = np.zeros(nb + 1)
    c2 = np.zeros(nb + 1)
    m = n >= 3
    a1 = 1.0 / (2.0 * (2.0 * n[m] - 1.0))
    a2 = 1.0 / (8.0 * (2.0 * n[m] - 1.0) * (2.0 * n[m] - 3.0))
    c1[m] = 2.0 * a1 / (n[m] + 1.0) ** 2
    c2[m] = (4.0 * a2 - 2.0 * a1 * a1) / (n[m] + 1.0) ** 2 + 4.0 * a1 * a1 / (n[m] + 1.0) ** 3
    pref = np.zeros((3, npref + 1))
    k = min(npref, nb + 1)
    pref[0, 1:k + 1] = np.cumsum(w[:k] * c0[:k])
    pref[1, 1:k + 1] = np.cumsum(w[:k] * c1[:k])
    pref[2, 1:k + 1] = np.cumsum(w[:k] * c2[:k])
    # sequential sums keep agreement with the loop kernel at rounding level
    tot1 = float(np.cumsum(w * c1)[-1])
    tot2 = float(np.cumsum(w * c2)[-1])
    totb = float(np.cumsum(w / ((n + 1.0) * (2.0 * n + 1.0)))[-1])
    return pref, tot1, tot2, totb
