"""Pressure fields around a rigid sphere: point source and vibrating cap.

Conventions: time factor e^{+j omega t}, sphere centred at the origin, field
angles measured from the source axis (point source) or the cap axis (cap).
All series are evaluated per wavenumber bin; ``k`` may be a scalar or an
array and the result has the same shape. Every field is exactly zero at
k = 0.
"""

from dataclasses import dataclass
from functools import lru_cache
import math
import warnings

import numpy as np
from scipy import integrate, special

from capsphere import kernels
from capsphere.errors import DomainError, StabilityError, TruncationError
from capsphere.special_math import DEFAULT_POLICY


@dataclass(frozen=True)
class Medium:
    c: float = 343.0
    rho0: float = 1.21

    def __post_init__(self):
        if not (self.c > 0 and self.rho0 > 0):
            raise DomainError("medium requires c > 0 and rho0 > 0")

    def wavenumber(self, freq_hz):
        return 2.0 * np.pi * np.asarray(freq_hz, dtype=float) / self.c


@dataclass(frozen=True)
class SceneGeometry:
    """Head sphere, mouth cap, ear position and external source placement.

    Angles are in radians. The cap axis and azimuth 0 point straight ahead
    (+x); the ear lies in the horizontal plane at ``ear_azimuth``.
    """

    sphere_radius: float = 0.0875
    cap_half_angle: float = math.radians(10.0)
    ear_azimuth: float = math.radians(100.0)
    source_distance: float = 1.0
    source_azimuth: float = 0.0
    source_elevation: float = 0.0
    ref_distance: float = 0.1

    def __post_init__(self):
        R = self.sphere_radius
        if not R > 0:
            raise DomainError("sphere_radius must be > 0")
        if not 0 < self.cap_half_angle < math.pi / 2:
            raise DomainError("cap_half_angle must lie in (0, pi/2)")
        if not 0 <= self.ear_azimuth <= math.pi:
            raise DomainError("ear_azimuth must lie in [0, pi]")
        if not self.source_distance > R:
            raise DomainError("source_distance must exceed sphere_radius")
        if not 0 < self.ref_distance < self.source_distance:
            raise DomainError("ref_distance must lie in (0, source_distance)")

    @property
    def scattering_angle(self):
        """Great-circle angle between source direction and ear direction."""
        ce = math.cos(self.source_elevation)
        u_src = (ce * math.cos(self.source_azimuth), ce * math.sin(self.source_azimuth),
                 math.sin(self.source_elevation))
        u_ear = (math.cos(self.ear_azimuth), math.sin(self.ear_azimuth), 0.0)
        dot = sum(a * b for a, b in zip(u_src, u_ear))
        return math.acos(max(-1.0, min(1.0, dot)))

    @property
    def ear_source_distance(self):
        R, d = self.sphere_radius, self.source_distance
        return math.sqrt(R * R + d * d - 2 * R * d * math.cos(self.scattering_angle))

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


# ---------------------------------------------------------------------------
# series summation


def _accept(terms, offset, floors, policy):
    """Index of the last accepted term per row, or -1 when the rule never fires."""
    n_rows, n_cols = terms.shape
    with np.errstate(invalid="ignore", over="ignore"):
        partial = np.cumsum(terms, axis=1) + offset[:, None]
        small = np.abs(terms) <= policy.rel_tol * np.abs(partial)
    idx = np.arange(n_cols)
    last_big = np.maximum.accumulate(np.where(small, -1, idx[None, :]), axis=1)
    run = idx[None, :] - last_big
    ok = (run >= policy.consecutive_small) & (idx[None, :] + 1 >= floors[:, None])
    first = np.where(ok.any(axis=1), ok.argmax(axis=1), -1)
    return first, partial


def _sum_series(make_terms, floors, policy, n_terms=None, offset=None):
    """Sum per-row series produced by ``make_terms(N)`` -> (rows, N) array.

    With ``n_terms`` the first n_terms terms are summed unconditionally.
    Otherwise the table grows until the truncation rule fires on every row.
    """
    floors = np.asarray(floors, dtype=int)
    if n_terms is not None:
        terms = make_terms(int(n_terms))
        total = terms.sum(axis=1) if offset is None else terms.sum(axis=1) + offset
        if not np.all(np.isfinite(total)):
            raise StabilityError("order/argument out of stable range in series terms")
        return total
    n_cols = int(min(policy.max_terms, max(policy.min_terms, floors.max()) + 40))
    while True:
        terms = make_terms(n_cols)
        off = np.zeros(terms.shape[0], dtype=complex) if offset is None else offset
        first, partial = _accept(terms, off, floors, policy)
        if np.all(first >= 0):
            rows = np.arange(terms.shape[0])
            value = partial[rows, first]
            for i in range(terms.shape[0]):
                if not np.all(np.isfinite(terms[i, :first[i] + 1])):
                    raise StabilityError("order/argument out of stable range in series terms")
            return value
        if n_cols >= policy.max_terms:
            bad = int(np.sum(first < 0))
            raise TruncationError(
                f"series did not converge within max_terms={policy.max_terms} in {bad} bin(s)")
        n_cols = min(policy.max_terms, 2 * n_cols)


def _as_k(k):
    k = np.asarray(k, dtype=float)
    if np.any(k < 0):
        raise DomainError("wavenumber must be >= 0")
    return k


def _per_bin(k, fn):
    """Evaluate ``fn(k_positive_1d)`` on the non-zero bins; zero elsewhere."""
    k = _as_k(k)
    flat = k.reshape(-1)
    out = np.zeros(flat.shape, dtype=complex)
    pos = flat > 0
    if pos.any():
        out[pos] = fn(flat[pos])
    if k.ndim == 0:
        return complex(out[0])
    return out.reshape(k.shape)


def _h2_table(nmax, x):
    j = kernels.jn_table(nmax, x)
    with np.errstate(over="ignore", invalid="ignore"):
        y = kernels.yn_table(nmax, x)
    return j - 1j * y


def _jd_from_table(j, x):
    """j_n'(x) for n = 0..N-1 from a table holding orders 0..N."""
    n = np.arange(j.shape[1] - 1)
    d = np.empty((j.shape[0], j.shape[1] - 1))
    d[:, 0] = -j[:, 1]
    d[:, 1:] = j[:, :-2] - (n[1:] + 1)[None, :] / x[:, None] * j[:, 1:-1]
    return d


# ---------------------------------------------------------------------------
# point source


def incident_pressure_freefield(medium, U0, r1, k):
    if not r1 > 0:
        raise DomainError("free-field pressure is singular at r1 = 0")
    k = _as_k(k)
    return 1j * k * medium.rho0 * medium.c * U0 * np.exp(-1j * k * r1) / (4 * np.pi * r1)


def _point_prefactor(medium, U0, k):
    return k * k * medium.rho0 * medium.c * U0 / (4 * np.pi)


def _incident_terms(geometry, r, theta, k):
    d = geometry.source_distance
    t = math.cos(theta)

    def make(N):
        n = np.arange(N)
        hd = _h2_table(N - 1, k * d)
        jr = kernels.jn_table(N - 1, k * r)
        p, _ = kernels.legendre_table(N - 1, t)
        with np.errstate(over="ignore", invalid="ignore"):
            return (2 * n + 1) * hd * jr * p[0]

    return make


def _scattered_terms(geometry, r, theta, k):
    R, d = geometry.sphere_radius, geometry.source_distance
    t = math.cos(theta)

    def make(N):
        n = np.arange(N)
        x = k * R
        hd = _h2_table(N - 1, k * d)
        jd = _jd_from_table(kernels.jn_table(N, x), x)
        rho = kernels.rho_table(N - 1, x)
        quot = kernels.hankel_quotient_table(N - 1, k * r, x)
        p, _ = kernels.legendre_table(N - 1, t)
        with np.errstate(over="ignore", invalid="ignore"):
            return -(2 * n + 1) * hd * jd * rho * quot * p[0]

    return make


def incident_pressure_series(medium, U0, geometry, r, theta, k, policy=DEFAULT_POLICY, n_terms=None):
    """Point-source field expanded about the sphere centre (valid for r <= d)."""
    if r > geometry.source_distance:
        raise DomainError("incident series requires r <= source distance")
    if r < 0:
        raise DomainError("r must be >= 0")

    def fn(kk):
        make = _incident_terms(geometry, r, theta, kk)
        return _point_prefactor(medium, U0, kk) * _sum_series(
            make, [policy.floor(x) for x in kk * r], policy, n_terms)

    return _per_bin(k, fn)


def scattered_pressure(medium, U0, geometry, r, theta, k, policy=DEFAULT_POLICY, n_terms=None):
    if r < geometry.sphere_radius:
        raise DomainError("scattered field requires r >= R")

    def fn(kk):
        make = _scattered_terms(geometry, r, theta, kk)
        return _point_prefactor(medium, U0, kk) * _sum_series(
            make, [policy.floor(x) for x in kk * geometry.sphere_radius], policy, n_terms)

    return _per_bin(k, fn)


def total_pressure(medium, U0, geometry, r, theta, k, policy=DEFAULT_POLICY, n_terms=None):
    """Incident plus scattered field, both series cut at a shared order."""
    if r < geometry.sphere_radius or r > geometry.source_distance:
        raise DomainError("total field requires R <= r <= d")

    def fn(kk):
        inc = _incident_terms(geometry, r, theta, kk)
        sca = _scattered_terms(geometry, r, theta, kk)
        floors = [policy.floor(x) for x in kk * max(r, geometry.sphere_radius)]
        return _point_prefactor(medium, U0, kk) * _sum_series(
            lambda N: inc(N) + sca(N), floors, policy, n_terms)

    return _per_bin(k, fn)


def surface_pressure(medium, U0, geometry, theta, k, policy=DEFAULT_POLICY, n_terms=None):
    """Total field on the sphere via the Wronskian form of the surface series.

    j_n - (j_n'/h_n') h_n = -i / (x^2 h_n'(x)), which removes the cancellation
    between incident and scattered parts.
    """
    R, d = geometry.sphere_radius, geometry.source_distance
    t = math.cos(theta)

    def fn(kk):
        x = kk * R

        def make(N):
            n = np.arange(N)
            rho = kernels.rho_table(N - 1, x)
            quot = kernels.hankel_quotient_table(N - 1, kk * d, x)
            p, _ = kernels.legendre_table(N - 1, t)
            return (2 * n + 1) * quot * rho * p[0]

        s = _sum_series(make, [policy.floor(v) for v in x], policy, n_terms)
        return _point_prefactor(medium, U0, kk) * (-1j / (x * x)) * s

    return _per_bin(k, fn)


def incident_radial_derivative(medium, U0, geometry, r, theta, k):
    """Closed-form d/dr of the free-field point-source pressure."""
    d = geometry.source_distance
    r1 = math.sqrt(r * r + d * d - 2 * r * d * math.cos(theta))
    k = _as_k(k)
    p = incident_pressure_freefield(medium, U0, r1, k)
    return p * (-1j * k - 1.0 / r1) * (r - d * math.cos(theta)) / r1


# ---------------------------------------------------------------------------
# vibrating cap


def cap_coefficients(alpha, nmax):
    """Legendre coefficients of the radial velocity u0 cos(theta) on the cap, u0 = 1.

    The n >= 2 weight is sin(a) P_n(cos a) - cos(a) P_n^1(cos a) with P_n^1
    as returned by :func:`assoc_legendre_p1` (no Condon-Shortley phase); this
    reproduces the projection (2n+1)/2 * int_{cos a}^1 t P_n(t) dt.
    """
    ca, sa = math.cos(alpha), math.sin(alpha)
    p, p1 = kernels.legendre_table(nmax, ca)
    u = np.empty(nmax + 1)
    u[0] = sa * sa / 4.0
    if nmax >= 1:
        u[1] = (1.0 - ca**3) / 2.0
    n = np.arange(2, nmax + 1, dtype=float)
    u[2:] = -(2 * n + 1) * sa * (sa * p[0, 2:] - ca * p1[0, 2:]) / (2.0 * (n - 1) * (n + 2))
    return u


def _tail_weights(N):
    n = np.arange(N, dtype=float)
    c0 = 1.0 / (n + 1.0)
    c1 = np.zeros(N)
    c2 = np.zeros(N)
    m = n >= 3
    a1 = 1.0 / (2.0 * (2.0 * n[m] - 1.0))
    a2 = 1.0 / (8.0 * (2.0 * n[m] - 1.0) * (2.0 * n[m] - 3.0))
    c1[m] = 2.0 * a1 / (n[m] + 1.0) ** 2
    c2[m] = (4.0 * a2 - 2.0 * a1 * a1) / (n[m] + 1.0) ** 2 + 4.0 * a1 * a1 / (n[m] + 1.0) ** 3
    return c0, c1, c2


_STATIC_TERMS = 40000
_STATIC_PREFIX = 512


def _static_kernel_on_axis(alpha):
    # sum_n U_n / (n+1), as int_c^1 t [ (2(1-t))^(-1/2) - ln(1 + sqrt(2/(1-t)))/2 ] dt
    # after t = 1 - w^2
    wc = math.sqrt(1.0 - math.cos(alpha))

    def f(w):
        t = 1.0 - w * w
        if w == 0.0:
            return t * math.sqrt(2.0)
        return t * (math.sqrt(2.0) - w * math.log1p(math.sqrt(2.0) / w))

    # the requested tolerance sits at roundoff level; quad reports that, harmlessly
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, _ = integrate.quad(f, 0.0, wc, epsabs=1e-15, epsrel=1e-14, limit=200)
    return val


def _single_layer(alpha, s):
    # sum_n U_n P_n(s) / (2n+1) through the azimuthally integrated 1/|x - x'| kernel
    c = math.cos(alpha)
    ss = math.sqrt(max(0.0, 1.0 - s * s))

    def f(t):
        a = 2.0 * (1.0 - t * s)
        b = 2.0 * math.sqrt(max(0.0, 1.0 - t * t)) * ss
        m = 2.0 * b / (a + b)
        if m >= 1.0:
            return 0.0
        return t * special.ellipk(m) / math.sqrt(a + b)

    pts = [s] if c < s < 1.0 else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, _ = integrate.quad(f, c, 1.0, points=pts, epsabs=1e-15, epsrel=1e-13, limit=400)
    return val / math.pi


@lru_cache(maxsize=4096)
def cap_static_sums(alpha, s):
    """k-independent sums for the on-surface cap series at P_n argument ``s``.

    Returns (G0, prefixes, T1_total, T2_total) where G0 = sum U_n P_n(s)/(n+1).
    """
    pref, tot1, tot2, totb = kernels.cap_geometry_sums(alpha, s, _STATIC_TERMS, _STATIC_PREFIX)
    if s == 1.0:
        g0 = _static_kernel_on_axis(alpha)
    else:
        g0 = 2.0 * _single_layer(alpha, s) - totb
    return g0, np.asarray(pref), float(tot1), float(tot2)


def _cap_prefactor(medium, u0):
    return -1j * medium.rho0 * medium.c * u0


def _cap_surface_sum(alpha, s, x, policy, n_terms):
    g0, pref, tot1, tot2 = cap_static_sums(alpha, s)
    ns = np.maximum(3, np.ceil(x).astype(int))
    if np.any(ns >= _STATIC_PREFIX):
        raise DomainError("kR too large for the on-surface cap expansion")
    t0 = g0 - pref[0, ns]
    t1 = tot1 - pref[1, ns]
    t2 = tot2 - pref[2, ns]
    head = -x * t0 - x**3 * t1 - x**5 * t2

    def make(N):
        u = cap_coefficients(alpha, N - 1)
        p, _ = kernels.legendre_table(N - 1, s)
        rho = kernels.rho_table(N - 1, x)
        c0, c1, c2 = _tail_weights(N)
        n = np.arange(N)
        corr = (x[:, None] * c0 + x[:, None] ** 3 * c1 + x[:, None] ** 5 * c2)
        corr = np.where(n[None, :] >= ns[:, None], corr, 0.0)
        return (u * p[0])[None, :] * (rho + corr)

    return _sum_series(make, [policy.floor(v) for v in x], policy, n_terms,
                       offset=head.astype(complex))


def cap_pressure(medium, u0, R, alpha, r, theta, k, policy=DEFAULT_POLICY, n_terms=None):
    """Pressure radiated by a cap of half-angle ``alpha`` moving axially with velocity u0.

    On the surface (r == R) the slowly converging series is accelerated by
    subtracting its large-order asymptote, whose sum is known in closed form.
    """
    if not R > 0:
        raise DomainError("R must be > 0")
    if not 0 < alpha < math.pi / 2:
        raise DomainError("alpha must lie in (0, pi/2)")
    if r < R:
        raise DomainError("cap field requires r >= R")
    s = math.cos(theta)
    if abs(theta) < 1e-300:
        s = 1.0

    def fn(kk):
        x = kk * R
        if r == R:
            total = _cap_surface_sum(alpha, s, x, policy, n_terms)
        else:
            def make(N):
                u = cap_coefficients(alpha, N - 1)
                p, _ = kernels.legendre_table(N - 1, s)
                rho = kernels.rho_table(N - 1, x)
                quot = kernels.hankel_quotient_table(N - 1, kk * r, x)
                return (u * p[0])[None, :] * rho * quot

            total = _sum_series(make, [policy.floor(v) for v in x], policy, n_terms)
        return _cap_prefactor(medium, u0) * total

    return _per_bin(k, fn)


# ---------------------------------------------------------------------------
# directivity


def directivity_pattern(field, medium, geometry, k, theta_grid, r_eval=None, policy=DEFAULT_POLICY):
    """Relative level 20 log10(|p(theta)| / |p(0)|) in dB over ``theta_grid``.

    ``field`` is ``"cap"`` (mouth cap, axis at theta = 0) or ``"point_scatter"``
    (point source straight ahead at the geometry's source distance).
    """
    theta_grid = [float(t) for t in theta_grid]
    if not theta_grid:
        raise DomainError("theta_grid must be non-empty")
    if not any(t == 0.0 for t in theta_grid):
        raise DomainError("theta_grid must contain 0")
    R = geometry.sphere_radius
    r_eval = R if r_eval is None else float(r_eval)

    def level(theta):
        # fields depend on theta only through cos(theta)
        th = abs(theta)
        if field == "cap":
            return abs(cap_pressure(medium, 1.0, R, geometry.cap_half_angle, r_eval, th, k, policy))
        if field == "point_scatter":
            if r_eval == R:
                return abs(surface_pressure(medium, 1.0, geometry, th, k, policy))
            return abs(total_pressure(medium, 1.0, geometry, r_eval, th, k, policy))
        raise DomainError(f"unknown field {field!r}")

    cache = {}
    for t in theta_grid:
        key = abs(t)
        if key not in cache:
            cache[key] = level(t)
    ref = cache[0.0]
    if ref == 0:
        raise DomainError("on-axis pressure is zero; cannot normalise")
    return [(t, 0.0 if abs(t) == 0.0 else 20.0 * math.log10(cache[abs(t)] / ref)) for t in theta_grid]


def write_directivity_csv(path, pattern):
    with open(path, "w", newline="\n") as fh:
        fh.write("theta_deg,rel_spl_db\n")
        for theta, db in pattern:
            fh.write(f"{math.degrees(theta):.9g},{db:.9g}\n")
