"""Analytical ATFs for one's own voice and for external talkers, plus ATF banks.

External talker: the point-source field on the sphere at the ear, referred
to the free field at the source distance. Own voice: the cap field at the
ear, referred to the on-axis cap field between two reference distances.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import itertools
import json
import math
from pathlib import Path
import struct
import warnings

import numpy as np

from capsphere import pressure_field as pf
from capsphere.errors import ConditioningError, DomainError, FormatError
from capsphere.pressure_field import Medium, SceneGeometry
from capsphere.special_math import DEFAULT_POLICY

LABELS = ("own", "external")
ATFB_MAGIC = b"ATFB"
ATFB_VERSION = 1
BANK_FORMAT_VERSION = 1
CONDITIONING_FLOOR = 1e-12


class ConditioningWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class FrequencyGrid:
    sample_rate: float = 16000.0
    n_bins: int = 257

    def __post_init__(self):
        if not self.sample_rate > 0 or self.n_bins < 2:
            raise DomainError("grid needs sample_rate > 0 and n_bins >= 2")

    @classmethod
    def for_fft(cls, sample_rate=16000.0, fft_size=512):
        return cls(float(sample_rate), fft_size // 2 + 1)

    @property
    def bin_hz(self):
        return self.sample_rate / (2.0 * (self.n_bins - 1))

    @property
    def fft_size(self):
        return 2 * (self.n_bins - 1)

    def frequencies(self):
        return np.arange(self.n_bins) * self.bin_hz

    def wavenumbers(self, medium):
        return medium.wavenumber(self.frequencies())


@dataclass
class TransferFunction:
    grid: FrequencyGrid
    values: np.ndarray
    label: str
    geometry: SceneGeometry
    notes: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != (self.grid.n_bins,):
            raise DomainError("values length must equal grid.n_bins")
        if self.values[0] != 0:
            raise DomainError("DC bin must be exactly 0")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("transfer function values must be finite")
        if self.label not in LABELS:
            raise DomainError(f"label must be one of {LABELS}")


# ---------------------------------------------------------------------------
# the four component ratios


def _positive_k(k):
    k = np.asarray(k, dtype=float)
    if np.any(k <= 0):
        raise DomainError("ATF components require k > 0")
    return k


def h_pp(geometry, k, r1=None):
    """Free-field ratio from distance r1 to the reference r0 (default r1 = d)."""
    r0 = geometry.ref_distance
    r1 = geometry.source_distance if r1 is None else float(r1)
    if not (r0 > 0 and r1 > 0):
        raise DomainError("h_pp needs r0 > 0 and r1 > 0")
    k = np.asarray(k, dtype=float)
    if r1 == r0:
        return np.ones_like(k, dtype=complex) if k.ndim else 1 + 0j
    return r0 * np.exp(-1j * k * r1) / (r1 * np.exp(-1j * k * r0))


def h_ps(geometry, medium, k, scattering=True, policy=DEFAULT_POLICY):
    """On-sphere total field at the ear over the free field at r0.

    ``scattering=False`` replaces the sphere field by the free field at the
    ear point (a composition check).
    """
    k = _positive_k(k)
    ref = pf.incident_pressure_freefield(medium, 1.0, geometry.ref_distance, k)
    if scattering:
        p = pf.surface_pressure(medium, 1.0, geometry, geometry.scattering_angle, k, policy)
    else:
        p = pf.incident_pressure_freefield(medium, 1.0, geometry.ear_source_distance, k)
    return p / ref


def h_cp(geometry, medium, k, r0=None, r1=None, policy=DEFAULT_POLICY):
    """On-axis cap field at r1 over that at r0 (both default to ref_distance)."""
    k = _positive_k(k)
    r0 = geometry.ref_distance if r0 is None else float(r0)
    r1 = geometry.ref_distance if r1 is None else float(r1)
    if r1 == r0:
        return np.ones_like(k, dtype=complex) if k.ndim else 1 + 0j
    R, a = geometry.sphere_radius, geometry.cap_half_angle
    if min(r0, r1) < R:
        raise DomainError("cap reference distances must be >= sphere radius")
    num = pf.cap_pressure(medium, 1.0, R, a, r1, 0.0, k, policy)
    den = pf.cap_pressure(medium, 1.0, R, a, r0, 0.0, k, policy)
    if np.any(np.abs(den) < np.finfo(float).tiny):
        raise ConditioningError("on-axis reference pressure underflows")
    return num / den


def h_cs(geometry, medium, k, policy=DEFAULT_POLICY):
    """Cap field on the sphere at the ear over that on the cap axis."""
    k = _positive_k(k)
    if geometry.ear_azimuth == 0.0:
        return np.ones_like(k, dtype=complex) if k.ndim else 1 + 0j
    R, a = geometry.sphere_radius, geometry.cap_half_angle
    num = pf.cap_pressure(medium, 1.0, R, a, R, geometry.ear_azimuth, k, policy)
    den = pf.cap_pressure(medium, 1.0, R, a, R, 0.0, k, policy)
    if np.any(np.abs(den) < np.finfo(float).tiny):
        raise ConditioningError("on-axis cap pressure underflows")
    return num / den


def external_atf(geometry, medium=Medium(), grid=FrequencyGrid(), scattering=True, policy=DEFAULT_POLICY):
    k = grid.wavenumbers(medium)[1:]
    values = np.zeros(grid.n_bins, dtype=complex)
    values[1:] = h_ps(geometry, medium, k, scattering, policy) / h_pp(geometry, k)
    return TransferFunction(grid, values, "external", geometry)


def own_atf(geometry, medium=Medium(), grid=FrequencyGrid(), r0=None, r1=None, policy=DEFAULT_POLICY):
    k = grid.wavenumbers(medium)[1:]
    cp = np.asarray(h_cp(geometry, medium, k, r0, r1, policy))
    cs = np.asarray(h_cs(geometry, medium, k, policy))
    values = np.zeros(grid.n_bins, dtype=complex)
    bad = np.abs(cp) < CONDITIONING_FLOOR
    values[1:][~bad] = cs[~bad] / cp[~bad]
    notes = []
    if bad.any():
        msg = f"|h_cp| < {CONDITIONING_FLOOR:g} at {int(bad.sum())} bin(s); set to 0"
        warnings.warn(msg, ConditioningWarning, stacklevel=2)
        notes.append(msg)
    return TransferFunction(grid, values, "own", geometry, notes)


def log_slope(tf, f_lo=200.0, f_hi=8000.0):
    """Least-squares slope of 20 log10|H| against log10 f, in dB per decade."""
    f = tf.grid.frequencies()
    mag = np.abs(tf.values)
    use = (f >= f_lo) & (f <= f_hi) & (mag > 0)
    if use.sum() < 2:
        raise DomainError("fewer than two usable bins in the slope band")
    return float(np.polyfit(np.log10(f[use]), 20.0 * np.log10(mag[use]), 1)[0])


# ---------------------------------------------------------------------------
# parameter grids and banks


@dataclass(frozen=True)
class ParamRange:
    lo: float
    hi: float
    count: int
    periodic: bool = False

    def __post_init__(self):
        if self.count < 1:
            raise DomainError("range count must be >= 1")
        if self.hi < self.lo or (self.count > 1 and self.hi == self.lo):
            raise DomainError(f"degenerate range [{self.lo}, {self.hi}] x {self.count}")

    def values(self):
        if self.count == 1:
            return np.array([0.5 * (self.lo + self.hi)])
        return np.linspace(self.lo, self.hi, self.count, endpoint=not self.periodic)

    def contains(self, v, tol=1e-9):
        return self.lo - tol <= v <= self.hi + tol

    @classmethod
    def from_obj(cls, obj):
        if isinstance(obj, cls):
            return obj
        if isinstance(obj, (list, tuple)):
            return cls(*obj)
        return cls(**obj)


@dataclass(frozen=True)
class GridSpec:
    """Parameter ranges for a bank, degrees for angles and metres for lengths.

    ``sampling`` per class: "grid" draws distinct cross-product points (all of
    them if the budget is None or covers the product); "continuous" draws
    every parameter uniformly within its range.
    """

    angle_deg: ParamRange = ParamRange(0.0, 360.0, 360, periodic=True)
    radius_m: ParamRange = ParamRange(0.07, 0.10, 50)
    distance_m: ParamRange = ParamRange(0.5, 20.0, 100)
    mouth_deg: ParamRange = ParamRange(5.0, 20.0, 15)
    ear_deg: ParamRange = ParamRange(90.0, 120.0, 20)
    elevation_deg: ParamRange = ParamRange(0.0, 0.0, 1)
    budget_own: int = None
    budget_external: int = None
    sampling_own: str = "grid"
    sampling_external: str = "grid"
    ref_distance: float = 0.1

    def __post_init__(self):
        for name in ("angle_deg", "radius_m", "distance_m", "mouth_deg", "ear_deg", "elevation_deg"):
            object.__setattr__(self, name, ParamRange.from_obj(getattr(self, name)))
        for s in (self.sampling_own, self.sampling_external):
            if s not in ("grid", "continuous"):
                raise DomainError(f"unknown sampling mode {s!r}")
        for b in (self.budget_own, self.budget_external):
            if b is not None and b < 0:
                raise DomainError("budgets must be >= 0")

    @classmethod
    def table_one(cls):
        """Full-scale analytical grid with the reported entry counts."""
        return cls(budget_own=76757, budget_external=76759, sampling_own="continuous")

    def to_dict(self):
        out = {}
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            out[name] = v.__dict__.copy() if isinstance(v, ParamRange) else v
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def axes(self, label):
        if label == "own":
            return ("radius_m", "mouth_deg", "ear_deg")
        return ("angle_deg", "radius_m", "distance_m", "ear_deg", "elevation_deg")

    def product_size(self, label):
        return math.prod(getattr(self, a).count for a in self.axes(label))

    def requested(self, label):
        b = self.budget_own if label == "own" else self.budget_external
        mode = self.sampling_own if label == "own" else self.sampling_external
        n = self.product_size(label)
        if b is None:
            return n
        if mode == "grid" and b > n:
            raise DomainError(f"{label} budget {b} exceeds the {n}-point grid; use continuous sampling")
        return b

    def contains(self, label, geometry):
        g = geometry
        ok = self.radius_m.contains(g.sphere_radius) and self.ear_deg.contains(math.degrees(g.ear_azimuth))
        ok = ok and self.mouth_deg.contains(math.degrees(g.cap_half_angle))
        if label == "external":
            ok = ok and self.angle_deg.contains(math.degrees(g.source_azimuth))
            ok = ok and self.distance_m.contains(g.source_distance)
            ok = ok and self.elevation_deg.contains(math.degrees(g.source_elevation))
        return ok


@dataclass
class BankEntry:
    id: str
    label: str
    geometry: SceneGeometry
    split: str = None
    tf: TransferFunction = None


@dataclass
class AtfBank:
    entries: list
    grid_spec: GridSpec
    grid: FrequencyGrid = FrequencyGrid()
    medium: Medium = Medium()

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DomainError("bank ids must be unique")

    def __len__(self):
        return len(self.entries)

    def select(self, label=None, split=None):
        return [e for e in self.entries
                if (label is None or e.label == label) and (split is None or e.split == split)]

    def counts(self):
        out = {}
        for e in self.entries:
            key = f"{e.label}/{e.split}" if e.split else e.label
            out[key] = out.get(key, 0) + 1
        return dict(sorted(out.items()))


def _geometry(label, params, spec):
    mouth_mid = 0.5 * (spec.mouth_deg.lo + spec.mouth_deg.hi)
    if label == "own":
        R, mouth, ear = params
        return SceneGeometry(sphere_radius=R, cap_half_angle=math.radians(mouth),
                             ear_azimuth=math.radians(ear), ref_distance=spec.ref_distance)
    az, R, d, ear, el = params
    # mouth angle plays no part in the external chain; kept mid-range as metadata
    return SceneGeometry(sphere_radius=R, cap_half_angle=math.radians(mouth_mid),
                         ear_azimuth=math.radians(ear), source_distance=d,
                         source_azimuth=math.radians(az), source_elevation=math.radians(el),
                         ref_distance=min(spec.ref_distance, 0.5 * d))


def _draw_params(label, spec, rng):
    axes = [getattr(spec, a) for a in spec.axes(label)]
    n = spec.requested(label)
    mode = spec.sampling_own if label == "own" else spec.sampling_external
    if mode == "continuous":
        cols = [rng.uniform(a.lo, a.hi, n) if a.count > 1 else np.full(n, a.values()[0]) for a in axes]
        return [tuple(float(c[i]) for c in cols) for i in range(n)]
    values = [a.values() for a in axes]
    total = spec.product_size(label)
    if n == total:
        return [tuple(float(v) for v in p) for p in itertools.product(*values)]
    flat = np.sort(rng.choice(total, size=n, replace=False))
    shape = [len(v) for v in values]
    idx = np.unravel_index(flat, shape)
    return [tuple(float(values[j][idx[j][i]]) for j in range(len(values))) for i in range(n)]


def plan_bank(spec, seed):
    """Entries (ids, labels, geometries) without evaluating any ATF."""
    rng = np.random.default_rng(seed)
    entries = []
    for label, prefix in (("own", "own"), ("external", "ext")):
        for i, params in enumerate(_draw_params(label, spec, rng)):
            entries.append(BankEntry(f"{prefix}-{i:06d}", label, _geometry(label, params, spec)))
    return entries


def evaluate_entry(entry, medium, grid, policy=DEFAULT_POLICY):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConditioningWarning)
        if entry.label == "own":
            return own_atf(entry.geometry, medium, grid, policy=policy)
        return external_atf(entry.geometry, medium, grid, policy=policy)


def generate_bank(spec, medium=Medium(), grid=FrequencyGrid(), seed=0, threads=1, policy=DEFAULT_POLICY):
    entries = plan_bank(spec, seed)
    if not entries:
        raise DomainError("bank would be empty")
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            tfs = list(ex.map(lambda e: evaluate_entry(e, medium, grid, policy), entries))
    else:
        tfs = [evaluate_entry(e, medium, grid, policy) for e in entries]
    for e, tf in zip(entries, tfs):
        e.tf = tf
    return AtfBank(entries, spec, grid, medium)


def split_bank(bank, fractions=(0.70, 0.10, 0.20), seed=0):
    """Stratified per-class train/val/test assignment."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DomainError("fractions must be three non-negative numbers summing to 1")
    rng = np.random.default_rng(seed)
    out = []
    for label in LABELS:
        group = [e for e in bank.entries if e.label == label]
        if not group:
            continue
        if len(group) < 3:
            raise DomainError(f"class {label!r} has fewer than 3 entries")
        n = len(group)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        n_train = min(n_train, n - n_val)
        order = rng.permutation(n)
        names = np.empty(n, dtype=object)
        names[order[:n_train]] = "train"
        names[order[n_train:n_train + n_val]] = "val"
        names[order[n_train + n_val:]] = "test"
        out.extend(replace(e, split=str(s)) for e, s in zip(group, names))
    out.sort(key=lambda e: e.id)
    return AtfBank(out, bank.grid_spec, bank.grid, bank.medium)


# ---------------------------------------------------------------------------
# on-disk format


def encode_atfb(values, sample_rate):
    values = np.asarray(values, dtype=complex)
    head = ATFB_MAGIC + struct.pack("<IId", ATFB_VERSION, values.shape[0], float(sample_rate))
    body = np.empty((values.shape[0], 2), dtype="<f8")
    body[:, 0] = values.real
    body[:, 1] = values.imag
    return head + body.tobytes()


def decode_atfb(blob):
    if len(blob) < 20 or blob[:4] != ATFB_MAGIC:
        raise FormatError("not an ATFB file (bad magic)")
    version, n_bins, sr = struct.unpack("<IId", blob[4:20])
    if version != ATFB_VERSION:
        raise FormatError(f"unsupported ATFB version {version}")
    if len(blob) != 20 + 16 * n_bins:
        raise FormatError("truncated ATFB payload")
    body = np.frombuffer(blob[20:], dtype="<f8").reshape(n_bins, 2)
    return body[:, 0] + 1j * body[:, 1], sr


def write_bank(bank, out_dir, run_config=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for e in bank.entries:
        name = f"{e.id}.atfb"
        (out / name).write_bytes(encode_atfb(e.tf.values, bank.grid.sample_rate))
        records.append({"id": e.id, "class": e.label, "split": e.split, "file": name,
                        "geometry": e.geometry.to_dict(), "notes": e.tf.notes})
    manifest = {
        "format_version": BANK_FORMAT_VERSION,
        "grid": {"sample_rate": bank.grid.sample_rate, "n_bins": bank.grid.n_bins},
        "medium": {"c": bank.medium.c, "rho0": bank.medium.rho0},
        "grid_spec": bank.grid_spec.to_dict(),
        "counts": bank.counts(),
        "entries": records,
        "run_config": run_config,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out / "manifest.json"


def read_bank(path):
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read bank manifest: {exc}") from exc
    if manifest.get("format_version") != BANK_FORMAT_VERSION:
        raise FormatError("unsupported bank format version")
    grid = FrequencyGrid(**manifest["grid"])
    medium = Medium(**manifest["medium"])
    entries = []
    for rec in manifest["entries"]:
        values, sr = decode_atfb((path / rec["file"]).read_bytes())
        if sr != grid.sample_rate or values.shape[0] != grid.n_bins:
            raise FormatError(f"{rec['file']} does not match the bank grid")
        geom = SceneGeometry(**rec["geometry"])
        tf = TransferFunction(grid, values, rec["class"], geom, list(rec.get("notes", [])))
        entries.append(BankEntry(rec["id"], rec["class"], geom, rec["split"], tf))
    return AtfBank(entries, GridSpec.from_dict(manifest["grid_spec"]), grid, medium)
