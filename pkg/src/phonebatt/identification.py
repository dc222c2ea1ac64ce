"""Parameter identification from cycle data: OCV map, ohmic step, RC relaxation."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .battery import BatteryParams, arrhenius_r0, open_circuit_voltage
from .errors import NonMonotoneTime, NoQuasiStaticSegment, NoRestSegment, NoStepFound, SchemaError
from .numerics import TAU_SEEDS, build_monotone_interpolant, fit_exponential_relaxation

CSV_COLUMNS = ("time_s", "voltage_v", "current_a", "cycle_id", "cell_id")
STEP_MIN_A = 0.5
REST_CURRENT_A = 1e-3
MAX_OCV_KNOTS = 50
MIN_QS_SAMPLES = 10


@dataclass
class CyclePulseRecord:
    t: np.ndarray
    v: np.ndarray
    i: np.ndarray  # discharge-positive
    cycle_id: str = "0"
    cell_id: str = "0"

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.i = np.asarray(self.i, dtype=np.float64)
        if not (self.t.ndim == self.v.ndim == self.i.ndim == 1):
            raise ValueError("t, v, i must be 1-D")
        if not (len(self.t) == len(self.v) == len(self.i)):
            raise ValueError("t, v, i differ in length")
        if len(self.t) < 2:
            raise ValueError("a record needs at least 2 samples")
        bad = np.flatnonzero(np.diff(self.t) <= 0)
        if bad.size:
            raise NonMonotoneTime(f"time not increasing at sample {bad[0] + 1} (t={self.t[bad[0] + 1]:g})")

    def __eq__(self, other):
        if not isinstance(other, CyclePulseRecord):
            return NotImplemented
        return (self.cycle_id == other.cycle_id and self.cell_id == other.cell_id
                and np.array_equal(self.t, other.t) and np.array_equal(self.v, other.v)
                and np.array_equal(self.i, other.i))


@dataclass
class IdentifiedParams:
    ocv_knots: tuple  # ((z, V), ...) ascending in z
    r0: float
    r_p: float
    c_p: float
    tau_p: float
    rmse: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("r0", "r_p", "c_p", "tau_p"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not abs(self.tau_p - self.r_p * self.c_p) <= 1e-9 * self.tau_p:
            raise ValueError("tau_p inconsistent with r_p * c_p")

    def apply(self, base: BatteryParams = None) -> BatteryParams:
        """Battery parameters with the identified values; r0 is taken at t_ref."""
        base = base if base is not None else BatteryParams()
        changes = dict(r_ref=self.r0, r_p=self.r_p, c_p=self.c_p, tau_p=self.tau_p)
        if len(self.ocv_knots) >= 2:
            zs, vs = zip(*self.ocv_knots)
            if zs[0] <= 0.0 and zs[-1] >= 1.0:
                changes["ocv"] = build_monotone_interpolant(zs, vs)
        return replace(base, **changes)


# -- ingest -------------------------------------------------------------------------


def ingest_cycles(source, discharge_negative: bool = False) -> list:
    """Read the normalized cycle CSV into one record per (cell_id, cycle_id).

    Records keep the order of first appearance.  With ``discharge_negative``
    the current column is negated so discharge is positive.
    """
    path = Path(source)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        groups: dict = {}
        for row in reader:
            line = reader.line_num
            try:
                t, v, i = float(row["time_s"]), float(row["voltage_v"]), float(row["current_a"])
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{path}:{line}: non-numeric field ({exc})") from None
            key = (row["cell_id"], row["cycle_id"])
            g = groups.setdefault(key, ([], [], [], []))
            if g[0] and t <= g[0][-1]:
                raise NonMonotoneTime(f"{path}:{line}: time {t:g} does not follow {g[0][-1]:g} "
                                      f"(cell {key[0]}, cycle {key[1]})")
            g[0].append(t)
            g[1].append(v)
            g[2].append(-i if discharge_negative else i)
            g[3].append(line)
    out = []
    for (cell, cycle), (t, v, i, _) in groups.items():
        if len(t) < 2:
            raise SchemaError(f"{path}: cell {cell} cycle {cycle} has fewer than 2 samples")
        out.append(CyclePulseRecord(np.array(t), np.array(v), np.array(i), cycle_id=cycle, cell_id=cell))
    return out


def write_cycles(path, records, discharge_negative: bool = False):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        sign = -1.0 if discharge_negative else 1.0
        for r in records:
            for t, v, i in zip(r.t, r.v, r.i):
                w.writerow((repr(float(t)), repr(float(v)), repr(float(sign * i) + 0.0), r.cycle_id, r.cell_id))


# -- forward synthesis -----------------------------------------------------------------


def synthesize_record(params: BatteryParams, profile, dt: float = 1.0, z0: float = 1.0,
                      noise_v: float = 0.0, seed: int = 0, cycle_id: str = "0", cell_id: str = "0",
                      t_core: float = None) -> CyclePulseRecord:
    """Sample the cell's terminal voltage under a piecewise-constant current profile.

    ``profile`` is ``((duration_s, current_a), ...)``.  The polarization and SOC
    updates are the exact solution for constant current, so only the optional
    Gaussian voltage noise perturbs the samples.  Temperature is held at
    ``t_core`` (default t_ref).
    """
    t_core = params.t_ref if t_core is None else t_core
    r0 = arrhenius_r0(params, t_core)
    decay = math.exp(-dt / params.tau_p)
    ts, vs, cs = [], [], []
    z, vp, t = z0, 0.0, 0.0
    for duration, cur in profile:
        n = int(round(duration / dt))
        for _ in range(n):
            ts.append(t)
            cs.append(cur)
            vs.append(open_circuit_voltage(params, z) - vp - cur * r0)
            z -= cur * dt / (3600.0 * params.q_max)
            vp = vp * decay + params.r_p * cur * (1.0 - decay)
            t += dt
    ts.append(t)
    cs.append(profile[-1][1])
    vs.append(open_circuit_voltage(params, z) - vp - profile[-1][1] * r0)
    v = np.array(vs)
    if noise_v > 0:
        v = v + np.random.default_rng(seed).normal(0.0, noise_v, v.size)
    return CyclePulseRecord(np.array(ts), v, np.array(cs), cycle_id=cycle_id, cell_id=cell_id)


# -- OCV --------------------------------------------------------------------------------


def _runs(mask: np.ndarray) -> list:
    """(start, stop) index pairs of contiguous True runs."""
    edges = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def extract_ocv(record: CyclePulseRecord, q_max: float, i_threshold: float, z_start: float = 1.0) -> tuple:
    """OCV knots ``((z, V), ...)`` ascending in z from the longest quasi-static discharge segment."""
    mask = (record.i > 0.0) & (record.i <= i_threshold)
    runs = [(a, b) for a, b in _runs(mask) if b - a >= MIN_QS_SAMPLES]
    if not runs:
        raise NoQuasiStaticSegment(f"no discharge segment with 0 < i <= {i_threshold:g} A "
                                   f"lasting {MIN_QS_SAMPLES} samples")
    a, b = max(runs, key=lambda r: r[1] - r[0])
    t, v, i = record.t[a:b], record.v[a:b], record.i[a:b]
    charge = np.concatenate([[0.0], np.cumsum(0.5 * (i[1:] + i[:-1]) * np.diff(t))])
    z = z_start - charge / (3600.0 * q_max)
    keep = np.unique(np.linspace(0, len(t) - 1, min(MAX_OCV_KNOTS, len(t))).round().astype(int))
    z, v = z[keep], v[keep]
    # walking the discharge, voltage must fall strictly; drop knots that do not
    good = [0]
    for k in range(1, len(v)):
        if v[k] < v[good[-1]] and z[k] < z[good[-1]]:
            good.append(k)
    if len(good) < len(v):
        warnings.warn(f"dropped {len(v) - len(good)} non-monotone OCV knot(s)", stacklevel=2)
    return tuple((float(z[k]), float(v[k])) for k in reversed(good))


# -- ohmic step -------------------------------------------------------------------------


def identify_ohmic(record: CyclePulseRecord) -> float:
    """``R0 = dV0 / dI`` across the largest adjacent-sample current step."""
    di = np.diff(record.i)
    k = int(np.argmax(np.abs(di)))
    if abs(di[k]) < STEP_MIN_A:
        raise NoStepFound(f"largest adjacent-sample current step is {abs(di[k]):.3g} A (< {STEP_MIN_A} A)")
    dv = record.v[k + 1] - record.v[k]
    return float(-dv / di[k])


# -- polarization ------------------------------------------------------------------------


def identify_polarization(record: CyclePulseRecord):
    """``(r_p, c_p, tau_p)`` from the longest rest that directly follows a discharge."""
    return _polarization_fit(record)[:3]


def _polarization_fit(record: CyclePulseRecord):
    min_rest = 3.0 * float(TAU_SEEDS[0])
    rest = np.abs(record.i) <= REST_CURRENT_A
    best = None
    for a, b in _runs(rest):
        if a == 0 or record.i[a - 1] <= REST_CURRENT_A:
            continue
        span = record.t[b - 1] - record.t[a]
        if span >= min_rest and b - a >= 5 and (best is None or span > best[2]):
            best = (a, b, span)
    if best is None:
        raise NoRestSegment(f"no rest of at least {min_rest:g} s following a discharge")
    a, b, _ = best
    d_i = float(record.i[a - 1] - record.i[a])
    fit = fit_exponential_relaxation(record.t[a:b], record.v[a:b])
    if fit.vp_negligible or fit.v_p <= 0:
        raise NoRestSegment("rest segment shows no polarization recovery")
    r_p = fit.v_p / d_i
    c_p = fit.tau / r_p
    return float(r_p), float(c_p), float(r_p * c_p), fit.rmse


def identify(records, q_max: float, i_threshold: float = 0.1, z_start: float = 1.0) -> IdentifiedParams:
    """Run the three identification steps over a record set.

    R0 and the RC branch come from the first record where each succeeds;
    the OCV map from the first record holding a quasi-static segment (empty
    when none does).
    """
    r0 = rc = None
    knots = ()
    rmse = {}
    for rec in records:
        if r0 is None:
            try:
                r0 = identify_ohmic(rec)
            except NoStepFound:
                pass
        if rc is None:
            try:
                rc = _polarization_fit(rec)
                rmse["relaxation_v"] = rc[3]
            except NoRestSegment:
                pass
        if not knots:
            try:
                knots = extract_ocv(rec, q_max, i_threshold, z_start)
            except NoQuasiStaticSegment:
                pass
    if r0 is None:
        raise NoStepFound("no record contains a current step")
    if rc is None:
        raise NoRestSegment("no record contains a usable rest segment")
    r_p, c_p, tau_p = rc[:3]
    return IdentifiedParams(knots, r0, r_p, c_p, tau_p, rmse)
