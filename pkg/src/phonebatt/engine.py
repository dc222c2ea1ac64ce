"""Hybrid simulation: CTMC jumps + electro-thermal flow + debounced first passage.

A run owns ``RngStream(seed, i)``.  Its child stream 0 drives the chain (dwell
and destination uniforms), child 1 drives session loads, so two scenario
variants run with the same seed share their random numbers segment by segment.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernel as K
from .battery import (
    AgingParams,
    BatteryParams,
    BatteryState,
    CELSIUS,
    apply_aging,
)
from .errors import (
    AllRunsCensored,
    InvalidParameters,
    NegativeEffectiveVoltage,
    SimulationFault,
    StepUnderflow,
)
from .numerics import RngStream, empirical_quantile, pchip_coefficients, truncated_normal_batch
from .usage import UsageModel, build_generator, request_scale

ABLATIONS = ("isothermal", "no_burst", "no_polarization")
REPORT_QUANTILES = (0.05, 0.50, 0.95)
GRID_DT_S = 60.0
SEGMENT_CHUNK = 64
TOLERANCES = (1e-7, 1e-5, 1e-4)  # z, v_p [V], T [K]


@dataclass(frozen=True)
class SimScenario:
    battery: BatteryParams = field(default_factory=BatteryParams)
    usage: UsageModel = field(default_factory=UsageModel)
    t_env: float = CELSIUS
    initial: BatteryState = None
    horizon: float = 24 * 3600.0
    initial_mode: int = 0
    throttle: object = None
    ablations: frozenset = frozenset()
    seed: int = 2026
    aging: AgingParams = None
    # optional deterministic schedule replacing the chain: ((duration_s, p_req_w), ...);
    # the last entry holds until the horizon
    profile: tuple = None

    def __post_init__(self):
        if self.initial is None:
            object.__setattr__(self, "initial", BatteryState(1.0, 0.0, self.t_env))
        if isinstance(self.initial_mode, str):
            object.__setattr__(self, "initial_mode", self.usage.mode_index(self.initial_mode))
        object.__setattr__(self, "ablations", frozenset(self.ablations))
        bad = scenario_violations(self)
        if bad:
            raise InvalidParameters("; ".join(f"{k}: {m}" for k, m in bad))

    @property
    def cell(self) -> BatteryParams:
        """Battery parameters after cycle aging, if any."""
        if self.aging is None:
            return self.battery
        return apply_aging(self.battery, self.aging)

    def variant(self, **changes) -> "SimScenario":
        return replace(self, **changes)


def scenario_violations(s: SimScenario) -> list:
    out = []
    if not s.horizon > 0:
        out.append(("horizon", "must be positive"))
    if not (0.0 < s.initial.z <= 1.0):
        out.append(("initial.z", "must lie in (0, 1]"))
    if not s.t_env > 0:
        out.append(("t_env", "must be positive kelvin"))
    unknown = set(s.ablations) - set(ABLATIONS)
    if unknown:
        out.append(("ablations", f"unknown variants {sorted(unknown)}"))
    if not 0 <= s.initial_mode < s.usage.n_modes:
        out.append(("initial_mode", f"must index one of {s.usage.n_modes} modes"))
    if not 0 <= int(s.seed) < 1 << 64:
        out.append(("seed", "must be an unsigned 64-bit integer"))
    if s.profile is not None:
        if len(s.profile) == 0:
            out.append(("profile", "must contain at least one segment"))
        for k, seg in enumerate(s.profile):
            if len(seg) != 2 or not seg[0] > 0 or not seg[1] >= 0:
                out.append((f"profile[{k}]", "expected (duration_s > 0, p_req_w >= 0)"))
    return out


# -- detector ----------------------------------------------------------------


@dataclass
class ShutdownDetector:
    dt_persist: float = 2.0
    below_since: float = None


@dataclass(frozen=True)
class Shutdown:
    t: float
    cause: str


def update_detector(d: ShutdownDetector, v_term: float, v_cut: float, feasible: bool, t: float):
    """Advance the debounce window.  Returns a ``Shutdown`` or ``None``."""
    below = -1.0 if d.below_since is None else d.below_since
    below, fired, t_star, cause = K.detector_step(below, float(t), float(v_term), float(v_cut), bool(feasible),
                                                  float(d.dt_persist))
    d.below_since = None if below < 0.0 else below
    if fired:
        return Shutdown(float(t_star), K.CAUSE_NAMES[cause])
    return None


# -- results -----------------------------------------------------------------


@dataclass
class Trajectory:
    t: np.ndarray
    z: np.ndarray
    v_p: np.ndarray
    t_core: np.ndarray
    v_term: np.ndarray
    current: np.ndarray
    mode: np.ndarray
    p_req: np.ndarray
    tte: float
    censored: bool
    shutdown_cause: str
    z_end: float
    q_out: float  # delivered charge, A*s
    j_int: float  # time integral of the throttle factor, s
    floor_time: float
    gate_time: float
    z_grid: np.ndarray = field(repr=False, default=None)

    def charge_error(self, q_max: float, z0: float) -> float:
        """Relative mismatch between SOC drop and integrated current."""
        scale = q_max * 3600.0
        return abs(scale * (z0 - self.z_end) - self.q_out) / scale


@dataclass
class RunSummary:
    """Scalar outcome of one replication (no time series)."""

    tte: float
    censored: bool
    cause: str
    z_end: float
    q_out: float
    j_int: float
    floor_time: float
    gate_time: float
    z_grid: np.ndarray = field(repr=False, default=None)


@dataclass
class TteDistribution:
    run_tte: np.ndarray  # per run, horizon for censored runs
    censored: np.ndarray
    causes: tuple
    faults: np.ndarray
    samples: np.ndarray  # uncensored, non-faulted, in run order
    mean: float
    quantiles: dict
    survival_t: np.ndarray
    survival_s: np.ndarray
    envelope_t: np.ndarray
    envelope: np.ndarray  # columns p05, p50, p95
    survivors: np.ndarray
    horizon: float
    j_int: np.ndarray = field(repr=False, default=None)
    floor_time: np.ndarray = field(repr=False, default=None)
    charge_error: np.ndarray = field(repr=False, default=None)

    @property
    def n_runs(self) -> int:
        return len(self.run_tte)

    @property
    def censored_fraction(self) -> float:
        return float(np.mean(self.censored))

    @property
    def n_faults(self) -> int:
        return int(np.sum(self.faults))

    @property
    def t05(self) -> float:
        return self.quantiles[0.05]

    def quantile(self, q: float) -> float:
        return empirical_quantile(self.samples, q)

    def survival(self, t) -> np.ndarray:
        """S(t) = P(tau > t); censored runs count as survivors."""
        idx = np.searchsorted(self.survival_t, np.asarray(t, dtype=np.float64), side="right") - 1
        return self.survival_s[np.clip(idx, 0, None)]


# -- preparation ---------------------------------------------------------------


@dataclass
class _Prepared:
    bp: np.ndarray
    ocv: tuple
    dudt: tuple
    rates: np.ndarray  # per-mode exit rate, 1/s
    cum_probs: np.ndarray  # per-mode destination CDF
    scale: np.ndarray  # p_req / p_load per mode
    mu: np.ndarray
    sigma: np.ndarray
    cap: np.ndarray
    use_lam: bool
    lam_z: np.ndarray
    lam_f: np.ndarray
    z0: float
    vp0: float
    tc0: float
    iso: bool
    no_pol: bool
    no_burst: bool
    thr: tuple
    seg_hint: int


def prepare(s: SimScenario) -> _Prepared:
    p = s.cell
    bp = np.empty(K.N_PARAMS)
    bp[K.Q_MAX], bp[K.R_REF], bp[K.R_P], bp[K.C_P] = p.q_max, p.r_ref, p.r_p, p.c_p
    bp[K.TAU_P], bp[K.E_A], bp[K.R_GAS], bp[K.T_REF] = p.tau_p, p.e_a, p.r_gas, p.t_ref
    bp[K.M_C_TH], bp[K.H_A], bp[K.ETA], bp[K.V_CUT] = p.m_c_th, p.h_a, p.eta, p.v_cut
    bp[K.DT_PERSIST] = p.dt_persist
    ocv = (p.ocv.knots_x, pchip_coefficients(p.ocv.knots_x, p.ocv.knots_y, p.ocv.slopes))
    dudt = (np.asarray(p.du_dT.breaks, dtype=np.float64), np.asarray(p.du_dT.values, dtype=np.float64))

    u = s.usage
    g = build_generator(u.ctmc)
    m = u.n_modes
    rates = np.array([g.exit_rate(i) / 60.0 for i in range(m)])
    cum = np.zeros((m, m))
    for i in range(m):
        pr = g.jump_probabilities(i) if m > 1 else np.ones(1)
        cum[i] = np.cumsum(pr)
        cum[i] /= cum[i, -1]
    scale = np.array([request_scale(md, u.multipliers) for md in u.modes])
    mu = np.array([md.mu_p for md in u.modes])
    sigma = np.array([md.sigma_p for md in u.modes])
    cap = np.array([md.p_cap for md in u.modes])
    if u.rate_scaling is not None:
        lam_z = np.asarray(u.rate_scaling.soc_knots, dtype=np.float64)
        lam_f = np.asarray(u.rate_scaling.factors, dtype=np.float64)
    else:
        lam_z, lam_f = np.zeros(1), np.ones((m, 1))

    pol = s.throttle
    if pol is not None and pol.active:
        thr = (True, float(pol.kappa), float(pol.z_crit), float(pol.t_crit), float(pol.u_min),
               bool(getattr(pol, "cutoff_aware", False)))
    else:
        thr = (False, 1.0, 0.0, 0.0, 1.0, False)

    # expected jumps over the horizon from the stationary exit rate, with slack
    if s.profile is not None:
        hint = len(s.profile)
    else:
        hint = int(math.ceil(1.3 * s.horizon * float(np.max(rates)))) + 16 if m > 0 else 1
        hint = min(hint, int(math.ceil(1.3 * s.horizon * float(np.mean(rates)))) + 16)
    hint = SEGMENT_CHUNK * max(1, math.ceil(hint / SEGMENT_CHUNK))
    return _Prepared(
        bp, ocv, dudt, rates, cum, scale, mu, sigma, cap,
        u.rate_scaling is not None, lam_z, lam_f,
        float(s.initial.z), float(s.initial.v_p), float(s.initial.t_core),
        "isothermal" in s.ablations, "no_polarization" in s.ablations, "no_burst" in s.ablations,
        thr, hint,
    )


class _Segments:
    """Lazily extended, deterministic segment draws for one replication.

    Holds the mode sequence, unit exponentials and raw session loads.  These
    depend only on the chain, the mode load table and the stream, so one
    instance can serve every scenario variant that shares those.
    """

    def __init__(self, s: SimScenario, prep: _Prepared, rng: RngStream):
        self.profile = s.profile
        self.initial_mode = s.initial_mode
        self.cum_probs = prep.cum_probs
        self.mu, self.sigma, self.cap = prep.mu, prep.sigma, prep.cap
        self.chain = rng.child(0)
        self.loads = rng.child(1)
        self._pending_u = 0.0
        if s.profile is not None:
            n = len(s.profile)
            self.mode = np.full(n, -1, dtype=np.int64)
            self.load = np.array([float(seg[1]) for seg in s.profile])
            self.exp = np.array([float(seg[0]) for seg in s.profile])
            self.exp[-1] = np.inf
        else:
            self.mode = np.empty(0, dtype=np.int64)
            self.load = np.empty(0)
            self.exp = np.empty(0)

    def ensure(self, n: int):
        while len(self.mode) < n:
            if self.profile is not None:
                raise SimulationFault("profile exhausted")
            self._extend()

    def _extend(self):
        c = SEGMENT_CHUNK
        e = -np.log1p(-self.chain.uniform(c))  # Exp(1) by inverse CDF
        uj = self.chain.uniform(c)
        modes = np.empty(c, dtype=np.int64)
        cur = self.initial_mode if len(self.mode) == 0 else self._next(self.mode[-1], self._pending_u)
        for k in range(c):
            modes[k] = cur
            if k < c - 1:
                cur = self._next(cur, uj[k])
        self._pending_u = uj[c - 1]
        load = truncated_normal_batch(self.mu[modes], self.sigma[modes], 0.0, self.cap[modes], self.loads)
        self.mode = np.concatenate([self.mode, modes])
        self.load = np.concatenate([self.load, load])
        self.exp = np.concatenate([self.exp, e])

    def _next(self, mode: int, u: float) -> int:
        row = self.cum_probs[mode]
        j = int(np.searchsorted(row, u, side="right"))
        return min(j, len(row) - 1)

    def arrays(self, pr: _Prepared, n: int):
        """(mode, device request, exponential, exit rate) for the first ``n`` segments."""
        self.ensure(n)
        mode, exp = self.mode[:n], self.exp[:n]
        if self.profile is not None:
            rate = np.ones(n)
            rate[-1] = 0.0
            return mode, self.load[:n], exp, rate
        load = pr.mu[mode] if pr.no_burst else self.load[:n]
        return mode, load * pr.scale[mode], exp, pr.rates[mode]


def _call_kernel(s: SimScenario, pr: _Prepared, seg: tuple, grid_z, record, rec, horizon=None):
    mode, preq, exp, rate = seg
    return K.simulate(
        pr.bp, pr.ocv[0], pr.ocv[1], pr.dudt[0], pr.dudt[1],
        mode, preq, exp, rate,
        pr.use_lam, pr.lam_z, pr.lam_f,
        pr.z0, pr.vp0, pr.tc0, float(s.t_env), float(s.horizon if horizon is None else horizon),
        pr.iso, pr.no_pol,
        pr.thr[0], pr.thr[1], pr.thr[2], pr.thr[3], pr.thr[4], pr.thr[5],
        TOLERANCES[0], TOLERANCES[1], TOLERANCES[2],
        GRID_DT_S, grid_z,
        record, rec,
    )


def _n_grid(s: SimScenario) -> int:
    return int(math.floor(s.horizon / GRID_DT_S + 1e-9)) + 1


def _integrate(s: SimScenario, pr: _Prepared, rng: RngStream, record: bool, envelope: bool,
               seg: _Segments = None, horizon: float = None):
    if seg is None:
        seg = _Segments(s, pr, rng)
    n_seg = pr.seg_hint if s.profile is None else len(s.profile)
    cap = int(s.horizon) + 2 * n_seg + _n_grid(s) + 16 if record else 1
    while True:
        grid_z = np.full(_n_grid(s) if envelope else 0, np.nan)
        rec = np.empty((cap, K.N_REC))
        out = _call_kernel(s, pr, seg.arrays(pr, n_seg), grid_z, record, rec, horizon)
        status = out[0]
        if status == K.NEED_SEGMENTS:
            n_seg += SEGMENT_CHUNK
            if record:
                cap += 2 * SEGMENT_CHUNK
            continue
        if status == K.RECORD_FULL:
            cap *= 2
            continue
        if status == K.STEP_UNDERFLOW:
            raise StepUnderflow(f"step underflow at t = {out[1]:.6g} s")
        if status == K.NEGATIVE_EMF:
            raise NegativeEffectiveVoltage(f"non-positive effective voltage at t = {out[1]:.6g} s")
        return out, grid_z, rec


def _summary(s: SimScenario, out, grid_z) -> RunSummary:
    _, t_end, cause, _, _, z, _, _, q, j, fl, gt = out
    censored = cause == K.CAUSE_HORIZON
    if grid_z.size:
        # the detector fires at the window start; later grid samples belong to a dead phone
        tg = np.arange(grid_z.size) * GRID_DT_S
        if not censored:
            grid_z[tg >= t_end] = np.nan
    return RunSummary(float(t_end), bool(censored), K.CAUSE_NAMES[cause], float(z), float(q), float(j),
                      float(fl), float(gt), grid_z)


def run_trajectory(scenario: SimScenario, rng: RngStream = None) -> Trajectory:
    """One replication with the full sampled time series."""
    if rng is None:
        rng = RngStream(scenario.seed, 1)
    pr = prepare(scenario)
    out, grid_z, rec = _integrate(scenario, pr, rng, record=True, envelope=True)
    r = _summary(scenario, out, grid_z)
    n = out[4]
    cols = [rec[:n, k].copy() for k in range(K.N_REC)]
    cols[6] = cols[6].astype(np.int64)
    return Trajectory(*cols, tte=r.tte, censored=r.censored, shutdown_cause=r.cause, z_end=r.z_end,
                      q_out=r.q_out, j_int=r.j_int, floor_time=r.floor_time, gate_time=r.gate_time,
                      z_grid=r.z_grid)


def run_replication(scenario: SimScenario, index: int, prep: _Prepared = None, envelope: bool = True) -> RunSummary:
    pr = prepare(scenario) if prep is None else prep
    out, grid_z, _ = _integrate(scenario, pr, RngStream(scenario.seed, index), record=False, envelope=envelope)
    return _summary(scenario, out, grid_z)


def _run_block(scenario, prep, indices, envelope):
    res = []
    for i in indices:
        try:
            res.append(run_replication(scenario, i, prep, envelope))
        except (StepUnderflow, NegativeEffectiveVoltage) as exc:
            res.append(exc)
    return res


def run_batch(scenario: SimScenario, n_runs: int, workers: int = 1, envelope: bool = True) -> list:
    """Replications 1..n_runs in index order; faults come back as exceptions."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    prep = prepare(scenario)
    idx = list(range(1, n_runs + 1))
    workers = max(1, int(workers))
    if workers == 1:
        return _run_block(scenario, prep, idx, envelope)
    blocks = [idx[k::workers] for k in range(workers)]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        parts = list(ex.map(lambda b: _run_block(scenario, prep, b, envelope), blocks))
    merged = [None] * n_runs
    for b, part in zip(blocks, parts):
        for i, r in zip(b, part):
            merged[i - 1] = r
    return merged


def _nearest_rank_columns(z: np.ndarray, qs) -> tuple:
    """Per-column nearest-rank quantiles over non-NaN entries."""
    srt = np.sort(z, axis=0)  # NaN sorts last
    alive = np.sum(~np.isnan(z), axis=0)
    out = np.full((z.shape[1], len(qs)), np.nan)
    cols = np.flatnonzero(alive > 0)
    for k, q in enumerate(qs):
        rank = np.minimum(alive[cols], np.maximum(1, np.ceil(q * alive[cols] - 1e-9).astype(np.int64)))
        out[cols, k] = srt[rank - 1, cols]
    return out, alive


def distribution_from_runs(scenario: SimScenario, runs: list, q_max: float = None) -> TteDistribution:
    n = len(runs)
    faults = np.array([isinstance(r, Exception) for r in runs])
    if faults.all():
        raise SimulationFault(f"all {n} runs faulted; first: {runs[0]}")
    ok = [r for r in runs if not isinstance(r, Exception)]
    h = float(scenario.horizon)
    run_tte = np.array([np.nan if isinstance(r, Exception) else (h if r.censored else r.tte) for r in runs])
    censored = np.array([False if isinstance(r, Exception) else r.censored for r in runs])
    causes = tuple("fault" if isinstance(r, Exception) else r.cause for r in runs)
    live = ~faults & ~censored
    samples = run_tte[live]
    if samples.size == 0:
        raise AllRunsCensored(f"all {n} runs survived to the {h:g} s horizon")
    quantiles = {q: empirical_quantile(samples, q) for q in REPORT_QUANTILES}

    # S(t) over non-faulted runs; censored runs stay in the risk set
    m = int(np.sum(~faults))
    death = np.sort(samples)
    st = np.concatenate([[0.0], np.unique(death[death > 0.0])])
    ss = 1.0 - np.searchsorted(death, st, side="right") / m

    grids = [r.z_grid for r in ok if r.z_grid is not None and r.z_grid.size]
    if grids:
        zz = np.vstack(grids)
        env, alive = _nearest_rank_columns(zz, (0.05, 0.50, 0.95))
        last = int(np.max(np.flatnonzero(alive > 0))) + 1
        env_t = np.arange(last) * GRID_DT_S
        env, alive = env[:last], alive[:last]
    else:
        env_t, env, alive = np.empty(0), np.empty((0, 3)), np.empty(0, dtype=np.int64)

    j = np.array([np.nan if isinstance(r, Exception) else r.j_int for r in runs])
    fl = np.array([np.nan if isinstance(r, Exception) else r.floor_time for r in runs])
    ce = None
    if q_max is not None:
        z0 = scenario.initial.z
        ce = np.array([np.nan if isinstance(r, Exception) else abs(q_max * 3600.0 * (z0 - r.z_end) - r.q_out)
                       / (q_max * 3600.0) for r in runs])
    return TteDistribution(run_tte, censored, causes, faults, samples, float(np.mean(samples)), quantiles,
                           st, ss, env_t, env, alive, h, j, fl, ce)


def run_monte_carlo(scenario: SimScenario, n_runs: int, workers: int = 1, envelope: bool = True) -> TteDistribution:
    runs = run_batch(scenario, n_runs, workers, envelope)
    return distribution_from_runs(scenario, runs, scenario.cell.q_max)


@dataclass
class AblationRow:
    variant: str
    mean: float
    t05: float
    censored_fraction: float
    dist: TteDistribution = field(repr=False)


def run_ablation_suite(scenario: SimScenario, n_runs: int, workers: int = 1) -> list:
    """Full model and each single ablation, all on the same seed."""
    rows = []
    for name in ("full",) + ABLATIONS:
        abl = frozenset() if name == "full" else frozenset({name})
        d = run_monte_carlo(replace(scenario, ablations=abl), n_runs, workers, envelope=False)
        rows.append(AblationRow(name, d.mean, d.t05, d.censored_fraction, d))
    return rows


# -- scalar statistics for design-point studies --------------------------------


class SegmentCache:
    """Per-replication segment draws shared across scenario variants.

    Valid only for variants with the same chain, initial mode and mode load
    table, which is the case across Sobol design points.
    """

    def __init__(self):
        self._segs = {}
        self._key = None

    def get(self, s: SimScenario, pr: _Prepared, index: int) -> _Segments:
        key = (s.seed, s.initial_mode, s.usage.ctmc, s.usage.modes, s.profile)
        if key != self._key:
            self._segs.clear()
            self._key = key
        seg = self._segs.get(index)
        if seg is None:
            seg = _Segments(s, pr, RngStream(s.seed, index))
            self._segs[index] = seg
        return seg


def _certain_death(s: SimScenario, pr: _Prepared, seg: _Segments) -> bool:
    """True when the run provably shuts down before the horizon.

    Under discharge ``I >= P_batt / E_max`` with ``E_max`` the top of the OCV
    curve, so the sampled loads fix a lower bound on delivered charge.  Once
    that bound exceeds the initial charge, the cell must have hit empty (and
    a sub-cutoff voltage that stays down) well before the horizon.  Only
    valid for the constant-rate chain without throttling.
    """
    if pr.thr[0] or pr.use_lam or s.profile is not None:
        return False
    t_b = float(s.horizon) - 2.0 * (float(pr.bp[K.DT_PERSIST]) + 2.0)
    if t_b <= 0.0:
        return False
    n = pr.seg_hint
    while True:
        mode, preq, exp, rate = seg.arrays(pr, n)
        cum = np.cumsum(exp / rate)
        if cum[-1] >= t_b:
            break
        n += SEGMENT_CHUNK
    k = int(np.searchsorted(cum, t_b))
    dur = np.diff(np.concatenate([[0.0], cum[:k], [t_b]]))
    energy = float(np.dot(preq[:k + 1], dur)) / pr.bp[K.ETA]
    e_max = float(np.max(pr.ocv[1][:, 0])) - min(pr.vp0, 0.0)
    return energy / e_max > pr.z0 * pr.bp[K.Q_MAX] * 3600.0


def run_statistic(scenario: SimScenario, n_runs: int, output="t05", cache: SegmentCache = None) -> float:
    """Mean TTE or a TTE quantile from ``n_runs`` replications, as one number.

    ``output`` is ``"mean"``, ``"t05"`` or a quantile level in (0, 1).  For a
    quantile, a run still alive past the current k-th smallest death time
    (k being the largest rank the estimator could use) cannot move the answer,
    so it is stopped there.  The result equals the full computation exactly.
    """
    if cache is None:
        cache = SegmentCache()
    pr = prepare(scenario)
    h = float(scenario.horizon)
    if output == "mean":
        vals = []
        for i in range(1, n_runs + 1):
            out, _, _ = _integrate(scenario, pr, None, False, False, cache.get(scenario, pr, i))
            if out[2] != K.CAUSE_HORIZON:
                vals.append(out[1])
        if not vals:
            raise AllRunsCensored("all runs survived to the horizon")
        return float(np.mean(vals))

    q = 0.05 if output == "t05" else float(output)
    k_max = min(n_runs, max(1, math.ceil(q * n_runs - 1e-9)))
    # a truncated run can still have a window that opened before its stop time
    margin = float(scenario.cell.dt_persist) + 2.0
    deaths = []
    truncated = []
    for i in range(1, n_runs + 1):
        thr = sorted(deaths)[k_max - 1] if len(deaths) >= k_max else np.inf
        stop = h if thr + margin >= h else thr + margin
        out, _, _ = _integrate(scenario, pr, None, False, False, cache.get(scenario, pr, i), horizon=stop)
        if out[2] != K.CAUSE_HORIZON:
            deaths.append(out[1])
        elif stop < h:
            truncated.append(i)
    n_unc = len(deaths)
    if truncated and math.ceil(q * n_unc - 1e-9) != math.ceil(q * (n_unc + len(truncated)) - 1e-9):
        # the rank depends on how many truncated runs die before the horizon
        for i in truncated:
            seg = cache.get(scenario, pr, i)
            if _certain_death(scenario, pr, seg):
                n_unc += 1
                continue
            out, _, _ = _integrate(scenario, pr, None, False, False, seg)
            if out[2] != K.CAUSE_HORIZON:
                deaths.append(out[1])
                n_unc += 1
        # truncated deaths all lie beyond the k_max-th known death, so the
        # rank-r sample is among the known ones
        r = min(n_unc, max(1, math.ceil(q * n_unc - 1e-9)))
        return float(sorted(deaths)[r - 1])
    if not deaths:
        raise AllRunsCensored("all runs survived to the horizon")
    return empirical_quantile(np.asarray(deaths), q)
