"""Sensitivity (elasticity, Sobol, risk frontier), usage perturbation, validation metrics."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import qmc

from .battery import CELSIUS, BatteryState
from .engine import SegmentCache, SimScenario, TteDistribution, run_monte_carlo, run_statistic
from .errors import DegenerateVariance, InvalidParameters, NoOverlap
from .usage import high_power_bias, scale_dwell

INPUT_NAMES = ("t_env", "q_max", "r_ref", "h_a", "eta", "rho_b", "rho_bg", "rho_ws")

# Battery ranges follow the nominal parameter table; the ambient range spans
# the cold-to-room band and the multiplier ranges are our own choice.
DEFAULT_RANGES = {
    "t_env": (CELSIUS - 20.0, CELSIUS + 25.0),
    "q_max": (1.6, 2.1),
    "r_ref": (0.030, 0.090),
    "h_a": (0.15, 0.80),
    "eta": (0.85, 0.95),
    "rho_b": (0.3, 1.0),
    "rho_bg": (0.3, 1.0),
    "rho_ws": (1.0, 2.0),
}


@dataclass(frozen=True)
class SensitivityInput:
    name: str
    lo: float
    hi: float

    def __post_init__(self):
        if self.name not in INPUT_NAMES:
            raise InvalidParameters(f"unknown sensitivity input {self.name!r}")
        # lo == hi is allowed: a collapsed range pins the input
        if not self.lo <= self.hi:
            raise InvalidParameters(f"{self.name}: range lo={self.lo} exceeds hi={self.hi}")

    @classmethod
    def default(cls, name: str) -> "SensitivityInput":
        return cls(name, *DEFAULT_RANGES[name])


def default_inputs() -> tuple:
    return tuple(SensitivityInput.default(n) for n in INPUT_NAMES)


def input_value(s: SimScenario, name: str) -> float:
    if name == "t_env":
        return s.t_env
    if name in ("rho_b", "rho_bg", "rho_ws"):
        return getattr(s.usage.multipliers, name)
    return getattr(s.battery, name)


def with_input(s: SimScenario, name: str, value: float) -> SimScenario:
    """Scenario with one input replaced.  Moving t_env also moves an initial
    core temperature that sat at ambient."""
    value = float(value)
    if name == "t_env":
        init = s.initial
        if init.t_core == s.t_env:
            init = BatteryState(init.z, init.v_p, value)
        return replace(s, t_env=value, initial=init)
    if name in ("rho_b", "rho_bg", "rho_ws"):
        mult = replace(s.usage.multipliers, **{name: value})
        return replace(s, usage=replace(s.usage, multipliers=mult))
    if name in ("q_max", "r_ref", "h_a", "eta"):
        return replace(s, battery=replace(s.battery, **{name: value}))
    raise InvalidParameters(f"unknown sensitivity input {name!r}")


def _statistic(d: TteDistribution, output: str) -> float:
    if output == "mean":
        return d.mean
    if output == "t05":
        return d.t05
    return d.quantile(float(output))


# -- paired comparisons ------------------------------------------------------------


@dataclass
class PairedDifference:
    estimate: float
    lo: float
    hi: float

    @property
    def excludes_zero(self) -> bool:
        return self.lo > 0.0 or self.hi < 0.0


def _boot_stat(tte: np.ndarray, dead: np.ndarray, idx: np.ndarray, output: str) -> np.ndarray:
    """Statistic over uncensored runs for every bootstrap row of ``idx``."""
    vals = np.where(dead[idx], tte[idx], np.inf)
    n_dead = dead[idx].sum(axis=1)
    if output == "mean":
        return np.where(np.isfinite(vals), vals, 0.0).sum(axis=1) / np.maximum(n_dead, 1)
    q = 0.05 if output == "t05" else float(output)
    vals.sort(axis=1)
    rank = np.minimum(n_dead, np.maximum(1, np.ceil(q * n_dead - 1e-9).astype(np.int64)))
    return vals[np.arange(len(idx)), rank - 1]


def paired_difference(base: TteDistribution, other: TteDistribution, output: str = "t05",
                      n_boot: int = 2000, seed: int = 0, level: float = 0.95) -> PairedDifference:
    """``stat(other) - stat(base)`` with a percentile bootstrap over paired replications."""
    if base.n_runs != other.n_runs:
        raise ValueError("paired comparison needs equal run counts")
    est = _statistic(other, output) - _statistic(base, output)
    dead_a = ~(base.censored | base.faults)
    dead_b = ~(other.censored | other.faults)
    rng = np.random.default_rng(seed)
    n = base.n_runs
    diffs = np.empty(n_boot)
    block = 200
    for s0 in range(0, n_boot, block):
        idx = rng.integers(0, n, size=(min(block, n_boot - s0), n))
        diffs[s0:s0 + len(idx)] = (_boot_stat(other.run_tte, dead_b, idx, output)
                                   - _boot_stat(base.run_tte, dead_a, idx, output))
    alpha = 0.5 * (1.0 - level)
    lo, hi = np.quantile(diffs, [alpha, 1.0 - alpha])
    return PairedDifference(float(est), float(min(lo, est)), float(max(hi, est)))


# -- local elasticity ---------------------------------------------------------------


@dataclass
class Elasticity:
    name: str
    si: float
    base: float
    perturbed: float
    delta_frac: float


def local_elasticity(scenario: SimScenario, inp, delta_frac: float = 0.10, n_runs: int = 1000,
                     output: str = "mean", workers: int = 1) -> Elasticity:
    """``SI = ((tau(theta (1 + delta)) - tau(theta)) / tau(theta)) / delta`` on common random numbers."""
    name = inp.name if isinstance(inp, SensitivityInput) else str(inp)
    if not delta_frac > 0:
        raise ValueError("delta_frac must be positive")
    theta = input_value(scenario, name)
    if theta == 0:
        raise ValueError(f"base value of {name} is zero; elasticity undefined")
    base = _statistic(run_monte_carlo(scenario, n_runs, workers, envelope=False), output)
    pert = _statistic(run_monte_carlo(with_input(scenario, name, theta * (1.0 + delta_frac)), n_runs, workers,
                                      envelope=False), output)
    return Elasticity(name, ((pert - base) / base) / delta_frac, base, pert, delta_frac)


# -- Sobol indices ----------------------------------------------------------------


@dataclass
class SobolResult:
    names: tuple
    s1: np.ndarray
    st: np.ndarray
    s1_ci: np.ndarray  # (k, 2)
    st_ci: np.ndarray
    n_base: int
    variance: float

    def ranking(self) -> list:
        """Input names by decreasing total-order index."""
        order = np.argsort(-self.st, kind="stable")
        return [self.names[i] for i in order]


def saltelli_design(ranges, n_base: int, seed: int = 0):
    """Matrices A, B (n_base x k) and AB (k x n_base x k) over uniform ranges."""
    k = len(ranges)
    m = int(round(math.log2(n_base)))
    u = qmc.Sobol(d=2 * k, scramble=True, seed=seed).random_base2(m)
    lo = np.array([r[0] for r in ranges], dtype=np.float64)
    hi = np.array([r[1] for r in ranges], dtype=np.float64)
    a = lo + (hi - lo) * u[:, :k]
    b = lo + (hi - lo) * u[:, k:]
    ab = np.repeat(a[None, :, :], k, axis=0)
    for i in range(k):
        ab[i, :, i] = b[:, i]
    return a, b, ab


def jansen_indices(fa: np.ndarray, fb: np.ndarray, fab: np.ndarray):
    """First-order and total indices from Jansen's estimators; ``fab`` is (k, n)."""
    var = np.var(np.concatenate([fa, fb]))
    if not var > 1e-12 * max(1.0, float(np.mean(np.concatenate([fa, fb]))) ** 2):
        raise DegenerateVariance(f"output variance {var:g} is numerically zero")
    st = 0.5 * np.mean((fa[None, :] - fab) ** 2, axis=1) / var
    s1 = 1.0 - 0.5 * np.mean((fb[None, :] - fab) ** 2, axis=1) / var
    return s1, st, var


def sobol_from_outputs(names, fa, fb, fab, n_boot: int = 1000, seed: int = 0, level: float = 0.95) -> SobolResult:
    fa, fb, fab = np.asarray(fa, float), np.asarray(fb, float), np.asarray(fab, float)
    s1, st, var = jansen_indices(fa, fb, fab)
    n = fa.size
    rng = np.random.default_rng(seed)
    bs1 = np.empty((n_boot, len(names)))
    bst = np.empty((n_boot, len(names)))
    done = 0
    while done < n_boot:
        idx = rng.integers(0, n, size=n)
        try:
            bs1[done], bst[done], _ = jansen_indices(fa[idx], fb[idx], fab[:, idx])
        except DegenerateVariance:
            bs1[done], bst[done] = s1, st
        done += 1
    alpha = 0.5 * (1.0 - level)
    q = [alpha, 1.0 - alpha]
    s1_ci = np.quantile(bs1, q, axis=0).T
    st_ci = np.quantile(bst, q, axis=0).T
    # percentile intervals can miss a skewed point estimate; widen to contain it
    s1_ci[:, 0] = np.minimum(s1_ci[:, 0], s1)
    s1_ci[:, 1] = np.maximum(s1_ci[:, 1], s1)
    st_ci[:, 0] = np.minimum(st_ci[:, 0], st)
    st_ci[:, 1] = np.maximum(st_ci[:, 1], st)
    return SobolResult(tuple(names), s1, st, s1_ci, st_ci, n, float(var))


def sobol_analyze(func, ranges, names, n_base: int, seed: int = 0, n_boot: int = 1000) -> SobolResult:
    """Saltelli sampling + Jansen estimators for a vectorised ``func(X) -> y``."""
    _check_base(n_base, len(ranges))
    a, b, ab = saltelli_design(ranges, n_base, seed)
    k = len(ranges)
    fa = np.asarray(func(a), float)
    fb = np.asarray(func(b), float)
    fab = np.asarray(func(ab.reshape(k * n_base, k)), float).reshape(k, n_base)
    return sobol_from_outputs(names, fa, fb, fab, n_boot, seed)


def _check_base(n_base: int, k: int):
    if n_base < 64 or n_base & (n_base - 1):
        raise ValueError("n_base must be a power of 2 and at least 64")
    if k < 2:
        raise ValueError("Sobol analysis needs at least 2 inputs")


def ishigami(x: np.ndarray, a: float = 7.0, b: float = 0.1) -> np.ndarray:
    x = np.atleast_2d(x)
    return np.sin(x[:, 0]) + a * np.sin(x[:, 1]) ** 2 + b * x[:, 2] ** 4 * np.sin(x[:, 0])


def ishigami_indices(a: float = 7.0, b: float = 0.1):
    """Analytic (S1, ST) of the Ishigami function on [-pi, pi]^3."""
    v1 = 0.5 * (1.0 + b * math.pi ** 4 / 5.0) ** 2
    v2 = a * a / 8.0
    v13 = b * b * math.pi ** 8 * (1.0 / 18.0 - 1.0 / 50.0)
    v = v1 + v2 + v13
    s1 = np.array([v1 / v, v2 / v, 0.0])
    st = np.array([(v1 + v13) / v, v2 / v, v13 / v])
    return s1, st


def sobol_indices(scenario: SimScenario, inputs=None, n_base: int = 256, output: str = "t05",
                  inner_runs: int = 64, seed: int = 0, n_boot: int = 1000, workers: int = 1,
                  progress=None) -> SobolResult:
    """Sobol indices of a TTE statistic over uniform input ranges.

    Every design point reuses the scenario's seed for its ``inner_runs``
    replications, so the statistic is a deterministic function of the inputs.
    """
    inputs = tuple(inputs) if inputs is not None else default_inputs()
    _check_base(n_base, len(inputs))
    names = [i.name for i in inputs]
    ranges = [(i.lo, i.hi) for i in inputs]
    a, b, ab = saltelli_design(ranges, n_base, seed)
    k = len(inputs)
    rows = np.concatenate([a, b, ab.reshape(k * n_base, k)])

    def evaluate(block):
        cache = SegmentCache()
        out = []
        for r in block:
            s = scenario
            for name, v in zip(names, rows[r]):
                s = with_input(s, name, v)
            out.append(run_statistic(s, inner_runs, output, cache))
            if progress is not None:
                progress()
        return out

    idx = list(range(len(rows)))
    workers = max(1, int(workers))
    y = np.empty(len(rows))
    if workers == 1:
        y[:] = evaluate(idx)
    else:
        blocks = [idx[w::workers] for w in range(workers)]
        with ThreadPoolExecutor(max_workers=workers) as ex:
            for blk, vals in zip(blocks, ex.map(evaluate, blocks)):
                y[blk] = vals
    fa, fb, fab = y[:n_base], y[n_base:2 * n_base], y[2 * n_base:].reshape(k, n_base)
    return sobol_from_outputs(names, fa, fb, fab, n_boot, seed)


# -- risk frontier -------------------------------------------------------------------


@dataclass
class RiskFrontier:
    t_env: np.ndarray
    rho_ws: np.ndarray
    t05: np.ndarray  # (len(t_env), len(rho_ws))
    t_min: float
    crossing: np.ndarray  # per t_env, rho_ws where t05 falls to t_min; nan = no crossing

    @property
    def violating(self) -> np.ndarray:
        """Cells below the frontier, ``t05 < t_min``."""
        return self.t05 < self.t_min

    @property
    def empty(self) -> bool:
        return not self.violating.any()


def frontier_from_grid(t_env, rho_ws, t05, t_min: float) -> RiskFrontier:
    t_env = np.asarray(t_env, float)
    rho_ws = np.asarray(rho_ws, float)
    t05 = np.asarray(t05, float)
    cross = np.full(len(t_env), np.nan)
    for i in range(len(t_env)):
        g = t05[i] - t_min
        if g[0] < 0:
            cross[i] = rho_ws[0]  # already below at the lowest penalty
            continue
        for j in range(len(rho_ws) - 1):
            if g[j] >= 0 > g[j + 1]:
                w = g[j] / (g[j] - g[j + 1])
                cross[i] = rho_ws[j] + w * (rho_ws[j + 1] - rho_ws[j])
                break
    return RiskFrontier(t_env, rho_ws, t05, float(t_min), cross)


def risk_frontier(scenario: SimScenario, t_env_grid, rho_ws_grid, t_min: float, n_runs: int = 500,
                  workers: int = 1) -> RiskFrontier:
    if len(t_env_grid) == 0 or len(rho_ws_grid) == 0:
        raise ValueError("frontier grids must be non-empty")
    t05 = np.empty((len(t_env_grid), len(rho_ws_grid)))
    for i, te in enumerate(t_env_grid):
        for j, rw in enumerate(rho_ws_grid):
            s = with_input(with_input(scenario, "t_env", te), "rho_ws", rw)
            t05[i, j] = run_monte_carlo(s, n_runs, workers, envelope=False).t05
    return frontier_from_grid(t_env_grid, rho_ws_grid, t05, t_min)


# -- usage perturbation study --------------------------------------------------------


@dataclass
class PerturbationRow:
    variant: str
    mean: float
    d_mean_pct: float
    t05: float
    d_t05_pct: float
    mean_diff: PairedDifference = None
    t05_diff: PairedDifference = None


def usage_variants(scenario: SimScenario, delta: float = 0.10) -> dict:
    u = scenario.usage
    return {
        "dwell_x0.8": replace(scenario, usage=replace(u, ctmc=scale_dwell(u.ctmc, 0.8))),
        "dwell_x1.2": replace(scenario, usage=replace(u, ctmc=scale_dwell(u.ctmc, 1.2))),
        "high_power_bias": replace(scenario, usage=replace(u, ctmc=high_power_bias(u.ctmc, u.modes, delta))),
    }


def usage_perturbation_study(scenario: SimScenario, n_runs: int = 2000, workers: int = 1, n_boot: int = 2000,
                             delta: float = 0.10) -> list:
    base = run_monte_carlo(scenario, n_runs, workers, envelope=False)
    rows = [PerturbationRow("baseline", base.mean, 0.0, base.t05, 0.0)]
    for name, s in usage_variants(scenario, delta).items():
        d = run_monte_carlo(s, n_runs, workers, envelope=False)
        rows.append(PerturbationRow(
            name, d.mean, 100.0 * (d.mean / base.mean - 1.0), d.t05, 100.0 * (d.t05 / base.t05 - 1.0),
            paired_difference(base, d, "mean", n_boot), paired_difference(base, d, "t05", n_boot),
        ))
    return rows


# -- validation ---------------------------------------------------------------------


@dataclass
class ValidationReport:
    mape: float  # percent
    delta_tau: float  # s
    n_points: int


def validation_metrics(predicted, reference_t, reference_v, reference_tau: float,
                       predicted_tau: float = None) -> ValidationReport:
    """MAPE of the predicted voltage on the reference timestamps, and |tau_pred - tau_ref|.

    ``predicted`` is a ``Trajectory`` or a ``(t, v)`` pair; with a pair, pass
    ``predicted_tau``.
    """
    if hasattr(predicted, "v_term"):
        pt, pv = np.asarray(predicted.t, float), np.asarray(predicted.v_term, float)
        tau = predicted.tte if predicted_tau is None else predicted_tau
    else:
        pt, pv = (np.asarray(a, float) for a in predicted)
        tau = predicted_tau
    if tau is None:
        raise ValueError("predicted shutdown time is required")
    rt, rv = np.asarray(reference_t, float), np.asarray(reference_v, float)
    if rt.size < 2 or pt.size < 2:
        raise ValueError("need at least two points in each series")
    lo, hi = max(pt[0], rt[0]), min(pt[-1], rt[-1])
    keep = (rt >= lo) & (rt <= hi)
    if not lo <= hi or not keep.any():
        raise NoOverlap(f"predicted [{pt[0]:g}, {pt[-1]:g}] s and reference [{rt[0]:g}, {rt[-1]:g}] s do not overlap")
    v_at = np.interp(rt[keep], pt, pv)
    mape = float(np.mean(np.abs(v_at - rv[keep]) / rv[keep]) * 100.0)
    return ValidationReport(mape, float(abs(tau - reference_tau)), int(keep.sum()))
