"""Resistance-aware throttling: the safe-power cap, policy-in-loop evaluation, Pareto sweep."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .battery import BatteryParams, BatteryState, CELSIUS, arrhenius_r0, open_circuit_voltage, power_capability
from .engine import SimScenario, TteDistribution, run_monte_carlo
from .errors import InvalidParameters
from .kernel import capability, throttle_scalar


@dataclass(frozen=True)
class ThrottlePolicy:
    kappa: float = 0.9
    z_crit: float = 0.15
    t_crit: float = CELSIUS
    u_min: float = 0.2
    active: bool = True
    # False: the collapse-point capability (U - V_p)^2 / (4 R0).  True: the
    # largest power keeping v_term >= v_cut (an extension, off by default).
    cutoff_aware: bool = False

    def __post_init__(self):
        bad = policy_violations(self)
        if bad:
            raise InvalidParameters("; ".join(f"{k}: {m}" for k, m in bad))


def policy_violations(p: ThrottlePolicy) -> list:
    out = []
    if not 0 < p.kappa <= 1:
        out.append(("kappa", "must lie in (0, 1]"))
    if not 0 < p.u_min <= 1:
        out.append(("u_min", "must lie in (0, 1]"))
    if not 0 <= p.z_crit <= 1:
        out.append(("z_crit", "must lie in [0, 1]"))
    if not p.t_crit >= 0:
        out.append(("t_crit", "must be non-negative kelvin"))
    return out


@dataclass
class PolicyEvaluation:
    j_mean: float  # mean of the integral of u over [0, tau], seconds
    tte: TteDistribution
    constraint_ok: bool
    p_violation: float  # empirical P(tau < t_min)
    floor_fraction: float  # share of alive time with u pinned at u_min


def safe_power_cap(params: BatteryParams, state: BatteryState, kappa: float) -> float:
    """Device-side cap ``kappa * eta * P_max``."""
    return kappa * params.eta * power_capability(params, state)


def throttle_request(policy: ThrottlePolicy, params: BatteryParams, state: BatteryState, p_req: float):
    """Returns ``(p_req_after, u)``."""
    if p_req < 0:
        raise ValueError("p_req must be non-negative")
    e = open_circuit_voltage(params, state.z) - state.v_p
    p_max = capability(e, arrhenius_r0(params, state.t_core), params.v_cut, policy.cutoff_aware)
    p, u, _, _ = throttle_scalar(policy.active, policy.kappa, policy.z_crit, policy.t_crit, policy.u_min,
                                 params.eta, p_max, state.z, state.t_core, float(p_req))
    return float(p), float(u)


def evaluate_policy(scenario: SimScenario, policy: ThrottlePolicy, n_runs: int, t_min: float,
                    epsilon: float = 0.05, workers: int = 1) -> PolicyEvaluation:
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    d = run_monte_carlo(replace(scenario, throttle=policy), n_runs, workers, envelope=False)
    ok = ~d.faults
    # censored runs survive past t_min whenever t_min is inside the horizon
    early = np.sum((d.run_tte[ok] < t_min) & ~d.censored[ok])
    p_violation = float(early / np.sum(ok))
    alive = np.nansum(np.where(d.censored, d.horizon, d.run_tte))
    return PolicyEvaluation(
        j_mean=float(np.nanmean(d.j_int)),
        tte=d,
        constraint_ok=p_violation <= epsilon,
        p_violation=p_violation,
        floor_fraction=float(np.nansum(d.floor_time) / alive) if alive > 0 else 0.0,
    )


@dataclass
class ParetoPoint:
    kappa: float
    j_mean: float
    t05: float
    mean_tte: float


def pareto_sweep(scenario: SimScenario, kappa_grid, n_runs: int, policy: ThrottlePolicy = None,
                 t_min: float = 0.0, workers: int = 1) -> list:
    """One policy evaluation per kappa on the shared seed, sorted by kappa."""
    base = policy if policy is not None else ThrottlePolicy()
    out = []
    for kappa in sorted(float(k) for k in kappa_grid):
        ev = evaluate_policy(scenario, replace(base, kappa=kappa), n_runs, t_min, workers=workers)
        out.append(ParetoPoint(kappa, ev.j_mean, ev.tte.t05, ev.tte.mean))
    return out
