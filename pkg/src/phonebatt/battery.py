"""Electro-thermal Thevenin cell: Arrhenius R0, constant-power current solve, heat, aging."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._jit import njit
from .errors import CapacityExhausted, InvalidParameters, NegativeEffectiveVoltage
from .numerics import MonotoneInterpolant, build_monotone_interpolant, pchip_eval

R_GAS = 8.314
T_REF_DEFAULT = 298.15
CELSIUS = 273.15

# Default U(z): 18650-class curve.  z = 0 sits at 2.60 V so the 3.0 V phone
# cutoff leaves a ~5% reserve that load sag eats into.
DEFAULT_OCV_SOC = (0.00, 0.02, 0.05, 0.10, 0.15, 0.20, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80, 0.90, 1.00)
DEFAULT_OCV_V = (2.60, 2.86, 3.03, 3.28, 3.45, 3.54, 3.62, 3.68, 3.74, 3.81, 3.89, 3.98, 4.07, 4.18)


@dataclass(frozen=True)
class EntropicMap:
    """Piecewise-constant dU/dT over SOC, in V/K.

    ``values[i]`` applies on ``[breaks[i-1], breaks[i])``; so there is one
    more value than break.  The default is identically zero.
    """

    breaks: tuple = ()
    values: tuple = (0.0,)

    def __post_init__(self):
        object.__setattr__(self, "breaks", tuple(float(b) for b in self.breaks))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) != len(self.breaks) + 1:
            raise InvalidParameters("entropic map needs len(values) == len(breaks) + 1")
        if any(b1 <= b0 for b0, b1 in zip(self.breaks, self.breaks[1:])):
            raise InvalidParameters("entropic map breaks must be strictly increasing")

    @classmethod
    def constant(cls, value: float) -> "EntropicMap":
        return cls((), (value,))

    def __call__(self, z: float) -> float:
        return float(dudt_lookup(np.asarray(self.breaks, dtype=np.float64), np.asarray(self.values), z))


@njit(inline="always")
def dudt_lookup(breaks, values, z):
    i = 0
    while i < breaks.shape[0] and z >= breaks[i]:
        i += 1
    return values[i]


@dataclass(frozen=True)
class BatteryParams:
    q_max: float = 2.0
    r_ref: float = 0.050
    r_p: float = 0.020
    c_p: float = 4500.0
    tau_p: float = None
    e_a: float = 24000.0
    r_gas: float = R_GAS
    t_ref: float = T_REF_DEFAULT
    m_c_th: float = 20.0
    h_a: float = 0.35
    eta: float = 0.90
    v_cut: float = 3.0
    dt_persist: float = 2.0
    du_dT: EntropicMap = field(default_factory=EntropicMap)
    ocv: MonotoneInterpolant = None

    def __post_init__(self):
        if self.ocv is None:
            object.__setattr__(self, "ocv", build_monotone_interpolant(DEFAULT_OCV_SOC, DEFAULT_OCV_V))
        if self.tau_p is None:
            object.__setattr__(self, "tau_p", self.r_p * self.c_p)
        problems = battery_violations(self)
        if problems:
            raise InvalidParameters("; ".join(f"{k}: {m}" for k, m in problems))

    def with_polarization(self, r_p: float, c_p: float) -> "BatteryParams":
        return replace(self, r_p=r_p, c_p=c_p, tau_p=r_p * c_p)


def battery_violations(p: BatteryParams) -> list:
    """Every invariant violation as ``(field, message)``."""
    out = []
    for name in ("q_max", "r_ref", "r_p", "c_p", "m_c_th", "h_a", "v_cut", "t_ref", "r_gas"):
        val = getattr(p, name)
        if not (isinstance(val, (int, float)) and math.isfinite(val) and val > 0):
            out.append((name, f"must be a positive finite number, got {val!r}"))
    if not (isinstance(p.e_a, (int, float)) and math.isfinite(p.e_a) and p.e_a >= 0):
        out.append(("e_a", f"must be non-negative, got {p.e_a!r}"))
    if not (isinstance(p.eta, (int, float)) and 0 < p.eta <= 1):
        out.append(("eta", f"must lie in (0, 1], got {p.eta!r}"))
    if not (isinstance(p.dt_persist, (int, float)) and p.dt_persist >= 0):
        out.append(("dt_persist", f"must be non-negative, got {p.dt_persist!r}"))
    if isinstance(p.r_p, (int, float)) and isinstance(p.c_p, (int, float)) and p.tau_p is not None:
        if not abs(p.tau_p - p.r_p * p.c_p) <= 1e-9 * abs(p.tau_p):
            out.append(("tau_p", f"{p.tau_p!r} inconsistent with r_p*c_p = {p.r_p * p.c_p!r}"))
    if isinstance(p.ocv, MonotoneInterpolant):
        lo, hi = p.ocv.domain
        if lo > 0.0 or hi < 1.0:
            out.append(("ocv", "must cover SOC range [0, 1]"))
        if not p.ocv.is_increasing():
            out.append(("ocv", "must be strictly increasing in SOC"))
    else:
        out.append(("ocv", "missing OCV interpolant"))
    return out


@dataclass
class BatteryState:
    z: float = 1.0
    v_p: float = 0.0
    t_core: float = T_REF_DEFAULT

    def __post_init__(self):
        if not (0.0 <= self.z <= 1.0):
            raise InvalidParameters(f"z must lie in [0, 1], got {self.z}")
        if not self.t_core > 0:
            raise InvalidParameters(f"t_core must be positive kelvin, got {self.t_core}")
        if not math.isfinite(self.v_p):
            raise InvalidParameters("v_p must be finite")


@dataclass(frozen=True)
class AgingParams:
    """Cycle-history inputs.  k_aging and beta_fade defaults are placeholders, not measured values."""

    r_fresh: float = 0.050
    q_design: float = 2.0
    k_aging: float = 0.005
    beta_fade: float = 2e-4
    n_cycles: float = 0.0


def aging_violations(a: AgingParams) -> list:
    out = []
    if not a.n_cycles >= 0:
        out.append(("n_cycles", "must be non-negative"))
    if not a.k_aging >= 0:
        out.append(("k_aging", "must be non-negative"))
    if not a.beta_fade >= 0:
        out.append(("beta_fade", "must be non-negative"))
    if not a.r_fresh > 0:
        out.append(("r_fresh", "must be positive"))
    if not a.q_design > 0:
        out.append(("q_design", "must be positive"))
    if a.beta_fade * a.n_cycles >= 1:
        out.append(("beta_fade", "beta_fade * n_cycles must stay below 1"))
    return out


@dataclass
class CurrentSolution:
    current: float
    v_term: float
    discriminant: float
    feasible: bool


# -- scalar kernels shared with the trajectory integrator --------------------


@njit
def arrhenius_factor(e_a, r_gas, t_ref, t_core):
    return math.exp((e_a / r_gas) * (1.0 / t_core - 1.0 / t_ref))


@njit(inline="always")
def solve_current_scalar(e, r0, p_batt):
    """Smaller root of ``R0 I^2 - E I + P = 0``.  Returns (I, V, disc, feasible)."""
    disc = e * e - 4.0 * r0 * p_batt
    if disc < 0.0:
        return 0.0, e, disc, False
    # 2P/(E + sqrt(disc)) is the small root without cancellation
    i = 2.0 * p_batt / (e + math.sqrt(disc))
    return i, e - i * r0, disc, True


# -- public operations ---------------------------------------------------------


def arrhenius_r0(params: BatteryParams, t_core: float) -> float:
    if not t_core > 0:
        raise ValueError("t_core must be positive kelvin")
    if t_core == params.t_ref:
        return params.r_ref
    return params.r_ref * arrhenius_factor(params.e_a, params.r_gas, params.t_ref, t_core)


def apply_aging(params: BatteryParams, aging: AgingParams) -> BatteryParams:
    if aging.beta_fade * aging.n_cycles >= 1:
        raise CapacityExhausted(
            f"beta_fade*n_cycles = {aging.beta_fade * aging.n_cycles:g} leaves no capacity"
        )
    bad = aging_violations(aging)
    if bad:
        raise InvalidParameters("; ".join(f"{k}: {m}" for k, m in bad))
    r_ref = aging.r_fresh * (1.0 + aging.k_aging * math.sqrt(aging.n_cycles))
    q_max = aging.q_design * (1.0 - aging.beta_fade * aging.n_cycles)
    return replace(params, r_ref=r_ref, q_max=q_max)


def open_circuit_voltage(params: BatteryParams, z: float) -> float:
    f = params.ocv
    return float(pchip_eval(f.knots_x, f.knots_y, f.slopes, z))


def solve_current(params: BatteryParams, state: BatteryState, p_batt: float) -> CurrentSolution:
    if p_batt < 0:
        raise ValueError("p_batt must be non-negative (discharge only)")
    e = open_circuit_voltage(params, state.z) - state.v_p
    if e <= 0.0 and p_batt > 0.0:
        raise NegativeEffectiveVoltage(f"U(z) - v_p = {e:g} V with {p_batt:g} W requested")
    r0 = arrhenius_r0(params, state.t_core)
    i, v, disc, ok = solve_current_scalar(e, r0, p_batt)
    return CurrentSolution(float(i), float(v), float(disc), bool(ok))


def power_capability(params: BatteryParams, state: BatteryState) -> float:
    e = open_circuit_voltage(params, state.z) - state.v_p
    return e * e / (4.0 * arrhenius_r0(params, state.t_core))


def heat_generation(params: BatteryParams, state: BatteryState, current: float) -> float:
    r0 = arrhenius_r0(params, state.t_core)
    joule = current * current * r0 + state.v_p * state.v_p / params.r_p
    return joule + current * state.t_core * params.du_dT(state.z)


def instantaneous_efficiency(params: BatteryParams, state: BatteryState, p_load: float, current: float) -> float:
    if p_load < 0:
        raise ValueError("p_load must be non-negative")
    losses = current * current * arrhenius_r0(params, state.t_core) + state.v_p * state.v_p / params.r_p
    denom = p_load + losses
    if denom == 0.0:
        return 1.0
    return p_load / denom


def state_derivatives(params: BatteryParams, state: BatteryState, current: float, t_env: float):
    dz = -current / (3600.0 * params.q_max)
    dvp = -state.v_p / params.tau_p + current / params.c_p
    q_gen = heat_generation(params, state, current)
    dT = (q_gen - params.h_a * (state.t_core - t_env)) / params.m_c_th
    return dz, dvp, dT
