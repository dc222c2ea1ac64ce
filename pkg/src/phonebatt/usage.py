"""Stochastic usage: mode table, CTMC generator, dwell/transition/load sampling, power split."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidMix, InvalidParameters, NonPositiveDwell
from .numerics import RngStream, truncated_normal_batch

MODE_NAMES = ("Idle", "Social", "Video", "Gaming", "WeakSig")


@dataclass(frozen=True)
class ModeSpec:
    name: str
    mu_p: float
    sigma_p: float
    f_scr: float
    f_cpu: float
    f_net: float
    f_bg: float
    p_cap: float = None

    def __post_init__(self):
        if self.p_cap is None:
            object.__setattr__(self, "p_cap", self.mu_p + 5.0 * self.sigma_p)
        bad = mode_violations(self)
        if bad:
            raise InvalidParameters("; ".join(f"{k}: {m}" for k, m in bad))

    @property
    def fractions(self):
        return (self.f_scr, self.f_cpu, self.f_net, self.f_bg)


def mode_violations(m: ModeSpec) -> list:
    out = []
    if any(f < 0 for f in m.fractions):
        out.append(("fractions", "contributor fractions must be non-negative"))
    if abs(sum(m.fractions) - 1.0) > 1e-9:
        out.append(("fractions", f"f_scr+f_cpu+f_net+f_bg = {sum(m.fractions):.12g}, must be 1"))
    if not m.sigma_p > 0:
        out.append(("sigma_p", "must be positive"))
    if not m.mu_p >= 0:
        out.append(("mu_p", "must be non-negative"))
    if not m.p_cap > m.mu_p:
        out.append(("p_cap", "must exceed mu_p"))
    return out


# Discrete activity modes: (mu, sigma) in W and contributor fractions.
DEFAULT_MODES = (
    ModeSpec("Idle", 0.15, 0.05, 0.00, 0.20, 0.20, 0.60),
    ModeSpec("Social", 1.20, 0.30, 0.35, 0.25, 0.20, 0.20),
    ModeSpec("Video", 2.50, 0.40, 0.30, 0.35, 0.25, 0.10),
    ModeSpec("Gaming", 4.50, 0.80, 0.25, 0.55, 0.15, 0.05),
    ModeSpec("WeakSig", 3.20, 0.60, 0.20, 0.25, 0.45, 0.10),
)

DEFAULT_DWELL_MIN = (18.0, 6.0, 12.0, 4.0, 3.0)

# Destination mix per source mode; diagonal unused.
DEFAULT_MIX = (
    (0.00, 0.45, 0.30, 0.15, 0.10),
    (0.35, 0.00, 0.25, 0.15, 0.25),
    (0.45, 0.25, 0.00, 0.20, 0.10),
    (0.55, 0.15, 0.15, 0.00, 0.15),
    (0.50, 0.30, 0.10, 0.10, 0.00),
)

HIGH_POWER_MODES = ("Video", "Gaming", "WeakSig")


@dataclass(frozen=True)
class CtmcSpec:
    dwell_minutes: tuple = DEFAULT_DWELL_MIN
    transition_mix: tuple = DEFAULT_MIX

    def __post_init__(self):
        object.__setattr__(self, "dwell_minutes", tuple(float(d) for d in self.dwell_minutes))
        object.__setattr__(
            self, "transition_mix", tuple(tuple(float(p) for p in row) for row in self.transition_mix)
        )

    @property
    def n_modes(self) -> int:
        return len(self.dwell_minutes)


@dataclass(eq=False)
class GeneratorMatrix:
    """Rate matrix in 1/min."""

    q: np.ndarray

    def __eq__(self, other):
        return isinstance(other, GeneratorMatrix) and np.array_equal(self.q, other.q)

    @property
    def n_modes(self) -> int:
        return self.q.shape[0]

    def exit_rate(self, mode: int) -> float:
        return float(-self.q[mode, mode])

    def jump_probabilities(self, mode: int) -> np.ndarray:
        row = self.q[mode].copy()
        rate = -row[mode]
        row[mode] = 0.0
        return row / rate

    def per_second(self) -> np.ndarray:
        return self.q / 60.0


@dataclass(frozen=True)
class Multipliers:
    rho_b: float = 1.0
    rho_bg: float = 1.0
    rho_ws: float = 1.0


def multiplier_violations(m: Multipliers) -> list:
    out = []
    if not 0 < m.rho_b <= 1:
        out.append(("rho_b", "must lie in (0, 1]"))
    if not 0 < m.rho_bg <= 1:
        out.append(("rho_bg", "must lie in (0, 1]"))
    if not m.rho_ws >= 1:
        out.append(("rho_ws", "must be >= 1"))
    return out


@dataclass(frozen=True)
class RateScaling:
    """SOC-dependent multiplier on each mode's exit rate, piecewise linear in z.

    ``factors[i][k]`` is the multiplier for mode ``i`` at ``soc_knots[k]``.
    ``None`` in a scenario means the constant-rate chain.
    """

    soc_knots: tuple
    factors: tuple

    def __post_init__(self):
        object.__setattr__(self, "soc_knots", tuple(float(z) for z in self.soc_knots))
        object.__setattr__(self, "factors", tuple(tuple(float(v) for v in row) for row in self.factors))
        if len(self.soc_knots) < 1 or any(b <= a for a, b in zip(self.soc_knots, self.soc_knots[1:])):
            raise InvalidParameters("rate-scaling soc_knots must be non-empty and strictly increasing")
        if any(len(row) != len(self.soc_knots) for row in self.factors):
            raise InvalidParameters("rate-scaling factors must match soc_knots in length")
        if any(v <= 0 for row in self.factors for v in row):
            raise InvalidParameters("rate-scaling factors must be positive")

    def __call__(self, mode: int, z: float) -> float:
        return float(np.interp(z, self.soc_knots, self.factors[mode]))


@dataclass
class LoadSample:
    p_load: float
    p_scr: float
    p_cpu: float
    p_net: float
    p_bg: float
    p_req: float
    p_batt: float


@dataclass(frozen=True)
class UsageModel:
    modes: tuple = DEFAULT_MODES
    ctmc: CtmcSpec = field(default_factory=CtmcSpec)
    multipliers: Multipliers = field(default_factory=Multipliers)
    rate_scaling: RateScaling = None

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    def mode_index(self, name: str) -> int:
        for i, m in enumerate(self.modes):
            if m.name == name:
                return i
        raise KeyError(name)


def ctmc_violations(spec: CtmcSpec) -> list:
    out = []
    m = spec.n_modes
    if len(spec.transition_mix) != m:
        out.append(("transition_mix", f"expected {m} rows, got {len(spec.transition_mix)}"))
        return out
    for i, (d, row) in enumerate(zip(spec.dwell_minutes, spec.transition_mix)):
        if not d > 0:
            out.append((f"dwell_minutes[{i}]", f"must be positive, got {d}"))
        if len(row) != m:
            out.append((f"transition_mix[{i}]", f"expected {m} entries"))
            continue
        off = [p for j, p in enumerate(row) if j != i]
        if any(p < 0 for p in row):
            out.append((f"transition_mix[{i}]", "probabilities must be non-negative"))
        if row[i] != 0.0:
            out.append((f"transition_mix[{i}]", "self-transition entry must be 0"))
        if m > 1 and abs(sum(off) - 1.0) > 1e-9:
            out.append((f"transition_mix[{i}]", f"off-diagonal mass {sum(off):.12g} must be 1"))
    return out


def build_generator(spec: CtmcSpec) -> GeneratorMatrix:
    """``q_ij = p_ij / d_i`` off the diagonal, ``q_ii = -1 / d_i``."""
    for i, d in enumerate(spec.dwell_minutes):
        if not d > 0:
            raise NonPositiveDwell(f"dwell time of mode {i} is {d}")
    bad = ctmc_violations(spec)
    if bad:
        raise InvalidMix("; ".join(f"{k}: {m}" for k, m in bad))
    m = spec.n_modes
    q = np.zeros((m, m))
    for i in range(m):
        d = spec.dwell_minutes[i]
        for j in range(m):
            if j != i:
                q[i, j] = spec.transition_mix[i][j] / d
        q[i, i] = -1.0 / d
    return GeneratorMatrix(q)


def spec_from_generator(g: GeneratorMatrix) -> CtmcSpec:
    """Recover dwell times and the destination mix from a generator."""
    m = g.n_modes
    dwell = tuple(-1.0 / g.q[i, i] for i in range(m))
    mix = tuple(
        tuple(0.0 if j == i else g.q[i, j] * dwell[i] for j in range(m)) for i in range(m)
    )
    return CtmcSpec(dwell, mix)


def dwell_from_uniform(rate: float, u: float) -> float:
    """Inverse-CDF exponential draw; ``u`` in (0, 1)."""
    return -math.log(u) / rate


def sample_dwell(q: GeneratorMatrix, mode: int, rng: RngStream) -> float:
    return dwell_from_uniform(q.exit_rate(mode), rng.uniform_open())


def destination_from_uniform(probs: np.ndarray, u: float) -> int:
    cdf = np.cumsum(probs)
    j = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    # never land on a zero-probability destination through round-off
    while probs[min(j, len(probs) - 1)] == 0.0 and j > 0:
        j -= 1
    return min(j, len(probs) - 1)


def sample_transition(q: GeneratorMatrix, mode: int, rng: RngStream) -> int:
    return destination_from_uniform(q.jump_probabilities(mode), rng.uniform())


def sample_session_load(mode: ModeSpec, rng: RngStream) -> float:
    return float(truncated_normal_batch(mode.mu_p, mode.sigma_p, 0.0, mode.p_cap, rng).reshape(()))


def decompose_power(p_load: float, mode: ModeSpec, mult: Multipliers, eta: float) -> LoadSample:
    if p_load < 0:
        raise ValueError("p_load must be non-negative")
    p_scr = mult.rho_b * mode.f_scr * p_load
    p_cpu = mode.f_cpu * p_load
    p_net = mult.rho_ws * mode.f_net * p_load
    p_bg = mult.rho_bg * mode.f_bg * p_load
    p_req = p_scr + p_cpu + p_net + p_bg
    return LoadSample(p_load, p_scr, p_cpu, p_net, p_bg, p_req, p_req / eta)


def request_scale(mode: ModeSpec, mult: Multipliers) -> float:
    """``p_req / p_load`` for this mode under the given multipliers."""
    return mult.rho_b * mode.f_scr + mode.f_cpu + mult.rho_ws * mode.f_net + mult.rho_bg * mode.f_bg


def stationary_distribution(q: GeneratorMatrix) -> np.ndarray:
    m = q.n_modes
    a = np.vstack([q.q.T, np.ones(m)])
    b = np.zeros(m + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, b, rcond=None)
    return pi


def usage_diagnostics(usage: UsageModel) -> dict:
    """Stationary screen-on share and daily jump count implied by the chain.

    Screen-on means any mode with a non-zero screen fraction.
    """
    g = build_generator(usage.ctmc)
    pi = stationary_distribution(g)
    screen_on = sum(p for p, m in zip(pi, usage.modes) if m.f_scr > 0)
    jumps_per_min = float(sum(pi[i] * g.exit_rate(i) for i in range(g.n_modes)))
    mean_p_req = float(
        sum(p * m.mu_p * request_scale(m, usage.multipliers) for p, m in zip(pi, usage.modes))
    )
    return {
        "stationary": [float(p) for p in pi],
        "screen_on_hours_per_day": float(screen_on * 24.0),
        "jumps_per_day": jumps_per_min * 60.0 * 24.0,
        "mean_p_req_w": mean_p_req,
    }


def scale_dwell(spec: CtmcSpec, factor: float) -> CtmcSpec:
    return CtmcSpec(tuple(d * factor for d in spec.dwell_minutes), spec.transition_mix)


def high_power_bias(spec: CtmcSpec, modes, delta: float = 0.10, targets=HIGH_POWER_MODES) -> CtmcSpec:
    """Shift ``delta`` extra mass onto high-power destinations, then renormalise.

    The extra mass in each row is split across that row's high-power
    destinations in proportion to their existing probabilities.
    """
    names = [m.name for m in modes]
    target_idx = {names.index(t) for t in targets if t in names}
    rows = []
    for i, row in enumerate(spec.transition_mix):
        hp = [j for j in target_idx if j != i]
        mass = sum(row[j] for j in hp)
        new = list(row)
        if mass > 0:
            for j in hp:
                new[j] = row[j] + delta * row[j] / mass
        total = sum(new[j] for j in range(len(new)) if j != i)
        rows.append(tuple(0.0 if j == i else new[j] / total for j in range(len(new))))
    return CtmcSpec(spec.dwell_minutes, tuple(rows))
