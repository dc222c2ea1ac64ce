"""Run configuration: a hierarchical JSON document, defaulted and validated.

Temperatures are kelvin, times seconds, powers watts.  Every violation is
reported with its dotted config path; loading fails with all of them at once.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from types import SimpleNamespace

from .battery import (
    DEFAULT_OCV_SOC,
    DEFAULT_OCV_V,
    AgingParams,
    BatteryParams,
    BatteryState,
    EntropicMap,
    aging_violations,
    battery_violations,
)
from .control import ThrottlePolicy, policy_violations
from .engine import ABLATIONS, SimScenario, scenario_violations
from .errors import ParseError, PhonebattError, ValidationError
from .numerics import MAX_STEP_S, build_monotone_interpolant
from .usage import (
    DEFAULT_DWELL_MIN,
    DEFAULT_MIX,
    DEFAULT_MODES,
    CtmcSpec,
    ModeSpec,
    Multipliers,
    RateScaling,
    UsageModel,
    ctmc_violations,
    mode_violations,
    multiplier_violations,
)

_BATTERY_SCALARS = ("q_max", "r_ref", "r_p", "c_p", "e_a", "r_gas", "t_ref", "m_c_th", "h_a", "eta", "v_cut",
                    "dt_persist")
_MODE_FIELDS = ("name", "mu_p", "sigma_p", "f_scr", "f_cpu", "f_net", "f_bg", "p_cap")
_AGING_FIELDS = tuple(f.name for f in fields(AgingParams))
_POLICY_FIELDS = tuple(f.name for f in fields(ThrottlePolicy))

# Command knobs.  Temperatures in kelvin, t_min in seconds.
DEFAULT_COMMANDS = {
    "scenario": {"t_env_grid": [298.15, 273.15, 263.15, 253.15], "p_req": 0.5},
    "ablate": {},
    "throttle": {"kappa_grid": [0.5, 0.6, 0.7, 0.8, 0.9, 1.0], "t_min": 4.0 * 3600.0, "epsilon": 0.05},
    "sobol": {"n_base": 256, "inner_runs": 64, "output": "t05", "n_boot": 1000, "ranges": {}},
    "elasticity": {"delta_frac": 0.10, "output": "mean",
                   "inputs": ["t_env", "q_max", "r_ref", "h_a", "eta", "rho_b", "rho_bg", "rho_ws"]},
    "frontier": {"t_env_grid": [298.15, 283.15, 273.15, 263.15, 253.15], "rho_ws_grid": [1.0, 1.25, 1.5, 1.75, 2.0],
                 "t_min": 4.0 * 3600.0},
    "perturb": {"delta": 0.10, "n_boot": 2000},
    "identify": {"data": None, "q_max": 2.0, "i_threshold": 0.1, "z_start": 1.0, "discharge_negative": False},
    "validate": {"reference": None, "reference_tau": None, "profile": None},
}


@dataclass
class RunConfig:
    scenario: SimScenario = field(default_factory=SimScenario)
    n_runs: int = 1000
    workers: int = 1
    output_dir: str = "out"
    commands: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_COMMANDS))

    @property
    def seed(self) -> int:
        return self.scenario.seed


# -- serialization --------------------------------------------------------------------------


def _battery_dict(b: BatteryParams) -> dict:
    d = {k: getattr(b, k) for k in _BATTERY_SCALARS}
    d["ocv"] = {"soc": [float(x) for x in b.ocv.knots_x], "voltage": [float(y) for y in b.ocv.knots_y]}
    d["du_dT"] = {"breaks": list(b.du_dT.breaks), "values": list(b.du_dT.values)}
    return d


def to_dict(cfg: RunConfig) -> dict:
    s = cfg.scenario
    u = s.usage
    return {
        "seed": int(s.seed),
        "n_runs": cfg.n_runs,
        "workers": cfg.workers,
        "output_dir": cfg.output_dir,
        "scenario": {
            "t_env": s.t_env,
            "horizon": s.horizon,
            "initial": {"z": s.initial.z, "v_p": s.initial.v_p, "t_core": s.initial.t_core},
            "initial_mode": u.modes[s.initial_mode].name,
            "ablations": sorted(s.ablations),
            "profile": [list(p) for p in s.profile] if s.profile is not None else None,
        },
        "battery": _battery_dict(s.battery),
        "aging": {k: getattr(s.aging, k) for k in _AGING_FIELDS} if s.aging is not None else None,
        "usage": {
            "modes": [{k: getattr(m, k) for k in _MODE_FIELDS} for m in u.modes],
            "dwell_minutes": list(u.ctmc.dwell_minutes),
            "transition_mix": [list(r) for r in u.ctmc.transition_mix],
            "multipliers": {"rho_b": u.multipliers.rho_b, "rho_bg": u.multipliers.rho_bg,
                            "rho_ws": u.multipliers.rho_ws},
            "rate_scaling": ({"soc_knots": list(u.rate_scaling.soc_knots),
                              "factors": [list(r) for r in u.rate_scaling.factors]}
                             if u.rate_scaling is not None else None),
        },
        "throttle": {k: getattr(s.throttle, k) for k in _POLICY_FIELDS} if s.throttle is not None else None,
        "commands": copy.deepcopy(cfg.commands),
    }


def serialize(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=False) + "\n"


def save_config(cfg: RunConfig, path):
    Path(path).write_text(serialize(cfg), encoding="utf-8")


def battery_section(b: BatteryParams) -> dict:
    """A config fragment carrying only battery parameters (identification output)."""
    return {"battery": _battery_dict(b)}


# -- loading ------------------------------------------------------------------------------


class _Collector:
    def __init__(self):
        self.errors = []

    def add(self, path, msg):
        self.errors.append((path, msg))

    def merge(self, prefix, pairs):
        for k, m in pairs:
            self.add(f"{prefix}.{k}", m)

    def number(self, d, key, path, default, integer=False):
        v = d.get(key, default)
        if v is None and default is None:
            return None
        ok = isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
        if ok and integer and float(v) != int(v):
            ok = False
        if not ok:
            self.add(path, f"expected {'an integer' if integer else 'a finite number'}, got {v!r}")
            return default
        return int(v) if integer else float(v)

    def section(self, d, key, path):
        v = d.get(key)
        if v is None:
            return {}
        if not isinstance(v, dict):
            self.add(path, f"expected an object, got {type(v).__name__}")
            return {}
        return v

    def unknown(self, d, allowed, path):
        for k in d:
            if k not in allowed:
                self.add(f"{path}.{k}" if path else k, "unknown key")


def _float_list(c: _Collector, v, path, default):
    if v is None:
        return tuple(default)
    if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        c.add(path, "expected a list of numbers")
        return tuple(default)
    return tuple(float(x) for x in v)


def _load_battery(c: _Collector, d: dict):
    c.unknown(d, set(_BATTERY_SCALARS) | {"ocv", "du_dT"}, "battery")
    base = BatteryParams()
    vals = {k: c.number(d, k, f"battery.{k}", getattr(base, k)) for k in _BATTERY_SCALARS}
    ocv_d = c.section(d, "ocv", "battery.ocv")
    c.unknown(ocv_d, {"soc", "voltage"}, "battery.ocv")
    soc = _float_list(c, ocv_d.get("soc"), "battery.ocv.soc", DEFAULT_OCV_SOC)
    volt = _float_list(c, ocv_d.get("voltage"), "battery.ocv.voltage", DEFAULT_OCV_V)
    try:
        vals["ocv"] = build_monotone_interpolant(soc, volt)
    except (PhonebattError, ValueError) as exc:
        c.add("battery.ocv", str(exc))
        vals["ocv"] = base.ocv
    ent = c.section(d, "du_dT", "battery.du_dT")
    c.unknown(ent, {"breaks", "values"}, "battery.du_dT")
    try:
        vals["du_dT"] = EntropicMap(_float_list(c, ent.get("breaks"), "battery.du_dT.breaks", ()),
                                    _float_list(c, ent.get("values"), "battery.du_dT.values", (0.0,)))
    except PhonebattError as exc:
        c.add("battery.du_dT", str(exc))
        vals["du_dT"] = EntropicMap()
    vals["tau_p"] = vals["r_p"] * vals["c_p"] if vals["r_p"] and vals["c_p"] else None
    bad = battery_violations(SimpleNamespace(**vals))
    c.merge("battery", bad)
    if vals["dt_persist"] is not None and not vals["dt_persist"] > MAX_STEP_S:
        c.add("battery.dt_persist", f"must exceed the maximum integration step ({MAX_STEP_S:g} s)")
    if bad:
        return None
    return BatteryParams(**vals)


def _load_usage(c: _Collector, d: dict):
    c.unknown(d, {"modes", "dwell_minutes", "transition_mix", "multipliers", "rate_scaling"}, "usage")
    modes = []
    raw_modes = d.get("modes")
    if raw_modes is None:
        modes = list(DEFAULT_MODES)
    elif not isinstance(raw_modes, list) or not raw_modes:
        c.add("usage.modes", "expected a non-empty list of mode objects")
        modes = list(DEFAULT_MODES)
    else:
        for k, m in enumerate(raw_modes):
            p = f"usage.modes[{k}]"
            if not isinstance(m, dict):
                c.add(p, "expected an object")
                continue
            c.unknown(m, set(_MODE_FIELDS), p)
            name = m.get("name")
            if not isinstance(name, str) or not name:
                c.add(f"{p}.name", "expected a non-empty string")
                name = f"mode{k}"
            vals = {f: c.number(m, f, f"{p}.{f}", None) for f in _MODE_FIELDS[1:]}
            missing = [f for f in _MODE_FIELDS[1:-1] if vals[f] is None]
            for f in missing:
                c.add(f"{p}.{f}", "required")
            if missing:
                continue
            if vals["p_cap"] is None:
                vals["p_cap"] = vals["mu_p"] + 5.0 * vals["sigma_p"]
            bad = mode_violations(SimpleNamespace(name=name, fractions=(vals["f_scr"], vals["f_cpu"], vals["f_net"],
                                                                        vals["f_bg"]), **vals))
            c.merge(p, bad)
            if not bad:
                modes.append(ModeSpec(name, **vals))
        names = [m.get("name") for m in raw_modes if isinstance(m, dict)]
        if len(set(names)) != len(names):
            c.add("usage.modes", "mode names must be unique")
    dwell = _float_list(c, d.get("dwell_minutes"), "usage.dwell_minutes", DEFAULT_DWELL_MIN)
    raw_mix = d.get("transition_mix")
    if raw_mix is None:
        mix = DEFAULT_MIX
    elif isinstance(raw_mix, list) and all(isinstance(r, list) for r in raw_mix):
        mix = tuple(_float_list(c, r, f"usage.transition_mix[{k}]", ()) for k, r in enumerate(raw_mix))
    else:
        c.add("usage.transition_mix", "expected a list of rows")
        mix = DEFAULT_MIX
    ctmc = CtmcSpec(dwell, mix)
    n = len(raw_modes) if isinstance(raw_modes, list) and raw_modes else len(DEFAULT_MODES)
    if ctmc.n_modes != n:
        c.add("usage.dwell_minutes", f"expected {n} entries (one per mode), got {ctmc.n_modes}")
    bad = ctmc_violations(ctmc)
    c.merge("usage", bad)
    md = c.section(d, "multipliers", "usage.multipliers")
    c.unknown(md, {"rho_b", "rho_bg", "rho_ws"}, "usage.multipliers")
    mult = Multipliers(**{k: c.number(md, k, f"usage.multipliers.{k}", 1.0) for k in ("rho_b", "rho_bg", "rho_ws")})
    c.merge("usage.multipliers", multiplier_violations(mult))
    rs = None
    rsd = d.get("rate_scaling")
    if rsd is not None:
        try:
            rs = RateScaling(tuple(rsd["soc_knots"]), tuple(tuple(r) for r in rsd["factors"]))
            if len(rs.factors) != n:
                c.add("usage.rate_scaling.factors", f"expected {n} rows")
        except (KeyError, TypeError, PhonebattError) as exc:
            c.add("usage.rate_scaling", f"invalid: {exc}")
    if c.errors:
        return None
    return UsageModel(tuple(modes), ctmc, mult, rs)


def _load_simple(c: _Collector, d, path, cls, names, check):
    if d is None:
        return None
    if not isinstance(d, dict):
        c.add(path, "expected an object or null")
        return None
    c.unknown(d, set(names), path)
    base = cls.__dataclass_fields__
    vals = {}
    for k in names:
        default = base[k].default
        if isinstance(default, bool):
            v = d.get(k, default)
            if not isinstance(v, bool):
                c.add(f"{path}.{k}", "expected true or false")
            vals[k] = bool(v)
        else:
            vals[k] = c.number(d, k, f"{path}.{k}", default)
    bad = check(SimpleNamespace(**vals))
    c.merge(path, bad)
    return None if bad else cls(**vals)


def _load_commands(c: _Collector, d: dict) -> dict:
    out = copy.deepcopy(DEFAULT_COMMANDS)
    c.unknown(d, set(DEFAULT_COMMANDS), "commands")
    for cmd, knobs in d.items():
        if cmd not in out:
            continue
        if not isinstance(knobs, dict):
            c.add(f"commands.{cmd}", "expected an object")
            continue
        c.unknown(knobs, set(DEFAULT_COMMANDS[cmd]), f"commands.{cmd}")
        for k, v in knobs.items():
            if k in out[cmd]:
                out[cmd][k] = v
    sob = out["sobol"]
    nb = sob["n_base"]
    if not isinstance(nb, int) or nb < 64 or nb & (nb - 1):
        c.add("commands.sobol.n_base", "must be a power of 2 and at least 64")
    for name, rng in sob["ranges"].items():
        if not (isinstance(rng, list) and len(rng) == 2 and rng[0] <= rng[1]):
            c.add(f"commands.sobol.ranges.{name}", "expected [lo, hi] with lo <= hi")
    if not 0 < out["throttle"]["epsilon"] < 1:
        c.add("commands.throttle.epsilon", "must lie in (0, 1)")
    if not out["elasticity"]["delta_frac"] > 0:
        c.add("commands.elasticity.delta_frac", "must be positive")
    return out


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ValidationError([("", "top level must be a JSON object")])
    c = _Collector()
    c.unknown(d, {"seed", "n_runs", "workers", "output_dir", "scenario", "battery", "aging", "usage", "throttle",
                  "commands"}, "")
    seed = c.number(d, "seed", "seed", 2026, integer=True)
    if seed is not None and not 0 <= seed < 1 << 64:
        c.add("seed", "must be an unsigned 64-bit integer")
    n_runs = c.number(d, "n_runs", "n_runs", 1000, integer=True)
    if n_runs is not None and n_runs < 1:
        c.add("n_runs", "must be at least 1")
    workers = c.number(d, "workers", "workers", 1, integer=True)
    if workers is not None and workers < 1:
        c.add("workers", "must be at least 1")
    out_dir = d.get("output_dir", "out")
    if not isinstance(out_dir, str):
        c.add("output_dir", "expected a string")

    battery = _load_battery(c, c.section(d, "battery", "battery"))
    n_before = len(c.errors)
    usage = _load_usage(c, c.section(d, "usage", "usage"))
    usage_ok = len(c.errors) == n_before
    aging = _load_simple(c, d.get("aging"), "aging", AgingParams, _AGING_FIELDS, aging_violations)
    throttle = _load_simple(c, d.get("throttle"), "throttle", ThrottlePolicy, _POLICY_FIELDS, policy_violations)

    sc = c.section(d, "scenario", "scenario")
    c.unknown(sc, {"t_env", "horizon", "initial", "initial_mode", "ablations", "profile"}, "scenario")
    t_env = c.number(sc, "t_env", "scenario.t_env", SimScenario.__dataclass_fields__["t_env"].default)
    horizon = c.number(sc, "horizon", "scenario.horizon", 24 * 3600.0)
    ini = c.section(sc, "initial", "scenario.initial")
    c.unknown(ini, {"z", "v_p", "t_core"}, "scenario.initial")
    z0 = c.number(ini, "z", "scenario.initial.z", 1.0)
    vp0 = c.number(ini, "v_p", "scenario.initial.v_p", 0.0)
    tc0 = c.number(ini, "t_core", "scenario.initial.t_core", None)
    if tc0 is None:
        tc0 = t_env
    mode = sc.get("initial_mode", 0)
    if usage_ok and usage is not None:
        if isinstance(mode, str):
            try:
                mode = usage.mode_index(mode)
            except KeyError:
                c.add("scenario.initial_mode", f"unknown mode {mode!r}")
                mode = 0
        elif not isinstance(mode, int) or isinstance(mode, bool):
            c.add("scenario.initial_mode", "expected a mode name or index")
            mode = 0
    abl = sc.get("ablations", [])
    if not isinstance(abl, list) or any(a not in ABLATIONS for a in abl):
        c.add("scenario.ablations", f"expected a list drawn from {list(ABLATIONS)}")
        abl = []
    profile = sc.get("profile")
    if profile is not None:
        try:
            profile = tuple((float(a), float(b)) for a, b in profile)
        except (TypeError, ValueError):
            c.add("scenario.profile", "expected a list of [duration_s, p_req_w] pairs")
            profile = None

    commands = _load_commands(c, c.section(d, "commands", "commands"))

    if not c.errors:
        try:
            initial = BatteryState(z0, vp0, tc0)
        except PhonebattError as exc:
            c.add("scenario.initial", str(exc))
    if not c.errors:
        probe = SimpleNamespace(horizon=horizon, initial=initial, t_env=t_env, ablations=set(abl),
                                initial_mode=mode, usage=usage, seed=seed, profile=profile)
        c.merge("scenario", scenario_violations(probe))
    if c.errors:
        raise ValidationError(c.errors)
    scenario = SimScenario(battery=battery, usage=usage, t_env=t_env, initial=initial, horizon=horizon,
                           initial_mode=mode, throttle=throttle, ablations=frozenset(abl), seed=seed, aging=aging,
                           profile=profile)
    return RunConfig(scenario, n_runs, workers, out_dir, commands)


def parse_config_text(text: str) -> RunConfig:
    if not text.strip():
        return from_dict({})
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return from_dict(d)


def load_config(path=None) -> RunConfig:
    """Parse, default and validate a config file; ``None`` gives the defaults."""
    if path is None:
        return from_dict({})
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not UTF-8 ({exc})") from None
    return parse_config_text(text)


def merge_battery_file(cfg_dict: dict, path) -> dict:
    """Overlay the ``battery`` section of a parameter file onto a config dict."""
    extra = json.loads(Path(path).read_text(encoding="utf-8"))
    out = copy.deepcopy(cfg_dict)
    out.setdefault("battery", {}).update(extra.get("battery", {}))
    return out
