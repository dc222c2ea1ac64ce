"""Command-line entry point: ``phonebatt <command> [--config PATH] [--seed N] ...``.

Exit codes: 0 success, 2 configuration error, 3 simulation or analysis fault,
4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import analysis, control, identification
from .config import RunConfig, battery_section, from_dict, load_config, to_dict
from .engine import REPORT_QUANTILES, run_ablation_suite, run_monte_carlo, run_trajectory
from .errors import ParseError, PhonebattError, SchemaError, ValidationError

log = logging.getLogger("phonebatt")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4

COMMANDS = ("simulate", "scenario", "ablate", "throttle", "sobol", "elasticity", "frontier", "perturb", "identify",
            "validate")


def fmt(x) -> str:
    """Fixed 9-significant-digit rendering so result files are byte-stable."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.9g}"


def write_csv(path: Path, header, rows):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return float(fmt(x)) if math.isfinite(x) else None
    return x


def write_json(path: Path, obj):
    path.write_text(json.dumps(_jsonable(obj), indent=2) + "\n", encoding="utf-8")


def bundled(name: str) -> Path:
    return Path(str(resources.files("phonebatt") / "data" / name))


def _dist_summary(d) -> dict:
    return {
        "n_runs": d.n_runs,
        "mean_tte_s": d.mean,
        "quantiles_s": {f"{q:g}": d.quantiles[q] for q in REPORT_QUANTILES},
        "censored_fraction": d.censored_fraction,
        "n_faults": d.n_faults,
        "horizon_s": d.horizon,
    }


# -- commands ------------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out: Path) -> dict:
    s = cfg.scenario
    d = run_monte_carlo(s, cfg.n_runs, cfg.workers, envelope=True)
    write_csv(out / "tte_samples.csv", ("run_index", "tte_s", "cause", "censored"),
              ((i, d.run_tte[i], d.causes[i], d.censored[i]) for i in range(d.n_runs)))
    write_csv(out / "survival.csv", ("t_s", "s_of_t"), zip(d.survival_t, d.survival_s))
    write_csv(out / "soc_envelope.csv", ("t_s", "soc_p05", "soc_p50", "soc_p95", "survivors"),
              ((t, *row, n) for t, row, n in zip(d.envelope_t, d.envelope, d.survivors)))
    return {"seed": s.seed, **_dist_summary(d)}


def cmd_scenario(cfg: RunConfig, out: Path) -> dict:
    knobs = cfg.commands["scenario"]
    p = float(knobs["p_req"])
    rows, traces = [], []
    base = cfg.scenario
    for te in knobs["t_env_grid"]:
        s = replace(analysis.with_input(base, "t_env", te), profile=((base.horizon, p),))
        tr = run_trajectory(s)
        rows.append((te, tr.tte, tr.z_end, tr.shutdown_cause, tr.censored))
        traces.extend((te, t, z, v, tc) for t, z, v, tc in zip(tr.t, tr.z, tr.v_term, tr.t_core))
    write_csv(out / "scenario_a.csv", ("t_env_k", "t_end_s", "z_end", "cause", "censored"), rows)
    write_csv(out / "scenario_traces.csv", ("t_env_k", "t_s", "z", "v_term", "t_core_k"), traces)
    return {"p_req_w": p, "runs": [{"t_env_k": r[0], "t_end_s": r[1], "z_end": r[2], "cause": r[3]} for r in rows]}


def cmd_ablate(cfg: RunConfig, out: Path) -> dict:
    rows = run_ablation_suite(cfg.scenario, cfg.n_runs, cfg.workers)
    full = rows[0]
    table = []
    summary = {}
    for r in rows:
        diff = analysis.paired_difference(full.dist, r.dist, "t05") if r is not full else None
        table.append((r.variant, r.mean, r.t05, 100.0 * (r.t05 / full.t05 - 1.0), diff.lo if diff else 0.0,
                      diff.hi if diff else 0.0, r.censored_fraction))
        summary[r.variant] = {"mean_tte_s": r.mean, "t05_s": r.t05, "censored_fraction": r.censored_fraction}
    write_csv(out / "ablation.csv", ("variant", "mean_tte_s", "t05_s", "d_t05_pct", "d_t05_ci_lo_s", "d_t05_ci_hi_s",
                                     "censored_fraction"), table)
    return {"seed": cfg.seed, "n_runs": cfg.n_runs, "variants": summary}


def cmd_throttle(cfg: RunConfig, out: Path) -> dict:
    knobs = cfg.commands["throttle"]
    policy = cfg.scenario.throttle or control.ThrottlePolicy()
    base = replace(cfg.scenario, throttle=None)
    ev = control.evaluate_policy(base, policy, cfg.n_runs, knobs["t_min"], knobs["epsilon"], cfg.workers)
    ref = run_monte_carlo(base, cfg.n_runs, cfg.workers, envelope=False)
    pts = control.pareto_sweep(base, knobs["kappa_grid"], cfg.n_runs, policy, knobs["t_min"], cfg.workers)
    write_csv(out / "pareto.csv", ("kappa", "j_mean_s", "t05_s", "mean_tte_s"),
              ((p.kappa, p.j_mean, p.t05, p.mean_tte) for p in pts))
    return {
        "policy": {k: getattr(policy, k) for k in ("kappa", "z_crit", "t_crit", "u_min", "active", "cutoff_aware")},
        "j_mean_s": ev.j_mean,
        "p_violation": ev.p_violation,
        "constraint_ok": ev.constraint_ok,
        "floor_fraction": ev.floor_fraction,
        "throttled": _dist_summary(ev.tte),
        "unthrottled": _dist_summary(ref),
    }


def _inputs(ranges: dict) -> tuple:
    return tuple(analysis.SensitivityInput(n, *ranges.get(n, analysis.DEFAULT_RANGES[n])) for n in analysis.INPUT_NAMES)


def cmd_sobol(cfg: RunConfig, out: Path) -> dict:
    k = cfg.commands["sobol"]
    inputs = _inputs(k["ranges"])
    res = analysis.sobol_indices(cfg.scenario, inputs, k["n_base"], k["output"], k["inner_runs"], cfg.seed % (1 << 32),
                                 k["n_boot"], cfg.workers)
    write_csv(out / "sobol.csv", ("input", "s1", "s1_lo", "s1_hi", "st", "st_lo", "st_hi"),
              ((n, res.s1[i], *res.s1_ci[i], res.st[i], *res.st_ci[i]) for i, n in enumerate(res.names)))
    return {"n_base": res.n_base, "inner_runs": k["inner_runs"], "output": k["output"], "ranking": res.ranking(),
            "variance": res.variance}


def cmd_elasticity(cfg: RunConfig, out: Path) -> dict:
    k = cfg.commands["elasticity"]
    rows = [analysis.local_elasticity(cfg.scenario, n, k["delta_frac"], cfg.n_runs, k["output"], cfg.workers)
            for n in k["inputs"]]
    write_csv(out / "elasticity.csv", ("input", "si", "base_s", "perturbed_s"),
              ((r.name, r.si, r.base, r.perturbed) for r in rows))
    return {"delta_frac": k["delta_frac"], "output": k["output"], "si": {r.name: r.si for r in rows}}


def cmd_frontier(cfg: RunConfig, out: Path) -> dict:
    k = cfg.commands["frontier"]
    fr = analysis.risk_frontier(cfg.scenario, k["t_env_grid"], k["rho_ws_grid"], k["t_min"], cfg.n_runs, cfg.workers)
    write_csv(out / "frontier_grid.csv", ("t_env_k", "rho_ws", "t05_s", "violating"),
              ((te, rw, fr.t05[i, j], fr.violating[i, j]) for i, te in enumerate(fr.t_env)
               for j, rw in enumerate(fr.rho_ws)))
    write_csv(out / "frontier.csv", ("t_env_k", "rho_ws_crossing"), zip(fr.t_env, fr.crossing))
    return {"t_min_s": fr.t_min, "violating_cells": int(fr.violating.sum()),
            "crossing": [None if math.isnan(c) else c for c in fr.crossing]}


def cmd_perturb(cfg: RunConfig, out: Path) -> dict:
    k = cfg.commands["perturb"]
    rows = analysis.usage_perturbation_study(cfg.scenario, cfg.n_runs, cfg.workers, k["n_boot"], k["delta"])

    def ci(d):
        return (d.lo, d.hi) if d is not None else (0.0, 0.0)

    write_csv(out / "perturbation.csv",
              ("variant", "mean_tte_s", "d_mean_pct", "d_mean_ci_lo_s", "d_mean_ci_hi_s", "t05_s", "d_t05_pct",
               "d_t05_ci_lo_s", "d_t05_ci_hi_s"),
              ((r.variant, r.mean, r.d_mean_pct, *ci(r.mean_diff), r.t05, r.d_t05_pct, *ci(r.t05_diff)) for r in rows))
    return {"variants": {r.variant: {"mean_tte_s": r.mean, "d_mean_pct": r.d_mean_pct, "t05_s": r.t05,
                                     "d_t05_pct": r.d_t05_pct} for r in rows}}


def cmd_identify(cfg: RunConfig, out: Path) -> dict:
    k = cfg.commands["identify"]
    data = Path(k["data"]) if k["data"] else bundled("pulse_cycles.csv")
    records = identification.ingest_cycles(data, k["discharge_negative"])
    ident = identification.identify(records, k["q_max"], k["i_threshold"], k["z_start"])
    params = ident.apply(cfg.scenario.battery)
    write_json(out / "identified_params.json", battery_section(params))
    return {"source": str(data), "n_records": len(records), "r0_ohm": ident.r0, "r_p_ohm": ident.r_p,
            "c_p_f": ident.c_p, "tau_p_s": ident.tau_p, "n_ocv_knots": len(ident.ocv_knots), "rmse": ident.rmse}


def read_reference(path: Path):
    """``(t, v)`` from a CSV with ``time_s`` and ``voltage_v`` columns."""
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for col in ("time_s", "voltage_v"):
            if col not in (reader.fieldnames or ()):
                raise SchemaError(f"{path}: missing column {col}")
        rows = [(float(r["time_s"]), float(r["voltage_v"])) for r in reader]
    if len(rows) < 2:
        raise SchemaError(f"{path}: need at least 2 rows")
    t, v = np.array(rows).T
    return t, v


def cmd_validate(cfg: RunConfig, out: Path) -> dict:
    k = cfg.commands["validate"]
    if k["reference"]:
        ref_path = Path(k["reference"])
        meta = {}
    else:
        ref_path = bundled("reference_trace.csv")
        meta = json.loads(bundled("reference_trace.json").read_text(encoding="utf-8"))
    t_ref, v_ref = read_reference(ref_path)
    profile = k["profile"] or meta.get("profile") or cfg.scenario.profile
    if profile is None:
        raise ValidationError([("commands.validate.profile", "a load profile is required to replay the reference")])
    s = replace(cfg.scenario, profile=tuple((float(a), float(b)) for a, b in profile))
    if "t_env" in meta:
        s = analysis.with_input(s, "t_env", meta["t_env"])
    tau_ref = k["reference_tau"] if k["reference_tau"] is not None else meta.get("tau_s", float(t_ref[-1]))
    tr = run_trajectory(s)
    rep = analysis.validation_metrics(tr, t_ref, v_ref, tau_ref)
    write_csv(out / "validation_trace.csv", ("t_s", "v_pred", "v_ref"),
              zip(t_ref, np.interp(t_ref, tr.t, tr.v_term), v_ref))
    return {"reference": str(ref_path), "mape_pct": rep.mape, "delta_tau_s": rep.delta_tau, "n_points": rep.n_points,
            "tau_pred_s": tr.tte, "tau_ref_s": tau_ref}


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


# -- entry --------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phonebatt", description="Smartphone battery time-to-empty simulator.")
    p.add_argument("command", choices=COMMANDS, help="experiment to run")
    p.add_argument("--config", type=Path, help="JSON run configuration (defaults when omitted)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--runs", type=int, help="override the number of Monte Carlo runs")
    p.add_argument("--workers", type=int, help="worker threads for replications")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def dispatch(command: str, cfg: RunConfig) -> Path:
    """Run one command, writing its files and ``summary.json`` under the output directory."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = HANDLERS[command](cfg, out)
    write_json(out / "summary.json", {"command": command, "seed": cfg.seed, **summary})
    return out


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    d = to_dict(cfg)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.runs is not None:
        d["n_runs"] = args.runs
    if args.workers is not None:
        d["workers"] = args.workers
    if args.out is not None:
        d["output_dir"] = str(args.out)
    return from_dict(d)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
    except (ValidationError, ParseError) as exc:
        print(f"phonebatt: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"phonebatt: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        out = dispatch(args.command, cfg)
    except ValidationError as exc:
        print(f"phonebatt {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"phonebatt {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PhonebattError, ArithmeticError, ValueError) as exc:
        print(f"phonebatt {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("results written to %s", out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
