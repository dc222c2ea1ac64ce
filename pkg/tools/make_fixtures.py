"""Regenerate the bundled data files under src/phonebatt/data/.

    python3 tools/make_fixtures.py
"""
import csv
import json
from pathlib import Path

from phonebatt import BatteryParams, SimScenario
from phonebatt.config import load_config, save_config
from phonebatt.engine import run_trajectory
from phonebatt.identification import synthesize_record, write_cycles

DATA = Path(__file__).resolve().parents[1] / "src" / "phonebatt" / "data"

# three pulse-rest cycles on the nominal cell, noiseless, 1 s sampling
PULSE_CURRENTS = (1.0, 2.0, 1.5)
PULSE_S = 900.0
REST_S = 900.0

# the model's own trace under a piecewise-constant load at 25 C
REFERENCE_PROFILE = ((1800.0, 1.0), (600.0, 4.0), (1800.0, 1.0), (3600.0, 3.0))
REFERENCE_T_ENV = 298.15
REFERENCE_STRIDE = 30


def pulse_cycles():
    bp = BatteryParams()
    records = []
    z0 = 1.0
    for k, cur in enumerate(PULSE_CURRENTS):
        rec = synthesize_record(bp, ((60.0, 0.0), (PULSE_S, cur), (REST_S, 0.0)), dt=1.0, z0=z0,
                                cycle_id=str(k + 1), cell_id="SYN01")
        z0 -= cur * PULSE_S / (3600.0 * bp.q_max)
        records.append(rec)
    write_cycles(DATA / "pulse_cycles.csv", records)


def reference_trace():
    s = SimScenario(t_env=REFERENCE_T_ENV, profile=REFERENCE_PROFILE, horizon=24 * 3600.0)
    tr = run_trajectory(s)
    keep = list(range(0, len(tr.t), REFERENCE_STRIDE))
    if keep[-1] != len(tr.t) - 1:
        keep.append(len(tr.t) - 1)
    with (DATA / "reference_trace.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("time_s", "voltage_v"))
        for i in keep:
            w.writerow((repr(float(tr.t[i])), repr(float(tr.v_term[i]))))
    meta = {"t_env": REFERENCE_T_ENV, "profile": [list(p) for p in REFERENCE_PROFILE], "tau_s": tr.tte,
            "note": "terminal voltage of the nominal cell simulated by this package"}
    (DATA / "reference_trace.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


if __name__ == "__main__":
    DATA.mkdir(exist_ok=True)
    pulse_cycles()
    reference_trace()
    save_config(load_config(None), DATA / "baseline.json")
