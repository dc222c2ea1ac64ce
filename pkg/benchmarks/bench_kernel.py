"""Time the replication kernel with numba and with the pure-Python fallback.

Each mode runs in a fresh interpreter so the ``PHONEBATT_NO_NUMBA`` switch is
read at import.  Compilation is excluded by a one-run warm-up.

    python benchmarks/bench_kernel.py --runs 20 --repeat 3
"""
import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import json, sys, time
from phonebatt._jit import HAS_NUMBA
from phonebatt.engine import SimScenario, run_monte_carlo

runs, repeat = int(sys.argv[1]), int(sys.argv[2])
s = SimScenario()
run_monte_carlo(s, 1, envelope=False)
best = float("inf")
for _ in range(repeat):
    t0 = time.perf_counter()
    d = run_monte_carlo(s, runs, envelope=False)
    best = min(best, time.perf_counter() - t0)
print(json.dumps({"numba": HAS_NUMBA, "seconds": best, "mean_tte": d.mean}))
"""


def time_mode(no_numba: bool, runs: int, repeat: int) -> dict:
    env = dict(os.environ)
    env.pop("PHONEBATT_NO_NUMBA", None)
    if no_numba:
        env["PHONEBATT_NO_NUMBA"] = "1"
    out = subprocess.run([sys.executable, "-c", CHILD, str(runs), str(repeat)], env=env, capture_output=True,
                         text=True, check=True)
    return json.loads(out.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--runs", type=int, default=20, help="replications per timing")
    ap.add_argument("--repeat", type=int, default=3, help="timings per mode, best kept")
    args = ap.parse_args(argv)

    jit = time_mode(False, args.runs, args.repeat)
    py = time_mode(True, args.runs, args.repeat)
    if not jit["numba"]:
        print("numba unavailable; both timings use the fallback")
    print(f"{'mode':<10}{'seconds':>10}{'runs/s':>10}")
    for name, r in (("numba", jit), ("python", py)):
        print(f"{name:<10}{r['seconds']:>10.3f}{args.runs / r['seconds']:>10.1f}")
    print(f"speedup   {py['seconds'] / jit['seconds']:.1f}x")
    print(f"same mean tte: {jit['mean_tte'] == py['mean_tte']}")


if __name__ == "__main__":
    main()
