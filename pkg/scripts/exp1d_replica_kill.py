"""Killing one versus two of a key's three data-cache replicas.

    python3 scripts/exp1d_replica_kill.py
"""

import argparse
from pathlib import Path

from tailcopy.harness.analysis import fallback_burst
from tailcopy.harness.runner import run_scenario
from tailcopy.harness.scenario import load

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=2)
    args = ap.parse_args()
    for name in ("exp1d_kill1", "exp1d_kill2"):
        sc = load(ROOT / "scenarios" / f"{name}.json")
        kill = sc.faults[0]
        for seed in range(sc.seed, sc.seed + args.seeds):
            rep, _ = run_scenario(sc, seed=seed)
            b = fallback_burst(rep, kill.args["cluster"], kill.t, sc.stable_window_ms)
            fails = sum(rep["metrics"]["read_failures"].values())
            print(f"{name} seed {seed}: {rep['verdict']} burst={b.burst} stable={b.stable} "
                  f"read_failures={fails}")


if __name__ == "__main__":
    main()
