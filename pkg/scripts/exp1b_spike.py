"""Consumer spike against a throttled data cache: fallback burst, scale-up, recovery.

    python3 scripts/exp1b_spike.py --seeds 3
"""

import argparse
from pathlib import Path

from tailcopy.harness.analysis import fallback_burst
from tailcopy.harness.runner import run_scenario
from tailcopy.harness.scenario import load

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--scenario", default=str(ROOT / "scenarios" / "exp1b_spike.json"))
    ap.add_argument("--cluster", default="D")
    ap.add_argument("--seeds", type=int, default=3)
    args = ap.parse_args()
    sc = load(args.scenario)
    spike = max(f.start_ms for f in sc.consumers)
    for seed in range(sc.seed, sc.seed + args.seeds):
        rep, run = run_scenario(sc, seed=seed)
        b = fallback_burst(rep, args.cluster, spike, sc.stable_window_ms)
        scale = [(a["t"], a["replicas"]) for a in run.autoscaler.actions]
        print(f"seed {seed}: {rep['verdict']} burst={b.burst} stable={b.stable} scale={scale}")
        print("   per second:", " ".join(f"{s}:{n}" for s, n in sorted(b.series.items())))


if __name__ == "__main__":
    main()
