"""Steady-state delivery latency versus the analytic bound, and fallback rate.

    python3 scripts/exp1a_steady.py --seeds 3
"""

import argparse
from pathlib import Path

from tailcopy.harness.analysis import latency_bound
from tailcopy.harness.runner import run_scenario
from tailcopy.harness.scenario import load

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--scenario", default=str(ROOT / "scenarios" / "exp1a.json"))
    ap.add_argument("--seeds", type=int, default=3)
    args = ap.parse_args()
    sc = load(args.scenario)
    w0, w1 = sc.stable_window_ms
    print(f"{'seed':>4} {'cluster':>7} {'p50':>7} {'p99':>7} {'bound':>6} {'p99/bound':>9} fallbacks")
    for seed in range(sc.seed, sc.seed + args.seeds):
        rep, run = run_scenario(sc, seed=seed)
        for fleet in sorted({f.cluster for f in sc.consumers}):
            stream = next(f.stream for f in sc.consumers if f.cluster == fleet)
            bound = latency_bound(sc, stream, fleet)
            pct = rep["metrics"]["delivery_delay_ms"][fleet]["stable"]
            fb = run.metrics.fallbacks_in(w0, w1)
            print(f"{seed:>4} {fleet:>7} {pct['p50']:>7.0f} {pct['p99']:>7.0f} {bound:>6} "
                  f"{pct['p99'] / bound:>9.2f} {fb}")
        print(f"     verdict {rep['verdict']}")


if __name__ == "__main__":
    main()
