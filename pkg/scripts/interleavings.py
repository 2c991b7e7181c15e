"""Interleaving check of the cache write path, plus the two injected bugs.

    python3 scripts/interleavings.py --trials 100000
"""

import argparse

from tailcopy.harness.interleave import CheckConfig, check_interleavings

SHAPES = [dict(chunks=4, chunk_bytes=4, writers=2), dict(chunks=2, chunk_bytes=2, writers=4)]
MUTATIONS = {"none": {}, "no-prefix-rule": {"prefix_rule": False},
             "publish-before-ack": {"publish_before_ack": True}}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trials", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for shape in SHAPES:
        for name, mut in MUTATIONS.items():
            cfg = CheckConfig(trials=args.trials, seed=args.seed, **shape, **mut)
            res = check_interleavings(cfg)
            tag = "clean" if res.ok else f"{res.failures[0].kind} at trial {res.failures[0].trial}"
            print(f"{shape['chunks']}x{shape['chunk_bytes']}B x{shape['writers']} writers "
                  f"{name:<18} trials={res.trials:<7} {res.seconds:6.1f}s  {tag}")
            if not res.ok:
                for step in res.failures[0].schedule:
                    print("      ", *step)


if __name__ == "__main__":
    main()
