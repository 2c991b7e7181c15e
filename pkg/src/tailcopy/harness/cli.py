"""Command line: ``tailcopy run | suite | check-interleavings | build-tree | replay``.

Exit codes: 0 when every check passed, 1 when a check failed, 2 for bad input.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from ..copy_tree import ClusterGraph, TreeError, build_tree, penalize_and_rebuild
from .interleave import CheckConfig, check_interleavings
from .runner import dump_report, run_scenario
from .scenario import ScenarioError, load
from .suites import FAULTS, fault_scenarios, run_suite

OK, FAILED, BAD_INPUT = 0, 1, 2


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    sc = load(args.scenario)
    rep, _ = run_scenario(sc, seed=args.seed, trace=args.trace)
    _emit(dump_report(rep), args.out)
    print(f"{sc.name} seed={rep['seed']} {rep['verdict']}", file=sys.stderr)
    return OK if rep["verdict"] == "PASS" else FAILED


def cmd_suite(args) -> int:
    names = args.only or None
    if names:
        unknown = sorted(set(names) - set(FAULTS))
        if unknown:
            raise ScenarioError(f"unknown suite scenario(s) {unknown}; known: {sorted(FAULTS)}")
    rows = run_suite(fault_scenarios(names), list(range(args.seed0, args.seed0 + args.seeds)))
    bad = 0
    for r in rows:
        print(r.line())
        bad += r.verdict != "PASS"
    print(f"{len(rows) - bad}/{len(rows)} runs passed")
    return OK if not bad else FAILED


def cmd_check(args) -> int:
    cfg = CheckConfig(chunks=args.chunks, chunk_bytes=args.chunk_bytes, writers=args.writers,
                      trials=args.trials, seed=args.seed, max_evictions=args.evictions,
                      prefix_rule=args.mutation != "no-prefix-rule",
                      publish_before_ack=args.mutation == "publish-before-ack")
    res = check_interleavings(cfg)
    print(f"trials={res.trials} steps={res.steps} seconds={res.seconds:.1f} "
          f"{'PASS' if res.ok else 'FAIL'}")
    for f in res.failures:
        print(f"trial {f.trial}: {f.kind}: {f.detail}")
        for step in f.schedule:
            print("   ", " ".join(str(x) for x in step))
    if args.out:
        Path(args.out).write_text(json.dumps(res.to_json(), sort_keys=True, indent=1) + "\n")
    return OK if res.ok else FAILED


def cmd_build_tree(args) -> int:
    sc = load(args.scenario)
    streams = {s.name: s for s in sc.streams}
    st = streams.get(args.stream) if args.stream else sc.streams[0]
    if st is None:
        raise ScenarioError(f"unknown stream {args.stream!r}")
    g = ClusterGraph.from_edges(sc.clusters, [(e.a, e.b, e.cost) for e in sc.edges])
    tc = sc.fabric.tree
    if args.alpha is not None:
        tc = replace(tc, alpha_depth=args.alpha)
    if args.beta is not None:
        tc = replace(tc, beta_fanout=args.beta)
    if args.max_depth is not None:
        tc = replace(tc, max_depth=None if args.max_depth <= 0 else args.max_depth)
    try:
        tree = build_tree(g, st.source, st.destinations, tc.alpha_depth, tc.beta_fanout, tc.max_depth)
        out = {"tree": tree.to_json(), "cost": tree.total_cost(g), "depth": tree.max_depth()}
        if args.outage:
            nt, pg = penalize_and_rebuild(tree, g, args.outage, (), tc)
            out["after_outage"] = {"tree": nt.to_json(), "cost": nt.total_cost(g),
                                   "depth": nt.max_depth(), "penalized": sorted(args.outage)}
    except TreeError as e:
        print(f"tree error: {e}", file=sys.stderr)
        return FAILED
    print(json.dumps(out, sort_keys=True, indent=1))
    return OK


def cmd_replay(args) -> int:
    sc = load(args.scenario)
    try:
        want = Path(args.report).read_text()
    except OSError as e:
        raise ScenarioError(f"{args.report}: {e.strerror}") from None
    try:
        seed = json.loads(want)["seed"]
    except (json.JSONDecodeError, KeyError, TypeError):
        raise ScenarioError(f"{args.report}: not a run report") from None
    rep, _ = run_scenario(sc, seed=seed)
    got = dump_report(rep)
    if got == want:
        print(f"identical ({len(got)} bytes)")
        return OK
    a, b = want.splitlines(), got.splitlines()
    line = next((i for i, (x, y) in enumerate(zip(a, b)) if x != y), min(len(a), len(b)))
    print(f"reports differ from line {line + 1}")
    return FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tailcopy", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run one scenario and print its JSON report")
    r.add_argument("scenario")
    r.add_argument("--seed", type=int, default=None, help="override the scenario's seed")
    r.add_argument("--out", help="write the report here instead of stdout")
    r.add_argument("--trace", action="store_true", help="keep the full event trace")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("suite", help="run the built-in fault suite")
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--seed0", type=int, default=0)
    s.add_argument("--only", nargs="*", help="suite scenario names")
    s.set_defaults(fn=cmd_suite)

    c = sub.add_parser("check-interleavings", help="randomized interleaving check of the cache write path")
    c.add_argument("--chunks", type=int, default=4)
    c.add_argument("--chunk-bytes", type=int, default=4)
    c.add_argument("--writers", type=int, default=2)
    c.add_argument("--trials", type=int, default=100_000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--evictions", type=int, default=2)
    c.add_argument("--mutation", choices=("none", "no-prefix-rule", "publish-before-ack"),
                   default="none")
    c.add_argument("--out", help="write the result as JSON")
    c.set_defaults(fn=cmd_check)

    b = sub.add_parser("build-tree", help="build a stream's copy tree from a scenario's graph")
    b.add_argument("scenario")
    b.add_argument("--stream")
    b.add_argument("--alpha", type=float)
    b.add_argument("--beta", type=float)
    b.add_argument("--max-depth", type=int, help="0 for unlimited")
    b.add_argument("--outage", action="append", default=[], help="cluster to penalize and rebuild around")
    b.set_defaults(fn=cmd_build_tree)

    rp = sub.add_parser("replay", help="re-run a scenario and compare with a saved report")
    rp.add_argument("scenario")
    rp.add_argument("report")
    rp.set_defaults(fn=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ScenarioError as e:
        print(f"error: {e}", file=sys.stderr)
        return BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
