"""Acceptance checks, one printed PASS/FAIL line per criterion.

Run alone with ``pytest -m slow -s tests/test_acceptance.py``.  Each test
prints its line even when output capture is on.
"""

import random
import time
from pathlib import Path

import pytest

from oracles import codec_roundtrip, delayed_read_oracle, random_connected_graph, spanning_tree_min
from tailcopy.copy_tree import ClusterGraph, TreeConfig, TreeError, build_tree, penalize_and_rebuild
from tailcopy.file_layer import DelayedReadState, should_read_from_durable
from tailcopy.harness import dump_report, load, run_scenario
from tailcopy.harness.analysis import fallback_burst, latency_bound
from tailcopy.harness.interleave import CheckConfig, check_interleavings
from tailcopy.harness.suites import FAULTS, fault_scenarios, run_suite

pytestmark = pytest.mark.slow

SCEN = Path(__file__).resolve().parent.parent / "scenarios"

SUITE_SEEDS = 10
SUITE_BUDGET_S = 300
CHECK_TRIALS = 100_000
CHECK_BUDGET_S = 600
ORACLE_INPUTS = 1_000_000
P99_BAND = (0.8, 1.2)
TREE_GRAPHS = 200
CODEC_PATTERNS = 10_000


@pytest.fixture
def say(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {n} {'PASS' if ok else 'FAIL'}: {detail}")
    return emit


@pytest.fixture(scope="module")
def suite():
    t0 = time.perf_counter()
    rows = run_suite(fault_scenarios(), list(range(SUITE_SEEDS)))
    return rows, time.perf_counter() - t0


def test_1_safety_under_faults(suite, say):
    rows, wall = suite
    bad = [r for r in rows if r.safety]
    ok = len(FAULTS) >= 20 and not bad and wall < SUITE_BUDGET_S
    say(1, ok, f"{len(FAULTS)} scenarios x {SUITE_SEEDS} seeds, {sum(r.safety for r in rows)} "
               f"violations, {wall:.0f}s (limit {SUITE_BUDGET_S}s)")
    assert ok, [r.line() for r in bad]


def test_2_termination(suite, say):
    rows, _ = suite
    bad = [r for r in rows if r.termination]
    say(2, not bad, f"{len(rows) - len(bad)}/{len(rows)} runs read every produced byte")
    assert not bad, [r.line() for r in bad]


def test_3_interleavings(say):
    t0 = time.perf_counter()
    lines, ok = [], True
    for shape in (dict(chunks=4, chunk_bytes=4, writers=2), dict(chunks=2, chunk_bytes=2, writers=4)):
        tag = f"{shape['chunks']}x{shape['chunk_bytes']}x{shape['writers']}"
        clean = check_interleavings(CheckConfig(trials=CHECK_TRIALS, seed=0, **shape))
        ok &= clean.ok and clean.trials >= CHECK_TRIALS
        lines.append(f"{tag} {clean.trials} trials {'clean' if clean.ok else clean.failures[0].kind}")
        for name, mut, kind in (("no-prefix-rule", dict(prefix_rule=False), "chunk_prefix"),
                                ("publish-before-ack", dict(publish_before_ack=True), "pointer_rule")):
            res = check_interleavings(CheckConfig(trials=CHECK_TRIALS, seed=0, **shape, **mut))
            caught = not res.ok and res.failures[0].kind == kind
            ok &= caught
            lines.append(f"{tag} {name} {'caught' if caught else 'MISSED'}")
    wall = time.perf_counter() - t0
    ok &= wall < CHECK_BUDGET_S
    say(3, ok, "; ".join(lines) + f"; {wall:.0f}s (limit {CHECK_BUDGET_S}s)")
    assert ok


def test_4_delayed_read_matches_pseudocode(say):
    rng = random.Random(4)
    calls = mismatches = 0
    while calls < ORACLE_INPUTS:
        max_delay = rng.randint(0, 2000)
        ours, ref = DelayedReadState(max_delay), []
        now = rng.randint(0, 10_000)
        durable = rng.randint(0, 1000)
        for _ in range(rng.randint(1, 200)):
            now += rng.choice((0, 1, rng.randint(0, 50), rng.randint(0, 3000)))
            durable += rng.choice((0, rng.randint(0, 500)))
            cache = rng.choice((durable, rng.randint(0, durable), rng.randint(0, durable + 100)))
            a = should_read_from_durable(ours, cache, durable, now)
            b = delayed_read_oracle(ref, cache, durable, now, max_delay)
            mismatches += a != b or list(ours.size_record) != ref
            calls += 1
    say(4, mismatches == 0, f"{calls} random inputs, {mismatches} mismatches")
    assert mismatches == 0


def test_5_steady_state_latency(say):
    sc = load(SCEN / "exp1a.json")
    rep, run = run_scenario(sc)
    w0, w1 = sc.stable_window_ms
    fallbacks = run.metrics.fallbacks_in(w0, w1)
    parts, ok = [], fallbacks == 0
    for fleet in sorted({f.cluster for f in sc.consumers}):
        stream = next(f.stream for f in sc.consumers if f.cluster == fleet)
        bound = latency_bound(sc, stream, fleet)
        p99 = rep["metrics"]["delivery_delay_ms"][fleet]["stable"]["p99"]
        ratio = p99 / bound
        ok &= P99_BAND[0] <= ratio <= P99_BAND[1]
        parts.append(f"{fleet} p99 {p99:.0f}ms vs bound {bound}ms ({ratio:.2f})")
    say(5, ok, f"stable fallbacks {fallbacks}; " + "; ".join(parts))
    assert ok


def test_6_bursts_then_zero(say):
    sc = load(SCEN / "exp1b_spike.json")
    rep, _ = run_scenario(sc)
    spike = max(f.start_ms for f in sc.consumers)
    b_spike = fallback_burst(rep, "D", spike, sc.stable_window_ms)
    out = {}
    for name in ("exp1d_kill1", "exp1d_kill2"):
        s = load(SCEN / f"{name}.json")
        r, _ = run_scenario(s)
        k = s.faults[0]
        out[name] = (fallback_burst(r, k.args["cluster"], k.t, s.stable_window_ms),
                     sum(r["metrics"]["read_failures"].values()))
    b2 = out["exp1d_kill2"][0]
    fails1 = out["exp1d_kill1"][1]
    ok = b_spike.burst_then_zero and b2.burst_then_zero and fails1 == 0
    say(6, ok, f"spike burst {b_spike.burst} then {b_spike.stable}; 2-of-3 kill burst {b2.burst} "
               f"then {b2.stable}; 1-replica kill read failures {fails1}")
    assert ok


def test_7_copy_tree(say):
    rng = random.Random(7)
    equal = deep = 0
    for _ in range(TREE_GRAPHS):
        nodes, costs = random_connected_graph(rng, rng.randint(2, 7))
        g = ClusterGraph(nodes, dict(costs))
        t = build_tree(g, nodes[0], nodes[1:], 0.0, 0.0, None)
        equal += abs(t.total_cost(g) - spanning_tree_min(nodes, costs)) < 1e-9
        try:
            capped = build_tree(g, nodes[0], nodes[1:], 0.0, 0.0, 4)
        except TreeError:
            continue
        deep += capped.max_depth() > 4
    worked = ClusterGraph(["A", "B", "C", "D"], {("A", "B"): 1, ("A", "C"): 2, ("A", "D"): 4,
                                                 ("B", "C"): 1, ("B", "D"): 3, ("C", "D"): 5})
    before = build_tree(worked, "A", ["B", "C", "D"])
    after, _ = penalize_and_rebuild(before, worked, ["B"], (), TreeConfig(alpha_depth=0, beta_fanout=0))
    demoted = bool(before.children("B")) and after.children("B") == [] and "B" in after.parent
    ok = equal == TREE_GRAPHS and deep == 0 and demoted
    say(7, ok, f"{equal}/{TREE_GRAPHS} equal to enumerated minimum; {deep} capped trees deeper "
               f"than 4; outage demotes B to a leaf: {demoted}")
    assert ok


def test_8_codec_round_trip(say):
    rng = random.Random(8)
    bad = []
    for i in range(CODEC_PATTERNS):
        ok, why = codec_roundtrip(random.Random(rng.getrandbits(64)), rng.choice((1, 2, 3, 4, 7, 16)),
                                  rng.randint(1, 200))
        if not ok:
            bad.append((i, why))
    say(8, not bad, f"{CODEC_PATTERNS} write/flush patterns, {len(bad)} failures")
    assert not bad, bad[:3]


def test_9_determinism(say):
    sc = fault_scenarios(["kitchen_sink"])[0]
    a = dump_report(run_scenario(sc, seed=9)[0])
    b = dump_report(run_scenario(sc, seed=9)[0])
    say(9, a == b, f"two runs with seed 9: {len(a)} and {len(b)} bytes, identical={a == b}")
    assert a == b
