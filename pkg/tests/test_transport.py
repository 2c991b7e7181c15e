from collections import defaultdict

import pytest

from runs import assigns, ops, suite_run, uid
from tailcopy.cluster import TransportConfig
from tailcopy.harness.runner import run_scenario
from tailcopy.harness.suites import fault_scenarios
from tailcopy.transport import CACHE, DURABLE, Operation, OpId, duel, resync_cache_stream

CFG = TransportConfig()


def ends(run):
    return {uid(r["op"]): r for r in ops(run, "terminate")}


def test_duel_resolves_within_two_lock_checks():
    rep, run = suite_run("duel")
    assert rep["verdict"] == "PASS"
    poisons = ops(run, "poison")
    assert poisons
    end = ends(run)
    for p in poisons:
        old = p["holder"].rsplit("#", 1)[1]
        assert end[old]["reason"] == "poisoned"
        assert end[old]["t"] - p["t"] <= 2 * CFG.lock_check_ms
    # the holder was alive, so nobody had to seize
    assert not ops(run, "seize")


def test_duel_leaves_one_finisher_per_target():
    _, run = suite_run("duel")
    done = defaultdict(int)
    for r in ops(run, "terminate"):
        if r["reason"] == "done":
            done[(r["op"].rsplit("#", 1)[0], r["hop"])] += 1
    assert done and set(done.values()) == {1}


def test_durable_duel_supersedes_the_older_handle():
    rep, run = suite_run("duel")
    assert rep["ops"].get("terminate:superseded", 0) > 0
    for r in ops(run, "terminate"):
        if r["reason"] == "superseded":
            assert r["op"].startswith("durable:")
        if r["reason"] == "poisoned":
            assert r["op"].startswith("cache:")


def test_seize_after_delay_when_holder_is_dead():
    rep, run = suite_run("kill_all_writers")
    assert rep["verdict"] == "PASS"
    poisoned = {r["op"]: r["t"] for r in ops(run, "poison")}
    seizes = ops(run, "seize")
    assert seizes
    for s in seizes:
        assert s["t"] - poisoned[s["op"]] == CFG.seize_delay_ms


def test_lockless_duel_still_safe():
    rep, _ = suite_run("duel_without_locks")
    assert rep["safety"]["violation_count"] == 0
    assert not rep["safety"]["prefix_errors"]


def test_cache_reader_never_passes_cache_len(monkeypatch):
    seen = []
    orig = Operation._cache_step

    def checked(self, meta):
        orig(self, meta)
        seen.append(meta.cache_len)
        assert self.requested <= meta.cache_len
        for off, n in self.retry:
            assert off + n <= meta.cache_len

    monkeypatch.setattr(Operation, "_cache_step", checked)
    for name in ("baseline", "evict_storm", "kill_data_shard"):
        rep, _ = run_scenario(fault_scenarios([name])[0], seed=1)
        assert rep["verdict"] == "PASS"
    assert len(seen) > 100


def test_writer_death_terminates_by_silence():
    _, run = suite_run("kill_writer")
    died = {r["op"] for r in ops(run, "half_died")}
    assert died
    end = {r["op"]: r["reason"] for r in ops(run, "terminate")}
    assert {end[o] for o in died} == {"silence"}


def test_orphaned_operations_keep_copying():
    rep, run = suite_run("scheduler_restart")
    orphans = {r["op"] for r in ops(run, "orphaned")}
    assert orphans
    end = {r["op"]: r["reason"] for r in ops(run, "terminate")}
    assert all(end[o] == "done" for o in orphans)
    assert rep["termination"]["ok"]


def test_helpers_reject_misuse():
    _, run = suite_run("baseline")
    w = run.fabric.clusters["B"].pool("writer")[0]
    r = run.fabric.clusters["A"].pool("reader")[0]
    a = Operation(run.fabric, OpId("/x", DURABLE, "B"), "A", r, w)
    b = Operation(run.fabric, OpId("/y", CACHE, "B"), "A", r, w)
    with pytest.raises(ValueError):
        duel(a, b)
    with pytest.raises(ValueError):
        resync_cache_stream(a, 0)
    with pytest.raises(ValueError):
        Operation(run.fabric, OpId("/z", "tape", "B"), "A", r, w)
