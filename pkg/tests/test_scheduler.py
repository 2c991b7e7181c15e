from collections import Counter

from runs import assigns, ops, suite_run
from tailcopy.harness.runner import Run
from tailcopy.harness.suites import fault_scenarios
from tailcopy.scheduler import SchedulerConfig


def hop_of(a):
    return f"{a['reader'].split('/')[0]}->{a['op'].split(':')[1]}"


def test_two_operations_per_hop_per_file():
    rep, run = suite_run("baseline")
    got = Counter()
    for a in assigns(run, "notify"):
        storage, _, path = a["op"].split(":", 2)
        got[(path, hop_of(a), storage)] += 1
    assert set(got.values()) == {1}
    files = {p for p, _, _ in got}
    hops = {h for _, h, _ in got}
    assert hops == {"A->B", "B->C", "B->D"}
    # every file reaches every hop on both storage layers
    assert len(got) == len(files) * len(hops) * 2
    # two shards, each rolled over once during the run, data plus index per file
    assert len(files) == 2 * 2 * 2
    assert rep["produced"]["files"] == len(files)


def test_worker_kill_reassigns_to_live_writers():
    rep, run = suite_run("kill_writer")
    assert rep["verdict"] == "PASS"
    fault = run.fault_log[0]
    moved = assigns(run, "worker_died")
    assert moved
    killed = {r["to"] for r in assigns(run) if r["t"] < fault["t"]} & {
        a["frm"] for a in moved}
    for a in moved:
        assert a["frm"] in killed
        assert a["op"].split(":")[1] == "B"
        assert a["epoch"] >= 2


def test_all_writers_dead_waits_for_restart():
    rep, run = suite_run("kill_all_writers")
    heal = next(r["t"] for r in run.sim.log if r["ev"] == "heal")
    moved = assigns(run, "worker_died")
    assert moved and min(a["t"] for a in moved) >= heal
    assert rep["termination"]["ok"]


def test_scheduler_restart_recovers_without_gaps():
    rep, run = suite_run("scheduler_restart")
    assert rep["verdict"] == "PASS"
    assert not rep["termination"]["gaps"]
    recovered = assigns(run, "recover")
    assert recovered
    t_kill = run.fault_log[0]["t"]
    assert all(a["t"] > t_kill for a in recovered)
    # recovered targets were not already owned by a live operation
    assert rep["ops"].get("terminate:poisoned", 0) == 0
    assert rep["ops"].get("terminate:superseded", 0) == 0


def test_balance_sheds_from_overloaded_writer():
    _, run = suite_run("kill_writer")
    shed = assigns(run, "shed")
    assert shed
    for a in shed:
        assert a["frm"] != a["to"]


def test_balance_tick_noop_when_even():
    sc = fault_scenarios(["baseline"])[0]
    run = Run(sc, seed=0)
    run.sim.run(until=500)
    for c in run.fabric.clusters.values():
        if c.scheduler is not None:
            assert c.scheduler.balance_tick() == []


def test_double_assign_creates_extras():
    rep, run = suite_run("duel")
    extra = assigns(run, "double_assign")
    assert extra
    # an extra is a second live operation for the same target, possibly on the same writer
    notified = {a["op"] for a in assigns(run, "notify")}
    assert {a["op"] for a in extra} <= notified
    assert rep["verdict"] == "PASS"


def test_scheduler_config_defaults():
    c = SchedulerConfig()
    assert c.reconcile_period_ms == 1000
    assert c.imbalance_factor > 1
