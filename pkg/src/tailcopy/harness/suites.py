"""The built-in fault suite: one small topology, many fault scripts.

Each entry is a scenario dict so it can be dumped to JSON and replayed
through the CLI like any other scenario file.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass

from .runner import run_scenario
from .scenario import Scenario, from_dict

BASE = {
    "name": "base",
    "seed": 0,
    "duration_ms": 6000,
    "drain_ms": 40000,
    "clusters": ["A", "B", "C", "D", "E"],
    "edges": [
        {"a": "A", "b": "B", "cost": 1, "latency_ms": 10},
        {"a": "B", "b": "C", "cost": 1, "latency_ms": 10},
        {"a": "B", "b": "D", "cost": 1, "latency_ms": 15},
        {"a": "A", "b": "C", "cost": 3, "latency_ms": 20},
        {"a": "C", "b": "D", "cost": 2, "latency_ms": 10},
        {"a": "D", "b": "E", "cost": 1, "latency_ms": 10},
        {"a": "C", "b": "E", "cost": 4, "latency_ms": 25},
    ],
    "streams": [
        {"name": "s", "source": "A", "destinations": ["B", "C", "D"], "shards": 2,
         "rate_bps": 200000, "message_bytes": [40, 900], "rollover_ms": 3000},
    ],
    "consumers": [
        {"cluster": "B", "stream": "s", "count": 2},
        {"cluster": "C", "stream": "s", "count": 2},
        {"cluster": "D", "stream": "s", "count": 3},
    ],
}


def _f(t: int, action: str, **args) -> dict:
    return {"t": t, "action": action, **args}


FAULTS: dict[str, list[dict]] = {
    "baseline": [],
    "kill_data_replica": [_f(2000, "kill_cache_replicas", cluster="D", count=1, duration_ms=2000)],
    "kill_two_data_replicas": [_f(2000, "kill_cache_replicas", cluster="D", count=2, duration_ms=2000)],
    "kill_data_shard": [_f(1500, "kill_cache_replicas", cluster="C", count=3, duration_ms=2500)],
    "kill_meta_replica": [_f(2000, "kill_cache_replicas", cluster="B", cache="meta", count=1,
                             duration_ms=2000)],
    "kill_meta_quorum": [_f(2000, "kill_cache_replicas", cluster="D", cache="meta", count=2,
                            duration_ms=1500)],
    "kill_writer": [_f(1500, "kill_workers", cluster="B", role="writer", count=1, duration_ms=1000)],
    "kill_readers": [_f(1500, "kill_workers", cluster="B", role="reader", count=2, duration_ms=1500)],
    "kill_all_writers": [_f(2500, "kill_workers", cluster="D", role="writer", count=2,
                            duration_ms=2000)],
    "scheduler_restart": [_f(1000, "kill_scheduler", cluster="B", duration_ms=2500)],
    "source_scheduler_restart": [_f(1200, "kill_scheduler", cluster="A", duration_ms=1500)],
    "link_down_source": [_f(1500, "link_down", a="A", b="B", duration_ms=2000)],
    "link_down_inner": [_f(2000, "link_down", a="B", b="D", duration_ms=1500)],
    "outage_leaf": [_f(2000, "cluster_outage", cluster="C", duration_ms=2000)],
    "outage_inner": [_f(2000, "cluster_outage", cluster="B", duration_ms=2500)],
    "duel": [_f(1500, "double_assign", window_ms=1500), _f(3500, "double_assign", window_ms=1000)],
    "duel_without_locks": [_f(1000, "disable_locks", duration_ms=3000),
                           _f(1500, "double_assign", window_ms=2000)],
    "evict_half": [_f(2000, "evict", cluster="D", fraction=0.5),
                   _f(3000, "evict", cluster="C", fraction=0.5)],
    "evict_storm": [_f(t, "evict", cluster=c, fraction=1.0)
                    for t in (1500, 2500, 3500) for c in ("B", "D")],
    "reshard_grow": [_f(2000, "reshard", cluster="D", delta=2)],
    "reshard_grow_shrink": [_f(1500, "reshard", cluster="C", delta=1),
                            _f(3500, "reshard", cluster="C", delta=-1)],
    "reshard_meta": [_f(2000, "reshard", cluster="B", cache="meta", delta=1)],
    "producer_pause": [_f(1500, "pause_producer", stream="s"), _f(3000, "resume_producer", stream="s")],
    "add_cluster": [_f(2000, "add_cluster", cluster="E", stream="s")],
    "kitchen_sink": [
        _f(1000, "disable_locks", duration_ms=2500),
        _f(1200, "double_assign", window_ms=1500),
        _f(1500, "kill_cache_replicas", cluster="D", count=1, duration_ms=2000),
        _f(2000, "evict", cluster="B", fraction=0.7),
        _f(2500, "reshard", cluster="D", delta=1),
        _f(3000, "kill_workers", cluster="C", role="writer", count=1, duration_ms=800),
        _f(3200, "link_down", a="C", b="D", duration_ms=700),
    ],
}


def fault_scenarios(names: list[str] | None = None) -> list[Scenario]:
    out = []
    for name in names or list(FAULTS):
        d = copy.deepcopy(BASE)
        d["name"] = name
        d["faults"] = copy.deepcopy(FAULTS[name])
        out.append(from_dict(d, f"<suite:{name}>"))
    return out


@dataclass
class SuiteRow:
    scenario: str
    seed: int
    verdict: str
    safety: int
    termination: int
    sim_ms: int
    wall_s: float

    def line(self) -> str:
        return (f"{self.scenario:<26} seed={self.seed:<3} {self.verdict:<4} "
                f"violations={self.safety} gaps={self.termination} "
                f"end={self.sim_ms}ms wall={self.wall_s:.2f}s")


def run_suite(scenarios: list[Scenario], seeds: list[int]) -> list[SuiteRow]:
    rows = []
    for sc in scenarios:
        for seed in seeds:
            t0 = time.perf_counter()
            rep, _ = run_scenario(sc, seed=seed)
            rows.append(SuiteRow(sc.name, seed, rep["verdict"],
                                 rep["safety"]["violation_count"] + len(rep["safety"]["prefix_errors"]),
                                 len(rep["termination"]["gaps"]), rep["end_ms"],
                                 time.perf_counter() - t0))
    return rows
