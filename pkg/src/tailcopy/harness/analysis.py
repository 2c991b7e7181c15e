"""Post-run analysis shared by the experiment scripts and the acceptance tests."""

from __future__ import annotations

from dataclasses import dataclass

from ..copy_tree import ClusterGraph, build_tree
from .scenario import Scenario


def scenario_graph(sc: Scenario) -> ClusterGraph:
    return ClusterGraph.from_edges(sc.clusters, [(e.a, e.b, e.cost) for e in sc.edges])


def latency_bound(sc: Scenario, stream: str, cluster: str) -> int:
    """Steady-state delivery bound at ``cluster``: producer buffer, then per hop
    one reader poll plus the link latency, then one consumer poll."""
    st = next(s for s in sc.streams if s.name == stream)
    tc = sc.fabric.tree
    tree = build_tree(scenario_graph(sc), st.source, st.destinations, tc.alpha_depth,
                      tc.beta_fanout, tc.max_depth)
    lat = {}
    for e in sc.edges:
        lat[(e.a, e.b)] = lat[(e.b, e.a)] = e.latency_ms
    poll = sc.fabric.transport.reader_poll_ms
    total, n = 0, cluster
    while tree.parent[n] is not None:
        total += poll + lat[(tree.parent[n], n)]
        n = tree.parent[n]
    consumer_poll = max((f.poll_ms for f in sc.consumers if f.cluster == cluster and f.stream == stream),
                        default=0)
    return st.buffer_ms + total + consumer_poll


@dataclass
class Burst:
    before: int
    burst: int
    stable: int
    series: dict[int, int]

    @property
    def burst_then_zero(self) -> bool:
        return self.burst > 0 and self.stable == 0


def fallback_burst(report: dict, cluster: str, fault_ms: int, window: tuple[int, int]) -> Burst:
    """Consumer fallback reads at ``cluster`` before the fault, from the fault to the
    stable window, and inside the window."""
    raw = report["metrics"]["fallback_reads_per_s"].get(cluster, {})
    series = {int(s): n for s, n in raw.items()}
    before = sum(n for s, n in series.items() if s * 1000 < fault_ms)
    burst = sum(n for s, n in series.items() if fault_ms <= s * 1000 < window[0])
    stable = sum(n for s, n in series.items() if window[0] <= s * 1000 < window[1])
    return Burst(before, burst, stable, series)
