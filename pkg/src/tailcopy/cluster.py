"""Wiring shared by transport, scheduler and harness: clusters, worker pools, streams."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

from .copy_tree import ClusterGraph, CopyTree, TreeConfig
from .durable_log import DurableConfig, DurableLog
from .file_layer import ChunkGeometry, LengthPoller, ReadConfig
from .kv_cache import (META_CACHE_TTL_MS, CacheInstance, CacheReplicaConfig, ReplicationConfig)
from .simnet import ProcessHandle, Simulator

if TYPE_CHECKING:
    from .scheduler import Scheduler
    from .transport import Operation


@dataclass
class TransportConfig:
    reader_poll_ms: int = 50
    lock_check_ms: int = 100
    seize_delay_ms: int = 500
    locks_enabled: bool = True
    heartbeat_ms: int = 100
    orphan_after_ms: int = 300
    # writer-side silence limit, in reader poll intervals
    silence_polls: int = 3
    cache_write_jitter_ms: int = 3
    max_delta_bytes: int = 64 * 4096
    resync_lag_bytes: int = 256 * 4096
    rate_limited_leaf_bps: float = 8e6
    message_overhead_bytes: int = 64


@dataclass
class CacheSetup:
    replicas: int = 3
    capacity_bytes: int = 1 << 30
    ttl_ms: int = 60_000
    gc_start_fraction: float = 0.80
    max_qps: float = float("inf")
    max_bps: float = float("inf")
    rtt_ms: int = 1
    write_ms: int = 2
    throttle_delay_ms: int = 50
    migration_ms: int = 1000


@dataclass
class FabricConfig:
    geometry: ChunkGeometry = field(default_factory=ChunkGeometry)
    read: ReadConfig = field(default_factory=ReadConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)
    durable: DurableConfig = field(default_factory=DurableConfig)
    data_cache: CacheSetup = field(default_factory=CacheSetup)
    meta_cache: CacheSetup = field(default_factory=lambda: CacheSetup(ttl_ms=META_CACHE_TTL_MS))
    tree: TreeConfig = field(default_factory=TreeConfig)
    readers_per_cluster: int = 2
    writers_per_cluster: int = 2
    gc_period_ms: int = 1000


def make_cache(name: str, sim: Simulator, s: CacheSetup, max_value: int | None) -> CacheInstance:
    cfg = CacheReplicaConfig(capacity_bytes=s.capacity_bytes, gc_start_fraction=s.gc_start_fraction,
                             ttl_ms=s.ttl_ms, max_qps=s.max_qps, max_bps=s.max_bps)
    return CacheInstance(name, lambda: sim.now, sim.rng, s.replicas, cfg, ReplicationConfig(),
                         rtt_ms=s.rtt_ms, write_ms=s.write_ms,
                         throttle_delay_ms=s.throttle_delay_ms, migration_ms=s.migration_ms,
                         max_value_bytes=max_value)


class MetricsSink:
    """Hooks the transport and scheduler report into; the harness overrides them."""

    def hop_delay(self, up: str, down: str, storage: str, ms: int) -> None:
        pass

    def reader_read(self, cluster: str, storage: str, stats: Any) -> None:
        pass

    def write_latency(self, cluster: str, ms: int) -> None:
        pass


class Worker:
    """One reader or writer replica.  Readers own a shared background length poller."""

    def __init__(self, fabric: "Fabric", cluster: "Cluster", role: str, idx: int):
        self.fabric = fabric
        self.cluster = cluster
        self.role = role
        self.id = f"{cluster.name}/{role}{idx}"
        self.proc: ProcessHandle = fabric.sim.spawn(self.id, cluster.name)
        self.ops: dict[int, "Operation"] = {}
        self._fresh_poller()
        self.proc.on_kill.append(self._on_kill)
        self.proc.on_restart.append(self._on_restart)
        if role == "reader":
            self._arm()

    def _fresh_poller(self) -> None:
        c = self.cluster
        self.poller = LengthPoller(c.meta_cache, c.durable, lambda: self.fabric.sim.now,
                                   self.fabric.config.durable.poll_ms)

    def _arm(self) -> None:
        sim = self.fabric.sim
        period = self.fabric.config.transport.reader_poll_ms
        # random phase so pollers across workers do not fire in lockstep
        sim.every(period, self._poll, owner=self.proc, label=f"poll {self.id}",
                  start_ms=sim.rng.randint(1, period))

    def _poll(self) -> None:
        if not self.ops:
            return
        ops = list(self.ops.values())
        paths = list(dict.fromkeys(op.path for op in ops))
        metas = self.poller.poll_lengths(paths)
        for op in ops:
            if op.uid in self.ops:
                op.reader_step(metas[op.path])

    def _on_kill(self) -> None:
        ops = list(self.ops.values())
        self.ops.clear()
        for op in ops:
            op.half_died(self.role)

    def _on_restart(self) -> None:
        self._fresh_poller()
        if self.role == "reader":
            self._arm()

    @property
    def alive(self) -> bool:
        return self.proc.alive

    def load(self) -> int:
        return len(self.ops)


class Cluster:
    def __init__(self, fabric: "Fabric", name: str):
        cfg = fabric.config
        sim = fabric.sim
        self.name = name
        self.fabric = fabric
        self.durable = DurableLog(name, lambda: sim.now, cfg.durable)
        self.data_cache = make_cache(f"{name}.data", sim, cfg.data_cache, cfg.geometry.chunk_size)
        self.meta_cache = make_cache(f"{name}.meta", sim, cfg.meta_cache, None)
        self.readers = [Worker(fabric, self, "reader", i) for i in range(cfg.readers_per_cluster)]
        self.writers = [Worker(fabric, self, "writer", i) for i in range(cfg.writers_per_cluster)]
        self.scheduler: "Scheduler | None" = None
        self.healthy = True

    def pool(self, role: str) -> list[Worker]:
        return self.readers if role == "reader" else self.writers

    def least_loaded(self, role: str, exclude: str | None = None) -> Worker | None:
        live = [w for w in self.pool(role) if w.alive and w.id != exclude]
        if not live:
            live = [w for w in self.pool(role) if w.alive]
        if not live:
            return None
        return min(live, key=lambda w: (w.load(), w.id))


@dataclass
class Stream:
    name: str
    source: str
    destinations: list[str]
    shards: int
    tree: CopyTree


class Fabric:
    """Everything a transport operation or scheduler needs to reach."""

    def __init__(self, sim: Simulator, graph: ClusterGraph, config: FabricConfig | None = None,
                 metrics: Any = None, link_latency: dict | None = None,
                 link_bandwidth: dict | None = None):
        self.sim = sim
        self.graph = graph
        self.config = config or FabricConfig()
        self.metrics = metrics if metrics is not None else MetricsSink()
        self.streams: dict[str, Stream] = {}
        self.clusters: dict[str, Cluster] = {}
        for n in graph.nodes:
            self.clusters[n] = Cluster(self, n)
        link_latency = link_latency or {}
        link_bandwidth = link_bandwidth or {}
        for (a, b) in graph.costs:
            lat = link_latency.get((a, b), link_latency.get((b, a), 10))
            bw = link_bandwidth.get((a, b), link_bandwidth.get((b, a), 1e9))
            sim.add_link(a, b, lat, bw)
            sim.add_link(b, a, lat, bw)
        self.next_nonce = 0

    def nonce(self) -> int:
        self.next_nonce += 1
        return self.next_nonce

    def link(self, a: str, b: str):
        if (a, b) not in self.sim.links:
            # clusters without a direct edge talk over a slow default path
            return self.sim.add_link(a, b, 100, 1e8)
        return self.sim.links[(a, b)]
