"""Scenario files: JSON in, validated dataclasses out.

A scenario names the cluster graph, the streams and their producers, consumer
fleets, a fault script and optional autoscaler thresholds.  Config sections
(``transport``, ``durable``, ``data_cache``, ``meta_cache``, ``read``,
``scheduler``, ``tree``) override the matching dataclass fields by name.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from ..cluster import CacheSetup, FabricConfig, TransportConfig
from ..copy_tree import TreeConfig
from ..durable_log import DurableConfig
from ..file_layer import ReadConfig
from ..scheduler import SchedulerConfig

SCHEMA_VERSION = 1

FAULT_ACTIONS = (
    "kill_cache_replicas", "restart_cache_replicas", "kill_workers", "restart_workers",
    "kill_scheduler", "restart_scheduler", "link_down", "link_up", "cluster_outage",
    "double_assign", "disable_locks", "enable_locks", "reshard", "evict", "pause_producer",
    "resume_producer", "add_cluster",
)


class ScenarioError(ValueError):
    """Invalid scenario; ``str()`` carries the file and, when known, the line."""


@dataclass
class Edge:
    a: str
    b: str
    cost: float = 1.0
    latency_ms: int = 10
    bandwidth_bps: float = 1e9


@dataclass
class StreamSpec:
    name: str
    source: str
    destinations: list[str]
    shards: int = 2
    rate_bps: float = 400_000.0
    message_bytes: tuple[int, int] = (100, 1000)
    buffer_ms: int = 100
    rollover_ms: int = 30_000
    start_ms: int = 0


@dataclass
class ConsumerFleet:
    cluster: str
    stream: str
    count: int = 1
    poll_ms: int = 100
    rate_cap_bps: float | None = None
    start_ms: int = 0


@dataclass
class Fault:
    t: int
    action: str
    args: dict[str, Any] = field(default_factory=dict)


@dataclass
class AutoscalerSpec:
    enabled: bool = False
    max_qps: float = float("inf")
    max_bps: float = float("inf")
    period_ms: int = 1000
    # consecutive breaching ticks before scaling up
    breach_periods: int = 2
    low_fraction: float = 0.25
    scale_down_after_ms: int = 10_000
    min_replicas: int = 3
    max_replicas: int = 64


@dataclass
class Scenario:
    name: str
    clusters: list[str]
    edges: list[Edge]
    streams: list[StreamSpec]
    consumers: list[ConsumerFleet] = field(default_factory=list)
    faults: list[Fault] = field(default_factory=list)
    autoscaler: AutoscalerSpec = field(default_factory=AutoscalerSpec)
    seed: int = 0
    duration_ms: int = 10_000
    drain_ms: int = 60_000
    # [start, end) of the steady-state window used for regime checks
    stable_window_ms: tuple[int, int] | None = None
    readers_per_cluster: int = 2
    writers_per_cluster: int = 2
    fabric: FabricConfig = field(default_factory=FabricConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    consumers_check_ms: int = 500


_SECTIONS = {
    "transport": ("transport", TransportConfig),
    "durable": ("durable", DurableConfig),
    "data_cache": ("data_cache", CacheSetup),
    "meta_cache": ("meta_cache", CacheSetup),
    "read": ("read", ReadConfig),
    "tree": ("tree", TreeConfig),
}


def _build(cls, obj: dict, where: str):
    if not isinstance(obj, dict):
        raise ScenarioError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - names)
    if unknown:
        raise ScenarioError(f"{where}: unknown field(s) {unknown}")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"{where}: {e}") from None


def _override(base, obj: dict, where: str):
    cur = {f.name: getattr(base, f.name) for f in fields(base)}
    merged = dict(cur)
    merged.update(obj)
    return _build(type(base), merged, where) if obj else base


def from_dict(obj: dict, source: str = "<scenario>") -> Scenario:
    if not isinstance(obj, dict):
        raise ScenarioError(f"{source}: top level must be an object")
    o = dict(obj)
    ver = o.pop("schema", SCHEMA_VERSION)
    if ver != SCHEMA_VERSION:
        raise ScenarioError(f"{source}: unsupported schema version {ver}")
    try:
        name = o.pop("name")
        clusters = list(o.pop("clusters"))
        edges_raw = o.pop("edges")
        streams_raw = o.pop("streams")
    except KeyError as e:
        raise ScenarioError(f"{source}: missing required field {e.args[0]!r}") from None
    edges = [_build(Edge, e, f"{source}: edges[{i}]") for i, e in enumerate(edges_raw)]
    streams = []
    for i, s in enumerate(streams_raw):
        s = dict(s)
        if "message_bytes" in s:
            s["message_bytes"] = tuple(s["message_bytes"])
        streams.append(_build(StreamSpec, s, f"{source}: streams[{i}]"))
    consumers = [_build(ConsumerFleet, c, f"{source}: consumers[{i}]")
                 for i, c in enumerate(o.pop("consumers", []))]
    faults = []
    for i, f in enumerate(o.pop("faults", [])):
        f = dict(f)
        try:
            t, action = int(f.pop("t")), f.pop("action")
        except KeyError as e:
            raise ScenarioError(f"{source}: faults[{i}]: missing {e.args[0]!r}") from None
        faults.append(Fault(t, action, f))
    auto = _build(AutoscalerSpec, o.pop("autoscaler", {}), f"{source}: autoscaler")
    fab = FabricConfig()
    for key, (attr, _cls) in _SECTIONS.items():
        if key in o:
            setattr(fab, attr, _override(getattr(fab, attr), o.pop(key), f"{source}: {key}"))
    sched = _override(SchedulerConfig(), o.pop("scheduler", {}), f"{source}: scheduler")
    if "stable_window_ms" in o and o["stable_window_ms"] is not None:
        o["stable_window_ms"] = tuple(o["stable_window_ms"])
    try:
        sc = Scenario(name, clusters, edges, streams, consumers, faults, auto, fabric=fab,
                      scheduler=sched, **o)
    except TypeError as e:
        raise ScenarioError(f"{source}: {e}") from None
    sc.fabric.readers_per_cluster = sc.readers_per_cluster
    sc.fabric.writers_per_cluster = sc.writers_per_cluster
    validate(sc, source)
    return sc


def validate(sc: Scenario, source: str = "<scenario>") -> None:
    known = set(sc.clusters)
    if len(known) != len(sc.clusters):
        raise ScenarioError(f"{source}: duplicate cluster names")
    if sc.duration_ms <= 0:
        raise ScenarioError(f"{source}: duration_ms must be > 0")

    def need(c, where):
        if c not in known:
            raise ScenarioError(f"{source}: {where} references unknown cluster {c!r}")

    for i, e in enumerate(sc.edges):
        need(e.a, f"edges[{i}]")
        need(e.b, f"edges[{i}]")
    names = set()
    for i, s in enumerate(sc.streams):
        need(s.source, f"streams[{i}]")
        for d in s.destinations:
            need(d, f"streams[{i}]")
        if s.shards < 1 or s.buffer_ms < 1 or s.rate_bps <= 0:
            raise ScenarioError(f"{source}: streams[{i}]: shards, buffer_ms and rate must be positive")
        lo, hi = s.message_bytes
        if not 1 <= lo <= hi:
            raise ScenarioError(f"{source}: streams[{i}]: bad message_bytes range")
        names.add(s.name)
    for i, c in enumerate(sc.consumers):
        need(c.cluster, f"consumers[{i}]")
        if c.stream not in names:
            raise ScenarioError(f"{source}: consumers[{i}] references unknown stream {c.stream!r}")
    for i, f in enumerate(sc.faults):
        if f.action not in FAULT_ACTIONS:
            raise ScenarioError(f"{source}: faults[{i}]: unknown action {f.action!r}")
        for key in ("cluster", "a", "b"):
            if key in f.args:
                need(f.args[key], f"faults[{i}]")


def load(path: str | Path) -> Scenario:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ScenarioError(f"{p}: {e.strerror}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{p}:{e.lineno}:{e.colno}: {e.msg}") from None
    return from_dict(obj, str(p))
