"""Runs a :class:`Scenario` end to end and produces the report.

Phases: the scenario runs for ``duration_ms`` with producers, consumers and
the fault script active.  Producers then seal their files, every fault is
healed, and the run drains until every destination holds a sealed copy of
every file and every consumer has read everything (quiescence), or
``drain_ms`` runs out, which fails the termination check.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from ..cluster import Fabric, FabricConfig, Stream
from ..copy_tree import ClusterGraph, add_cluster, build_tree, penalize_and_rebuild, reroute_consumers
from ..durable_log import StaleHandle
from ..file_layer import (ChunkWritePlan, Consumer, ConsumerConfig, DeliveryViolation, IndexRecord,
                          LengthPoller, Storage, WriterState, data_path, index_path, shadow_write,
                          shard_dir, update_meta)
from ..kv_cache import chunk_key
from ..scheduler import Scheduler
from ..simnet import Simulator
from .autoscaler import Autoscaler
from .metrics import Metrics
from .monitor import CorrectnessMonitor, prefix_violations
from .scenario import ConsumerFleet, Fault, Scenario, StreamSpec


# -- producers ------------------------------------------------------------------

@dataclass
class _ShardFiles:
    data: WriterState
    index: WriterState
    created: int
    seq: int = 0
    gens: dict = field(default_factory=dict)


class Producer:
    """Buffers messages for ``buffer_ms`` and appends them to the shard's data and index files."""

    def __init__(self, run: "Run", spec: StreamSpec):
        self.run = run
        self.spec = spec
        self.sim = run.sim
        self.cluster = run.fabric.clusters[spec.source]
        self.proc = self.sim.spawn(f"producer/{spec.name}", spec.source, persistent=True)
        self.files: dict[int, _ShardFiles | None] = {k: None for k in range(spec.shards)}
        self.carry = [0.0] * spec.shards
        self.paused = False
        self.stopped = False
        self.messages = 0
        for k in range(spec.shards):
            phase = spec.start_ms + self.sim.rng.randint(1, spec.buffer_ms)
            self.sim.schedule(phase, self._flush_loop, k, owner=self.proc)

    def _flush_loop(self, shard: int) -> None:
        if self.stopped:
            return
        if not self.paused:
            self.flush(shard)
        self.sim.schedule(self.spec.buffer_ms, self._flush_loop, shard, owner=self.proc)

    def _open(self, shard: int) -> _ShardFiles:
        now = self.sim.now
        d = self.cluster.durable
        dp = data_path(self.spec.name, shard, now)
        ip = index_path(dp)
        C = self.run.fabric.config.geometry.chunk_size
        sf = _ShardFiles(WriterState(dp, d.open_writer(dp), ChunkWritePlan(C)),
                         WriterState(ip, d.open_writer(ip), ChunkWritePlan(C)), now)
        self.files[shard] = sf
        sched = self.cluster.scheduler
        for p in (ip, dp):
            self.run.paths.append((self.spec.name, shard, p))
            if sched is not None:
                self.sim.schedule(0, sched.notify_produced, self.spec.name, p, owner=sched.proc)
        return sf

    def flush(self, shard: int) -> None:
        spec = self.spec
        now = self.sim.now
        sf = self.files[shard]
        if sf is not None and now - sf.created >= spec.rollover_ms:
            self._seal(sf)
            sf = None
        if sf is None:
            sf = self._open(shard)
        budget = self.carry[shard] + spec.rate_bps / 8 * spec.buffer_ms / 1000 / spec.shards
        rng = self.sim.rng
        lo, hi = spec.message_bytes
        payload = bytearray()
        sizes = []
        while budget >= lo:
            size = min(rng.randint(lo, hi), int(budget))
            budget -= size
            sizes.append(size)
            payload += rng.randbytes(size)
        self.carry[shard] = budget
        if not payload:
            return
        # arrival times within the buffer interval, ascending as in a real buffer
        times = sorted(max(0, now - rng.randrange(spec.buffer_ms)) for _ in sizes)
        recs = []
        off = sf.data.written
        for size, t in zip(sizes, times):
            recs.append(IndexRecord(off, size, t, sf.seq))
            off += size
            sf.seq += 1
        index = b"".join(r.encode() for r in recs)
        self.messages += len(recs)
        self._append(sf, sf.data, bytes(payload))
        self._append(sf, sf.index, index)

    def _append(self, sf: _ShardFiles, ws: WriterState, data: bytes) -> None:
        d = self.cluster.durable
        meta = self.cluster.meta_cache
        new_len = d.append(ws.handle, data)
        update_meta(meta, ws.path, durable_len=new_len, grow_only=True)
        if ws.plan.failed:
            self._restart_plan(sf, ws)
        for req in shadow_write(ws, data):
            self._put(sf, ws, req)

    def _restart_plan(self, sf: _ShardFiles, ws: WriterState) -> None:
        """After a failed put, start the cache copy again from the current chunk."""
        C = ws.plan.C
        start = ws.written // C * C
        ws.plan = ChunkWritePlan(C, start)
        sf.gens[ws.path] = sf.gens.get(ws.path, 0) + 1
        update_meta(self.cluster.meta_cache, ws.path, cache_len=start, grow_only=True)
        head = bytes(self.cluster.durable.files[ws.path].data[start:ws.written])
        for req in ws.plan.add(start, head):
            self._put(sf, ws, req)

    def _put(self, sf: _ShardFiles, ws: WriterState, req) -> None:
        cache = self.cluster.data_cache
        jitter = self.run.fabric.config.transport.cache_write_jitter_ms
        delay = cache.write_ms + (self.sim.rng.randint(0, jitter) if jitter else 0)
        self.sim.schedule(delay, self._put_done, sf, ws, req, sf.gens.get(ws.path, 0),
                          owner=self.proc)

    def _put_done(self, sf: _ShardFiles, ws: WriterState, req, gen: int) -> None:
        acked = self.cluster.data_cache.put(chunk_key(ws.path, req.seq), req.data)
        if gen != sf.gens.get(ws.path, 0):
            return
        follow = ws.plan.on_ack(req, acked)
        if acked == 0:
            return
        for f in follow:
            self._put(sf, ws, f)
        update_meta(self.cluster.meta_cache, ws.path, cache_len=ws.plan.pointer, grow_only=True)

    def _seal(self, sf: _ShardFiles) -> None:
        d = self.cluster.durable
        for ws in (sf.index, sf.data):
            try:
                d.seal(ws.handle)
            except StaleHandle:
                pass
            update_meta(self.cluster.meta_cache, ws.path, durable_len=ws.written,
                        sealed_len=ws.written, grow_only=True)

    def stop(self) -> None:
        if self.stopped:
            return
        self.stopped = True
        for k, sf in self.files.items():
            if sf is not None:
                self._seal(sf)


# -- consumers ------------------------------------------------------------------

class ConsumerProc:
    def __init__(self, run: "Run", fleet: ConsumerFleet, idx: int):
        self.run = run
        self.sim = run.sim
        self.fleet = fleet
        self.home = fleet.cluster
        self.id = f"{fleet.stream}@{fleet.cluster}/c{idx}"
        spec = run.stream_specs[fleet.stream]
        cfg = run.fabric.config
        cc = ConsumerConfig(poll_ms=fleet.poll_ms,
                            rate_cap_bps=fleet.rate_cap_bps or float("inf"))
        self.consumer = Consumer(self.id, run.storage_for(self.home, self.home),
                                 [(spec.name, k) for k in range(spec.shards)],
                                 cfg.geometry, cc, cfg.read)
        self.proc = self.sim.spawn(f"consumer/{self.id}", self.home, persistent=True)
        self.busy = False
        self.started = False
        start = fleet.start_ms + self.sim.rng.randint(1, fleet.poll_ms)
        self.sim.every(fleet.poll_ms, self.poll, owner=self.proc, start_ms=start)

    def move_to(self, cluster: str) -> None:
        self.consumer.storage = self.run.storage_for(self.home, cluster)

    def poll(self) -> None:
        self.started = True
        if self.busy:
            return
        now = self.sim.now
        try:
            step = self.consumer.consumer_next(now)
        except DeliveryViolation as e:
            self.run.monitor.framing_error(self.id, str(e), now)
            return False
        self.busy = True
        self.sim.schedule(step.latency_ms, self._finish, step, owner=self.proc)

    def _finish(self, step) -> None:
        self.busy = False
        now = self.sim.now
        mon = self.run.monitor
        n = 0
        for path, off, blob in step.appended:
            mon.observe(self.id, path, off, blob, now)
            n += len(blob)
        m = self.run.metrics
        m.consumer_step(self.home, now, step.stats, n)
        for msg in step.messages:
            m.delivered(self.home, now, now - msg.record.produce_time_ms)


# -- the run ------------------------------------------------------------------------

class Run:
    def __init__(self, scenario: Scenario, seed: int | None = None, trace: bool = False):
        self.scenario = sc = scenario
        self.seed = sc.seed if seed is None else seed
        self.sim = Simulator(self.seed, trace=trace)
        graph = ClusterGraph(list(sc.clusters), {(e.a, e.b): e.cost for e in sc.edges})
        lat = {(e.a, e.b): e.latency_ms for e in sc.edges}
        bw = {(e.a, e.b): e.bandwidth_bps for e in sc.edges}
        self.metrics = Metrics()
        cfg: FabricConfig = sc.fabric
        self.fabric = Fabric(self.sim, graph, cfg, self.metrics, lat, bw)
        self.stream_specs = {s.name: s for s in sc.streams}
        self.paths: list[tuple[str, int, str]] = []
        tc = cfg.tree
        for s in sc.streams:
            tree = build_tree(graph, s.source, s.destinations, tc.alpha_depth, tc.beta_fanout,
                              tc.max_depth)
            self.fabric.streams[s.name] = Stream(s.name, s.source, list(s.destinations),
                                                 s.shards, tree)
            self.sim.record("tree", stream=s.name, tree=tree.to_json())
        for name, c in self.fabric.clusters.items():
            c.scheduler = Scheduler(self.fabric, name, sc.scheduler)
        self.sources = {s.name: s.source for s in sc.streams}
        self.monitor = CorrectnessMonitor(self._produced)
        self.producers = [Producer(self, s) for s in sc.streams]
        self.consumers: list[ConsumerProc] = []
        for fleet in sc.consumers:
            base = sum(1 for c in self.consumers if c.fleet.cluster == fleet.cluster
                       and c.fleet.stream == fleet.stream)
            for i in range(fleet.count):
                self.consumers.append(ConsumerProc(self, fleet, base + i))
        self.autoscaler = Autoscaler(self, sc.autoscaler)
        self.undo: dict[str, tuple] = {}
        self.locks_default = cfg.transport.locks_enabled
        self.prefix_errors: list[dict] = []
        self.fault_log: list[dict] = []
        for f in sorted(sc.faults, key=lambda f: f.t):
            self.sim.at(f.t, self._fault, f)
        self.sim.every(cfg.gc_period_ms, self._gc)
        self.sim.every(1000, self._sample)
        self.quiescent_at: int | None = None

    # storage views

    def _produced(self, path: str) -> bytearray:
        stream = path.split("/")[2]
        f = self.fabric.clusters[self.sources[stream]].durable.files.get(path)
        return f.data if f is not None else bytearray()

    def storage_for(self, home: str, cluster: str) -> Storage:
        c = self.fabric.clusters[cluster]
        extra = 0
        if cluster != home:
            extra = 2 * self.fabric.link(home, cluster).latency_ms
        poller = LengthPoller(c.meta_cache, c.durable, lambda: self.sim.now,
                              self.fabric.config.durable.poll_ms)
        return Storage(cluster, c.data_cache, c.durable, poller, extra)

    # periodic housekeeping

    def _gc(self) -> None:
        for c in self.fabric.clusters.values():
            c.data_cache.gc_tick()
            c.meta_cache.gc_tick()

    def _sample(self) -> None:
        now = self.sim.now
        for name in sorted(self.fabric.clusters):
            inst = self.fabric.clusters[name].data_cache
            loads = [inst.replicas[r].load(now) for r in inst.ring_members()
                     if inst.replicas[r].alive]
            self.metrics.sample_cache(inst.name, now, [q for q, _ in loads],
                                      [b * 8 for _, b in loads])
        self.autoscaler.tick()

    # faults

    def _fault(self, f: Fault) -> None:
        a = dict(f.args)
        self.sim.record("fault", action=f.action, **a)
        self.fault_log.append({"t": self.sim.now, "action": f.action, **a})
        handler = getattr(self, "_f_" + f.action)
        handler(a)

    def _later(self, key: str, a: dict, fn, *args) -> None:
        self.undo[key] = (fn, args)
        if a.get("duration_ms") is not None:
            self.sim.schedule(int(a["duration_ms"]), self._heal, key)

    def _heal(self, key: str) -> None:
        item = self.undo.pop(key, None)
        if item is not None:
            fn, args = item
            self.sim.record("heal", what=key)
            fn(*args)

    def _cache(self, a: dict):
        c = self.fabric.clusters[a["cluster"]]
        return c.meta_cache if a.get("cache", "data") == "meta" else c.data_cache

    def _f_kill_cache_replicas(self, a: dict) -> None:
        inst = self._cache(a)
        ids = a.get("replicas")
        if ids is None:
            # the replicas of one key-shard
            ids = list(inst.replica_ids(chunk_key("/key-shard", int(a.get("shard", 0)))))
            ids = [r for r in ids if inst.replicas[r].alive][: int(a.get("count", 1))]
        for rid in ids:
            inst.kill_replica(rid)
        self._later(f"cache:{inst.name}:{','.join(ids)}", a, self._restart_replicas, inst, ids)

    def _restart_replicas(self, inst, ids) -> None:
        for rid in ids:
            inst.restart_replica(rid)

    def _f_restart_cache_replicas(self, a: dict) -> None:
        inst = self._cache(a)
        for key in sorted(k for k in self.undo if k.startswith(f"cache:{inst.name}:")):
            self._heal(key)

    def _workers(self, a: dict):
        c = self.fabric.clusters[a["cluster"]]
        return c.pool(a.get("role", "writer"))

    def _f_kill_workers(self, a: dict) -> None:
        live = [w for w in self._workers(a) if w.alive][: int(a.get("count", 1))]
        for w in live:
            self.sim.kill_process(w.proc)
        key = f"workers:{','.join(w.id for w in live)}"
        self._later(key, a, self._restart_procs, [w.proc for w in live])

    def _restart_procs(self, procs) -> None:
        for p in procs:
            self.sim.restart_process(p)

    def _f_restart_workers(self, a: dict) -> None:
        prefix = f"workers:{a['cluster']}/"
        for key in sorted(k for k in self.undo if k.startswith(prefix)):
            self._heal(key)

    def _f_kill_scheduler(self, a: dict) -> None:
        s = self.fabric.clusters[a["cluster"]].scheduler
        self.sim.kill_process(s.proc)
        self._later(f"scheduler:{a['cluster']}", a, self._restart_procs, [s.proc])

    def _f_restart_scheduler(self, a: dict) -> None:
        self._heal(f"scheduler:{a['cluster']}")

    def _f_link_down(self, a: dict) -> None:
        links = [self.fabric.link(a["a"], a["b"]), self.fabric.link(a["b"], a["a"])]
        for l in links:
            l.up = False
        self._later(f"link:{a['a']}-{a['b']}", a, self._links_up, links)

    def _links_up(self, links) -> None:
        for l in links:
            l.up = True

    def _f_link_up(self, a: dict) -> None:
        self._heal(f"link:{a['a']}-{a['b']}")

    def _f_cluster_outage(self, a: dict) -> None:
        name = a["cluster"]
        c = self.fabric.clusters[name]
        c.healthy = False
        g = self.fabric.graph
        g.down_nodes.add(name)
        procs = [w.proc for w in c.readers + c.writers] + [c.scheduler.proc]
        for p in procs:
            self.sim.kill_process(p)
        replicas = []
        for inst in (c.data_cache, c.meta_cache):
            for rid in inst.ring_members():
                if inst.replicas[rid].alive:
                    inst.kill_replica(rid)
                    replicas.append((inst, rid))
        for sname in sorted(self.fabric.streams):
            st = self.fabric.streams[sname]
            if name not in st.tree.parent or name == st.source:
                continue
            tree, pg = penalize_and_rebuild(st.tree, g, [name], (), self.fabric.config.tree)
            g.node_penalty.update(pg.node_penalty)
            g.edge_penalty.update(pg.edge_penalty)
            st.tree = tree
            self.sim.record("tree", stream=sname, tree=tree.to_json())
            target = reroute_consumers(g, tree, name)
            for cp in self.consumers:
                if cp.home == name and cp.fleet.stream == sname:
                    cp.move_to(target)
            self.sim.record("reroute", cluster=name, stream=sname, to=target)
        self._later(f"outage:{name}", a, self._outage_over, name, procs, replicas)

    def _outage_over(self, name: str, procs, replicas) -> None:
        c = self.fabric.clusters[name]
        g = self.fabric.graph
        g.down_nodes.discard(name)
        c.healthy = True
        for inst, rid in replicas:
            inst.restart_replica(rid)
        self._restart_procs(procs)
        self._rebuild_trees()
        for cp in self.consumers:
            if cp.home == name:
                cp.move_to(name)

    def _rebuild_trees(self) -> None:
        tc = self.fabric.config.tree
        for sname in sorted(self.fabric.streams):
            st = self.fabric.streams[sname]
            tree = build_tree(self.fabric.graph, st.source, st.destinations, tc.alpha_depth,
                              tc.beta_fanout, tc.max_depth)
            for n, m in st.tree.mode.items():
                if n in tree.parent and not tree.children(n):
                    tree.mode[n] = m
            st.tree = tree
            self.sim.record("tree", stream=sname, tree=tree.to_json())

    def _schedulers(self, a: dict):
        names = [a["cluster"]] if "cluster" in a else sorted(self.fabric.clusters)
        return [self.fabric.clusters[n].scheduler for n in names]

    def _f_double_assign(self, a: dict) -> None:
        for s in self._schedulers(a):
            if s.proc.alive:
                s.double_assign(int(a.get("window_ms", 0)))

    def _f_disable_locks(self, a: dict) -> None:
        self.fabric.config.transport.locks_enabled = False
        self._later("locks", a, self._locks_on)

    def _locks_on(self) -> None:
        self.fabric.config.transport.locks_enabled = self.locks_default

    def _f_enable_locks(self, a: dict) -> None:
        self._heal("locks")

    def _f_reshard(self, a: dict) -> None:
        self._cache(a).trigger_reshard(int(a.get("delta", 1)))

    def _f_evict(self, a: dict) -> None:
        """Drop a random fraction of every replica's entries, as a capacity GC storm would."""
        inst = self._cache(a)
        frac = float(a.get("fraction", 0.5))
        rng = self.sim.rng
        for rid in sorted(inst.replicas):
            r = inst.replicas[rid]
            for k in [k for k in r.store if rng.random() < frac]:
                inst._remove(r, k)

    def _f_pause_producer(self, a: dict) -> None:
        for p in self.producers:
            if p.spec.name == a["stream"]:
                p.paused = True

    def _f_resume_producer(self, a: dict) -> None:
        for p in self.producers:
            if p.spec.name == a["stream"]:
                p.paused = False

    def _f_add_cluster(self, a: dict) -> None:
        name = a["cluster"]
        for sname in ([a["stream"]] if "stream" in a else sorted(self.fabric.streams)):
            st = self.fabric.streams[sname]
            if name in st.tree.parent:
                continue
            st.tree = add_cluster(st.tree, self.fabric.graph, name, self.fabric.config.tree)
            st.destinations.append(name)
            self.sim.record("tree", stream=sname, tree=st.tree.to_json())

    def heal_all(self) -> None:
        for key in sorted(self.undo):
            self._heal(key)
        for s in self._schedulers({}):
            s.double_until = -1

    # verdicts

    def check_prefixes(self) -> None:
        for sname in sorted(self.fabric.streams):
            st = self.fabric.streams[sname]
            src = self.fabric.clusters[st.source].durable
            for path in src.listdir(f"/streams/{sname}/"):
                copies = {}
                for cname in sorted(self.fabric.clusters):
                    f = self.fabric.clusters[cname].durable.files.get(path)
                    if cname != st.source and f is not None:
                        copies[cname] = f.data
                for bad in prefix_violations(copies, src.files[path].data):
                    err = {"path": path, "cluster": bad, "t": self.sim.now}
                    if err not in self.prefix_errors:
                        self.prefix_errors.append(err)

    def replicated(self) -> bool:
        for sname in sorted(self.fabric.streams):
            st = self.fabric.streams[sname]
            src = self.fabric.clusters[st.source].durable
            for path in src.listdir(f"/streams/{sname}/"):
                n = src.poll_length(path)
                for d in st.destinations:
                    dd = self.fabric.clusters[d].durable
                    if not dd.is_sealed(path) or dd.poll_length(path) != n:
                        return False
        return True

    def consumers_done(self) -> bool:
        return not self.termination_gaps()

    def termination_gaps(self) -> list[dict]:
        gaps = []
        for cp in self.consumers:
            if not cp.started:
                continue
            spec = self.stream_specs[cp.fleet.stream]
            paths = [p for s, _, p in self.paths if s == spec.name]
            gaps += self.monitor.termination_gaps([cp.id], paths)
        return gaps

    def execute(self) -> dict:
        sc = self.scenario
        sim = self.sim
        step = sc.consumers_check_ms
        while sim.now < sc.duration_ms:
            sim.run(until=min(sc.duration_ms, sim.now + 1000))
            self.check_prefixes()
        for p in self.producers:
            p.stop()
        self.heal_all()
        deadline = sc.duration_ms + sc.drain_ms
        while sim.now < deadline:
            sim.run(until=min(deadline, sim.now + step))
            if self.replicated() and self.consumers_done():
                self.quiescent_at = sim.now
                break
        self.check_prefixes()
        return self.report()

    def report(self) -> dict:
        sc = self.scenario
        gaps = self.termination_gaps()
        safety_ok = self.monitor.ok and not self.prefix_errors
        termination_ok = self.quiescent_at is not None and not gaps
        ops: dict[str, int] = {}
        for rec in self.sim.log:
            if rec["ev"] == "op":
                key = rec["kind"] if rec["kind"] != "terminate" else "terminate:" + rec["reason"]
                ops[key] = ops.get(key, 0) + 1
        return {
            "schema": 1,
            "scenario": sc.name,
            "seed": self.seed,
            "verdict": "PASS" if safety_ok and termination_ok else "FAIL",
            "safety": {"ok": safety_ok,
                       "violations": [v.to_json() for v in self.monitor.violations[:20]],
                       "violation_count": len(self.monitor.violations),
                       "prefix_errors": self.prefix_errors[:20],
                       "observations": self.monitor.observations},
            "termination": {"ok": termination_ok, "quiescent_at_ms": self.quiescent_at,
                            "gaps": gaps[:20]},
            "produced": {"files": len(self.paths),
                         "messages": sum(p.messages for p in self.producers),
                         "bytes": sum(len(self._produced(p)) for _, _, p in self.paths)},
            "consumers": len(self.consumers),
            "ops": dict(sorted(ops.items())),
            "faults": self.fault_log,
            "trees": {n: self.fabric.streams[n].tree.to_json() for n in sorted(self.fabric.streams)},
            "metrics": self.metrics.report(sc.stable_window_ms),
            "events": self.sim.events_fired,
            "end_ms": self.sim.now,
        }


def run_scenario(sc: Scenario, seed: int | None = None, trace: bool = False) -> tuple[dict, Run]:
    r = Run(sc, seed, trace)
    return r.execute(), r


def dump_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1) + "\n"
