"""Cluster-local operation scheduling.

Each cluster runs one scheduler process.  It owns the operations for the
hops leaving its cluster: producer notifications (forwarded down the tree)
create a durable and a cache operation per child hop, failures are rescheduled
onto the least-loaded live workers, and a slow reconciliation scan of the local
durable store picks up anything a lost notification or a restart missed.

Nothing here is strongly consistent.  A restarted scheduler has forgotten its
operations, so the ones still running become orphans until the scan schedules
replacements, which then win the duel.  ``double_assign`` forces the same
effect on purpose.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .copy_tree import RATE_LIMITED_LEAF, promote
from .file_layer import read_meta
from .kv_cache import CacheUnavailable
from .transport import CACHE, DURABLE, FINAL_REASONS, OpId, Operation

if TYPE_CHECKING:
    from .cluster import Fabric


@dataclass
class SchedulerConfig:
    reschedule_delay_ms: int = 50
    retry_backoff_ms: int = 100
    admissions_per_tick: int = 256
    imbalance_factor: float = 1.5
    shed_per_tick: int = 2
    balance_period_ms: int = 1000
    reconcile_period_ms: int = 1000


@dataclass
class Assignment:
    op: str
    frm: str | None
    to: str
    epoch: int
    reason: str
    t: int


class Scheduler:
    def __init__(self, fabric: "Fabric", cluster: str, config: SchedulerConfig | None = None):
        self.fabric = fabric
        self.sim = fabric.sim
        self.cluster = cluster
        self.config = config or SchedulerConfig()
        self.proc = self.sim.spawn(f"{cluster}/scheduler", cluster)
        self.proc.on_kill.append(self._forget)
        self.proc.on_restart.append(self._boot)
        self.log: list[Assignment] = []
        self.epochs: dict[OpId, int] = {}
        self._forget()
        self._boot()

    # -- state -----------------------------------------------------------------

    def _forget(self) -> None:
        self.current: dict[OpId, Operation] = {}
        self.extras: dict[OpId, list[Operation]] = {}
        self.ups: dict[OpId, tuple[str, str]] = {}   # op id -> (upstream cluster, stream)
        self.done: set[OpId] = set()
        self.waiting: set[OpId] = set()
        self.queue: deque[tuple[OpId, str]] = deque()
        self.admitted = 0
        self.double_until = -1

    def _boot(self) -> None:
        t = self.fabric.config.transport
        self.sim.every(t.heartbeat_ms, self._tick, owner=self.proc, label=f"sched {self.cluster}")
        self.sim.every(self.config.balance_period_ms, self.balance_tick, owner=self.proc)
        self.sim.every(self.config.reconcile_period_ms, self.reconcile, owner=self.proc,
                       start_ms=0 if self.sim.now > 0 else None)

    def ops(self) -> list[Operation]:
        return [self.current[k] for k in sorted(self.current)]

    # -- notifications -------------------------------------------------------------

    def notify_produced(self, stream: str, path: str) -> None:
        """A file of ``stream`` exists here; make sure every child hop copies it."""
        st = self.fabric.streams.get(stream)
        if st is None or self.cluster not in st.tree.parent:
            return
        for child in st.tree.children(self.cluster):
            for storage in (DURABLE, CACHE):
                self._want(OpId(path, storage, child), stream, "notify")
            sched = self.fabric.clusters[child].scheduler
            if sched is not None:
                self.sim.send(self.fabric.link(self.cluster, child), 64, sched.notify_produced,
                              stream, path, owner=sched.proc)

    def _want(self, op_id: OpId, stream: str, reason: str) -> None:
        if op_id in self.done or op_id in self.waiting:
            return
        cur = self.current.get(op_id)
        if cur is not None and cur.live:
            return
        self.ups[op_id] = (self.cluster, stream)
        self._enqueue(op_id, reason)

    def _enqueue(self, op_id: OpId, reason: str) -> None:
        self.waiting.add(op_id)
        self.queue.append((op_id, reason))
        self._admit()

    def _admit(self) -> None:
        cap = self.config.admissions_per_tick
        while self.queue and self.admitted < cap:
            op_id, reason = self.queue.popleft()
            self.waiting.discard(op_id)
            if op_id in self.done:
                continue
            cur = self.current.get(op_id)
            if cur is not None and cur.live and reason not in ("shed", "worker_died"):
                continue
            if self._create(op_id, reason) is not None:
                self.admitted += 1

    def _create(self, op_id: OpId, reason: str, *, extra: bool = False) -> Operation | None:
        up, stream = self.ups[op_id]
        st = self.fabric.streams[stream]
        if st.tree.parent.get(op_id.cluster) != up:
            return None
        old = self.current.get(op_id)
        reader = self.fabric.clusters[up].least_loaded(
            "reader", exclude=old.reader.id if old is not None and reason == "shed" else None)
        writer = self.fabric.clusters[op_id.cluster].least_loaded(
            "writer", exclude=old.writer.id if old is not None and reason == "shed" else None)
        if reader is None or writer is None:
            self.sim.schedule(self.config.retry_backoff_ms, self._enqueue, op_id, reason,
                              owner=self.proc)
            self.waiting.add(op_id)
            return None
        epoch = self.epochs.get(op_id, 0) + 1
        self.epochs[op_id] = epoch
        op = Operation(self.fabric, op_id, up, reader, writer, scheduler=self, epoch=epoch,
                       rate_limited=st.tree.mode.get(op_id.cluster) == RATE_LIMITED_LEAF)
        frm = None if old is None else old.writer.id
        self.log.append(Assignment(str(op_id), frm, writer.id, epoch, reason, self.sim.now))
        self.sim.record("assign", op=str(op_id), frm=frm, to=writer.id, reader=reader.id,
                        epoch=epoch, reason=reason)
        if extra:
            self.extras.setdefault(op_id, []).append(op)
        else:
            if old is not None and old.live:
                self.extras.setdefault(op_id, []).append(old)
            self.current[op_id] = op
        op.start()
        if not extra and self.sim.now < self.double_until:
            self._create(op_id, "double_assign", extra=True)
        return op

    # -- failures ------------------------------------------------------------------

    def op_ended(self, op: Operation, reason: str) -> None:
        op_id = op.id
        if self.current.get(op_id) is not op:
            lst = self.extras.get(op_id)
            if lst and op in lst and not op.live:
                lst.remove(op)
            return
        if reason == "done":
            self.done.add(op_id)
            self.current.pop(op_id, None)
            self.extras.pop(op_id, None)
            return
        if reason == "cancelled":
            self.current.pop(op_id, None)
            return
        survivors = [o for o in self.extras.get(op_id, []) if o.live]
        if reason in FINAL_REASONS and survivors and not op.live:
            # a duplicate won the duel: adopt it instead of starting another
            self.current[op_id] = survivors[0]
            self.extras[op_id] = survivors[1:]
            return
        self.reschedule_failed(op, reason)

    def reschedule_failed(self, op: Operation, reason: str) -> None:
        if op.id in self.waiting:
            return
        self.waiting.add(op.id)
        self.sim.schedule(self.config.reschedule_delay_ms, self._resubmit, op.id, reason,
                          owner=self.proc)

    def _resubmit(self, op_id: OpId, reason: str) -> None:
        self.waiting.discard(op_id)
        self._enqueue(op_id, reason)

    # -- periodic work ---------------------------------------------------------------

    def _tick(self) -> None:
        self.admitted = 0
        for op in list(self.current.values()):
            op.heartbeat()
            if not op.live and op.id not in self.waiting and op.id not in self.done:
                self.reschedule_failed(op, op.end_reason or "lost")
        for lst in self.extras.values():
            for op in lst:
                op.heartbeat()
        self._admit()
        self._promote_caught_up()

    def _promote_caught_up(self) -> None:
        for name in sorted(self.fabric.streams):
            st = self.fabric.streams[name]
            for child in st.tree.children(self.cluster) if self.cluster in st.tree.parent else []:
                if st.tree.mode.get(child) != RATE_LIMITED_LEAF:
                    continue
                ops = [o for k, o in self.current.items()
                       if k.cluster == child and k.storage == DURABLE and o.live
                       and self.ups[k][1] == name]
                if ops and all(o.caught_up for o in ops):
                    st.tree = promote(st.tree, child)
                    for k, o in self.current.items():
                        if k.cluster == child:
                            o.rate_limited = False
                    self.sim.record("promote", stream=name, cluster=child)

    def reconcile(self) -> None:
        """Scan local files and (re)create operations the tree needs but nobody runs."""
        self._admit()
        for name in sorted(self.fabric.streams):
            st = self.fabric.streams[name]
            children = st.tree.children(self.cluster) if self.cluster in st.tree.parent else []
            # drop operations for hops that left the tree
            for k in sorted(self.current):
                o = self.current[k]
                if self.ups[k][1] == name and st.tree.parent.get(k.cluster) != self.cluster:
                    o.terminate("cancelled")
                    self.current.pop(k, None)
            if not children:
                continue
            local = self.fabric.clusters[self.cluster].durable
            for path in local.listdir(f"/streams/{name}/"):
                for child in children:
                    for storage in (DURABLE, CACHE):
                        k = OpId(path, storage, child)
                        if k in self.done or k in self.waiting:
                            continue
                        cur = self.current.get(k)
                        if cur is not None and cur.live:
                            continue
                        if self._complete(k):
                            self.done.add(k)
                            continue
                        self.ups[k] = (self.cluster, name)
                        self._enqueue(k, "recover" if cur is None else "lost")

    def _complete(self, k: OpId) -> bool:
        down = self.fabric.clusters[k.cluster]
        if k.storage == DURABLE:
            return down.durable.is_sealed(k.path)
        try:
            m = read_meta(down.meta_cache, k.path)
        except CacheUnavailable:
            return False
        return m is not None and m.sealed_len is not None and m.cache_len >= m.sealed_len

    def balance_tick(self) -> list[str]:
        """Shed a few operations from workers well above the mean load; returns shed op names."""
        shed: list[str] = []
        pools: dict[str, list] = {}
        for op in self.ops():
            if op.live:
                pools.setdefault(f"{op.up}:reader", []).append(op)
                pools.setdefault(f"{op.down}:writer", []).append(op)
        budget = self.config.shed_per_tick
        for key in sorted(pools):
            cluster, role = key.split(":")
            workers = [w for w in self.fabric.clusters[cluster].pool(role) if w.alive]
            if len(workers) < 2:
                continue
            mean = sum(w.load() for w in workers) / len(workers)
            for w in workers:
                excess = w.load() - mean * self.config.imbalance_factor
                if excess < 1 or w.load() - mean < 2:
                    continue
                mine = [o for o in pools[key] if (o.reader if role == "reader" else o.writer) is w]
                for o in mine[: min(budget, int(excess))]:
                    if self._create(o.id, "shed") is not None:
                        shed.append(o.name)
                        budget -= 1
                if budget <= 0:
                    return shed
        return shed

    # -- weak consistency on demand -----------------------------------------------------

    def double_assign(self, window_ms: int = 0) -> list[Operation]:
        """Start a second instance of every current operation, and keep doing so for new ones."""
        self.double_until = max(self.double_until, self.sim.now + window_ms)
        made = []
        for k in sorted(self.current):
            if self.current[k].live:
                op = self._create(k, "double_assign", extra=True)
                if op is not None:
                    made.append(op)
        return made
