"""Per-hop copy operations.

An :class:`Operation` copies one file across one hop of a copy tree into one
storage layer of the downstream cluster.  It has two halves: a reader living on
a reader worker of the upstream cluster and a writer on a writer worker of the
downstream cluster.  The halves talk over the simulated links between the two
clusters; the reader is driven by its worker's shared length poller, the writer
by its own lock-check tick.

Durable operations append strictly in order through a fresh writer handle, so
a newer operation for the same file supersedes an older one through handle
epochs.  Cache operations write chunks in parallel through a
:class:`~tailcopy.file_layer.ChunkWritePlan` and take a poisonable lock in the
downstream metadata cache; a new operation poisons the current holder, which
steps down on its next lock check.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .cluster import Cluster, Fabric, Worker
from .durable_log import StaleHandle, WriterHandle
from .file_layer import (ChunkWritePlan, FileMeta, read_meta, read_range_cached, update_meta)
from .kv_cache import CacheUnavailable, chunk_key, lock_key

if TYPE_CHECKING:
    from .scheduler import Scheduler

__all__ = ["DURABLE", "CACHE", "OpId", "Operation", "ChunkWritePlan", "duel",
           "resync_cache_stream", "orphan_tick"]

DURABLE = "durable"
CACHE = "cache"

STARTING = "starting"
RUNNING = "running"
ORPHANED = "orphaned"
TERMINATED = "terminated"

# reasons after which the scheduler does not replace the operation
FINAL_REASONS = ("done", "poisoned", "superseded", "cancelled")


@dataclass(frozen=True, order=True)
class OpId:
    """Target file, storage layer and the cluster the target file lives in."""

    path: str
    storage: str
    cluster: str

    def __str__(self) -> str:
        return f"{self.storage}:{self.cluster}:{self.path}"


class Operation:
    def __init__(self, fabric: Fabric, op_id: OpId, up: str, reader: Worker, writer: Worker, *,
                 scheduler: "Scheduler | None" = None, epoch: int = 0, rate_limited: bool = False,
                 prefix_rule: bool = True, publish_before_ack: bool = False):
        if op_id.storage not in (DURABLE, CACHE):
            raise ValueError(f"unknown storage {op_id.storage!r}")
        self.fabric = fabric
        self.sim = fabric.sim
        self.id = op_id
        self.path = op_id.path
        self.storage = op_id.storage
        self.up = up
        self.down = op_id.cluster
        self.reader = reader
        self.writer = writer
        self.scheduler = scheduler
        self.epoch = epoch
        self.rate_limited = rate_limited
        self.uid = fabric.nonce()
        self.signature = (writer.id, self.uid)
        self.name = f"{op_id}#{self.uid}"
        self.state = STARTING
        self.end_reason: str | None = None
        self.prefix_rule = prefix_rule
        self.publish_before_ack = publish_before_ack
        cfg = fabric.config.transport
        self.silence_ms = cfg.silence_polls * max(cfg.reader_poll_ms, cfg.lock_check_ms)
        now = self.sim.now
        self.last_reader_tick = now
        self.last_writer_tick = now
        self.last_heartbeat = now
        self.created_at = now
        # reader half
        self.started = False
        self.sent = 0              # durable: next byte to read
        self.requested = 0         # cache: next byte to read
        self.reading = False
        self.outstanding = 0
        self.retry: deque[tuple[int, int]] = deque()
        self.fin_sent = False
        self.upstream_seen = 0
        self._seen: deque[tuple[int, int]] = deque()
        self.caught_up = False
        # writer half
        self.handle: WriterHandle | None = None
        self.appended = 0
        self.queue: deque[tuple[int, bytes]] = deque()
        self.appending = False
        self.final: int | None = None
        self.plan: ChunkWritePlan | None = None
        self.plan_gen = 0
        self.published = 0
        self.lock_state = "none"
        self.conflict_since: int | None = None

    # -- plumbing -------------------------------------------------------------

    @property
    def up_cluster(self) -> Cluster:
        return self.fabric.clusters[self.up]

    @property
    def down_cluster(self) -> Cluster:
        return self.fabric.clusters[self.down]

    @property
    def live(self) -> bool:
        return self.state != TERMINATED

    def _log(self, kind: str, **fields) -> None:
        self.sim.record("op", kind=kind, op=self.name, hop=f"{self.up}->{self.down}", **fields)

    def _to_writer(self, nbytes: int, fn, *args) -> bool:
        link = self.fabric.link(self.up, self.down)
        overhead = self.fabric.config.transport.message_overhead_bytes
        if self.sim.send(link, nbytes + overhead, fn, *args, owner=self.writer.proc) is None:
            self.terminate("stream_break")
            return False
        return True

    def _to_reader(self, fn, *args) -> bool:
        link = self.fabric.link(self.down, self.up)
        overhead = self.fabric.config.transport.message_overhead_bytes
        if self.sim.send(link, overhead, fn, *args, owner=self.reader.proc) is None:
            self.terminate("stream_break")
            return False
        return True

    def _note_upstream(self, length: int) -> None:
        if length > self.upstream_seen:
            self.upstream_seen = length
            self._seen.append((length, self.sim.now))

    def _delivered(self, length: int) -> None:
        m = self.fabric.metrics
        while self._seen and self._seen[0][0] <= length:
            _, t = self._seen.popleft()
            m.hop_delay(self.up, self.down, self.storage, self.sim.now - t)

    def _budget(self) -> int:
        cfg = self.fabric.config.transport
        if not self.rate_limited:
            return cfg.max_delta_bytes
        per_poll = int(cfg.rate_limited_leaf_bps / 8 * cfg.reader_poll_ms / 1000)
        return max(1, min(cfg.max_delta_bytes, per_poll))

    # -- lifecycle ----------------------------------------------------------------

    def start(self) -> None:
        """Register both halves and begin the handshake from the writer side."""
        self.reader.ops[self.uid] = self
        self.writer.ops[self.uid] = self
        self._log("schedule", reader=self.reader.id, writer=self.writer.id, epoch=self.epoch)
        cfg = self.fabric.config.transport
        self.sim.every(cfg.lock_check_ms, self._writer_tick, owner=self.writer.proc,
                       label=f"tick {self.name}")
        if self.storage == DURABLE:
            self.sim.schedule(self.fabric.config.durable.open_cost_ms, self._open_durable,
                              owner=self.writer.proc)
        else:
            self.sim.schedule(0, self._try_acquire, owner=self.writer.proc)

    def heartbeat(self) -> None:
        self.last_heartbeat = self.sim.now

    def terminate(self, reason: str, release: bool = True) -> None:
        if self.state == TERMINATED:
            return
        self.state = TERMINATED
        self.end_reason = reason
        self.reader.ops.pop(self.uid, None)
        self.writer.ops.pop(self.uid, None)
        if (self.storage == CACHE and release and self.lock_state == "held"
                and self.writer.alive):
            self.down_cluster.meta_cache.release_lock(lock_key(self.path), self.signature)
        self._log("terminate", reason=reason)
        self._notify(reason)

    def _notify(self, reason: str) -> None:
        s = self.scheduler
        if s is not None and s.proc.alive:
            self.sim.schedule(0, s.op_ended, self, reason, owner=s.proc)

    def half_died(self, role: str) -> None:
        """Called when the worker running one half is killed."""
        if self.state == TERMINATED:
            return
        self._log("half_died", role=role)
        # the survivor notices through silence; the scheduler hears about it now
        self._notify("worker_died")

    # -- reader half ----------------------------------------------------------

    def reader_on_start(self, pos: int) -> None:
        if self.state == TERMINATED:
            return
        self.started = True
        self.sent = self.requested = pos
        if self.state == STARTING:
            self.state = RUNNING

    def reader_step(self, meta: FileMeta) -> None:
        if self.state == TERMINATED:
            return
        now = self.sim.now
        self.last_reader_tick = now
        if now - self.last_writer_tick > self.silence_ms:
            self.terminate("silence", release=False)
            return
        if not self.started or self.fin_sent:
            return
        if self.storage == DURABLE:
            self._note_upstream(meta.durable_len)
            self._durable_step(meta)
        elif meta.from_cache:
            self._note_upstream(meta.cache_len)
            self._cache_step(meta)

    def _durable_step(self, meta: FileMeta) -> None:
        target = meta.durable_len
        self.caught_up = target - self.appended < self.fabric.config.geometry.chunk_size
        if self.reading:
            return
        if self.sent < target:
            n = min(target - self.sent, self._budget())
            up = self.up_cluster
            out = read_range_cached(up.data_cache, up.durable, self.path, self.sent, n,
                                    self.fabric.config.geometry, self.fabric.config.read,
                                    escalate=False, durable_limit=target)
            self.fabric.metrics.reader_read(self.up, DURABLE, out.stats)
            if not out.data:
                return
            self.reading = True
            self.sim.schedule(out.latency_ms, self._durable_sent, self.sent, out.data,
                              owner=self.reader.proc)
            self.sent += len(out.data)
        elif meta.sealed_len is not None and self.sent >= meta.sealed_len:
            self.fin_sent = True
            self._to_writer(0, self.writer_on_fin, meta.sealed_len)

    def _durable_sent(self, offset: int, data: bytes) -> None:
        self.reading = False
        if self.state != TERMINATED:
            self._to_writer(len(data), self.writer_on_delta, offset, data)

    def _cache_step(self, meta: FileMeta) -> None:
        target = meta.cache_len
        C = self.fabric.config.geometry.chunk_size
        if target - self.requested > self.fabric.config.transport.resync_lag_bytes:
            pos = min(target, meta.durable_len) // C * C
            if pos > self.requested:
                self._reader_resync(pos)
        budget = self._budget()
        while self.retry and budget > 0:
            off, n = self.retry.popleft()
            take = min(n, budget)
            self._issue_read(off, take, meta.durable_len)
            if take < n:
                self.retry.appendleft((off + take, n - take))
            budget -= take
        if target > self.requested and budget > 0:
            n = min(target - self.requested, budget)
            self._issue_read(self.requested, n, meta.durable_len)
            self.requested += n
        if (meta.sealed_len is not None and self.requested >= meta.sealed_len
                and not self.outstanding and not self.retry):
            self.fin_sent = True
            self._to_writer(0, self.writer_on_fin, meta.sealed_len)

    def _issue_read(self, off: int, n: int, durable_len: int) -> None:
        up = self.up_cluster
        out = read_range_cached(up.data_cache, up.durable, self.path, off, n,
                                self.fabric.config.geometry, self.fabric.config.read,
                                durable_limit=durable_len)
        self.fabric.metrics.reader_read(self.up, CACHE, out.stats)
        self.outstanding += 1
        self.sim.schedule(out.latency_ms, self._cache_read_done, off, n, out.data,
                          owner=self.reader.proc)

    def _cache_read_done(self, off: int, n: int, data: bytes) -> None:
        self.outstanding -= 1
        if self.state == TERMINATED:
            return
        if len(data) < n:
            self.retry.append((off + len(data), n - len(data)))
        if data:
            self._to_writer(len(data), self.writer_on_delta, off, data)

    def _reader_resync(self, pos: int) -> None:
        self._log("resync", frm=self.requested, to=pos)
        self.requested = pos
        self.retry.clear()
        self._to_writer(0, self.writer_on_resync, pos)

    # -- writer half ----------------------------------------------------------

    def _open_durable(self) -> None:
        if self.state == TERMINATED:
            return
        d = self.down_cluster.durable
        if d.is_sealed(self.path):
            self.terminate("done")
            return
        self.handle = d.open_writer(self.path)
        self.appended = d.poll_length(self.path)
        self._log("acquire", epoch=self.handle.epoch, start=self.appended)
        self._to_reader(self.reader_on_start, self.appended)

    def _try_acquire(self) -> None:
        if self.state == TERMINATED or self.lock_state not in ("none", "acquiring"):
            return
        cfg = self.fabric.config.transport
        meta = self.down_cluster.meta_cache
        lk = lock_key(self.path)
        if not cfg.locks_enabled:
            self.lock_state = "lockless"
            self._cache_begin()
            return
        ok, cur = meta.acquire_lock(lk, self.signature)
        if ok:
            self.lock_state = "held"
            self._log("acquire", lock="free" if cur is not None else "unreachable")
            self._cache_begin()
            return
        self.lock_state = "acquiring"
        now = self.sim.now
        if self.conflict_since is None:
            self.conflict_since = now
            meta.poison_lock(lk)
            self._log("poison", holder=f"{cur.owner}#{cur.nonce}")
        elif now - self.conflict_since >= cfg.seize_delay_ms:
            meta.seize_lock(lk, self.signature)
            self.lock_state = "held"
            self._log("seize", holder=f"{cur.owner}#{cur.nonce}")
            self._cache_begin()

    def _cache_begin(self) -> None:
        down = self.down_cluster
        C = self.fabric.config.geometry.chunk_size
        try:
            m = read_meta(down.meta_cache, self.path) or FileMeta()
        except CacheUnavailable:
            m = FileMeta()
        if m.sealed_len is not None and m.cache_len >= m.sealed_len:
            self.terminate("done")
            return
        start = max(m.cache_len, down.durable.poll_length(self.path)) // C * C
        self._new_plan(start)
        self.published = m.cache_len
        self._publish()
        self._to_reader(self.reader_on_start, start)

    def _new_plan(self, start: int) -> None:
        self.plan = ChunkWritePlan(self.fabric.config.geometry.chunk_size, start,
                                   prefix_rule=self.prefix_rule,
                                   publish_before_ack=self.publish_before_ack)
        self.plan_gen += 1

    def writer_on_delta(self, offset: int, data: bytes) -> None:
        if self.state == TERMINATED:
            return
        if self.storage == DURABLE:
            self.queue.append((offset, data))
            if not self.appending:
                self._append_next()
            return
        if self.plan is None:
            return
        for req in self.plan.add(offset, data):
            self._issue_put(req)
        if self.publish_before_ack:
            self._publish()

    def writer_on_fin(self, final: int) -> None:
        if self.state == TERMINATED:
            return
        self.final = final
        if self.storage == DURABLE:
            if not self.appending:
                self._maybe_seal()
        else:
            self._publish()

    def writer_on_resync(self, pos: int) -> None:
        if self.state == TERMINATED or self.plan is None or pos <= self.plan.pointer:
            return
        self._new_plan(pos)
        self._publish()

    # durable path: one append at a time, in offset order

    def _append_next(self) -> None:
        if not self.queue:
            self.appending = False
            self._maybe_seal()
            return
        self.appending = True
        off, data = self.queue.popleft()
        self.sim.schedule(self.fabric.config.durable.append_ms, self._do_append, off, data,
                          owner=self.writer.proc)

    def _do_append(self, off: int, data: bytes) -> None:
        if self.state == TERMINATED:
            return
        if off > self.appended:
            self.terminate("gap")
            return
        skip = self.appended - off
        if skip < len(data):
            down = self.down_cluster
            try:
                self.appended = down.durable.append(self.handle, data[skip:])
            except StaleHandle:
                self.terminate("superseded")
                return
            update_meta(down.meta_cache, self.path, durable_len=self.appended, grow_only=True)
            self._delivered(self.appended)
        self._append_next()

    def _maybe_seal(self) -> None:
        if self.state == TERMINATED or self.final is None or self.appended < self.final:
            return
        down = self.down_cluster
        try:
            down.durable.seal(self.handle)
        except StaleHandle:
            self.terminate("superseded")
            return
        update_meta(down.meta_cache, self.path, durable_len=self.final, sealed_len=self.final,
                    grow_only=True)
        self.terminate("done")

    # cache path: parallel puts, pointer published after acks

    def _issue_put(self, req) -> None:
        cache = self.down_cluster.data_cache
        jitter = self.fabric.config.transport.cache_write_jitter_ms
        delay = cache.write_ms + (self.sim.rng.randint(0, jitter) if jitter else 0)
        self.sim.schedule(delay, self._put_done, req, self.plan_gen, self.sim.now,
                          owner=self.writer.proc)

    def _put_done(self, req, gen: int, issued_at: int) -> None:
        # a put already on the wire lands even if the operation has since stopped
        acked = self.down_cluster.data_cache.put(chunk_key(self.path, req.seq), req.data)
        self.fabric.metrics.write_latency(self.down, self.sim.now - issued_at)
        if self.state == TERMINATED or gen != self.plan_gen:
            return
        follow = self.plan.on_ack(req, acked)
        if acked == 0:
            cache = self.down_cluster.data_cache
            if not cache.live_replicas(chunk_key(self.path, req.seq)):
                self.terminate("cache_unavailable")
                return
            # throttled, not down: try again after the backoff
            for f in follow:
                self.sim.schedule(cache.throttle_delay_ms, self._issue_put, f,
                                  owner=self.writer.proc)
            return
        for f in follow:
            self._issue_put(f)
        self._publish()

    def _publish(self) -> None:
        if self.state == TERMINATED or self.plan is None:
            return
        p = self.plan.pointer
        meta = self.down_cluster.meta_cache
        if p > self.published:
            if update_meta(meta, self.path, cache_len=p, grow_only=True):
                self.published = p
                self._delivered(p)
        if (self.final is not None and self.published >= self.final and self.plan.idle()):
            update_meta(meta, self.path, sealed_len=self.final)
            self.terminate("done")

    def _writer_tick(self):
        if self.state == TERMINATED:
            return False
        now = self.sim.now
        self.last_writer_tick = now
        if now - self.last_reader_tick > self.silence_ms:
            self.terminate("silence")
            return False
        orphan_tick(self)
        if self.storage == CACHE:
            if self.lock_state == "acquiring":
                self._try_acquire()
            elif self.lock_state == "held":
                st = self.down_cluster.meta_cache.check_lock(lock_key(self.path), self.signature)
                if st in ("poisoned", "other"):
                    self.terminate("poisoned")
                    return False
                if st == "absent":
                    self.down_cluster.meta_cache.acquire_lock(lock_key(self.path), self.signature)
            self._publish()
        return self.state != TERMINATED


def orphan_tick(op: Operation) -> str:
    """Mark ``op`` orphaned once its scheduler has gone quiet; it keeps streaming either way."""
    limit = op.fabric.config.transport.orphan_after_ms
    if op.state == RUNNING and op.sim.now - op.last_heartbeat > limit:
        op.state = ORPHANED
        op._log("orphaned")
    return op.state


def duel(op_new: Operation, op_old: Operation) -> Operation:
    """Start ``op_new`` against a live ``op_old`` for the same target; the lock picks the survivor."""
    if op_new.id != op_old.id:
        raise ValueError("a duel needs two operations for the same target")
    if op_new.state == STARTING and op_new.uid not in op_new.writer.ops:
        op_new.start()
    return op_new


def resync_cache_stream(op: Operation, durable_len: int) -> int:
    """Jump a cache operation's stream to the chunk holding ``durable_len``; returns the new position."""
    if op.storage != CACHE:
        raise ValueError("only cache operations resynchronize")
    C = op.fabric.config.geometry.chunk_size
    pos = durable_len // C * C
    if op.started and pos > op.requested:
        op._reader_resync(pos)
    return op.requested
