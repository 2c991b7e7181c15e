"""Chunked files over the two storage layers.

A file is an append-only byte sequence held durably in the cluster's
:class:`~tailcopy.durable_log.DurableLog` and, for the recent tail, as
fixed-size chunks in the data cache.  Every chunk value is a prefix of the
chunk's true bytes: writers always put a chunk from its first byte, so any
bytes a reader gets back from the cache are correct for their positions,
however short the value is.  The durable log covers whatever is missing.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .durable_log import DurableLog, DurableThrottled, WriterHandle
from .kv_cache import CacheInstance, CacheUnavailable, chunk_key, meta_key

CHUNK_SIZE = 4096


@dataclass(frozen=True)
class ChunkGeometry:
    chunk_size: int = CHUNK_SIZE

    def __post_init__(self):
        if self.chunk_size <= 0:
            raise ValueError("chunk_size must be positive")

    def locate(self, pos: int) -> tuple[int, int]:
        return divmod(pos, self.chunk_size)

    def chunk_span(self, offset: int, length: int) -> list[tuple[int, int, int]]:
        """Split ``[offset, offset+length)`` into ``(seq, start, end)`` in-chunk ranges."""
        if offset < 0 or length < 0:
            raise ValueError("offset and length must be non-negative")
        C = self.chunk_size
        out = []
        pos, end = offset, offset + length
        while pos < end:
            seq, off = divmod(pos, C)
            stop = min(C, off + end - pos)
            out.append((seq, off, stop))
            pos += stop - off
        return out


def chunk_span(offset: int, length: int, chunk_size: int = CHUNK_SIZE) -> list[tuple[int, int, int]]:
    return ChunkGeometry(chunk_size).chunk_span(offset, length)


# -- metadata records ---------------------------------------------------------

_META = struct.Struct("<QQQ")


@dataclass(frozen=True)
class FileMeta:
    cache_len: int = 0
    durable_len: int = 0
    # final length once either layer knows the file is sealed, else None
    sealed_len: int | None = None
    from_cache: bool = True

    def encode(self) -> bytes:
        return _META.pack(self.cache_len, self.durable_len,
                          0 if self.sealed_len is None else self.sealed_len + 1)

    @classmethod
    def decode(cls, raw: bytes) -> "FileMeta":
        c, d, s = _META.unpack(raw)
        return cls(c, d, None if s == 0 else s - 1)


def read_meta(meta_cache: CacheInstance, path: str) -> FileMeta | None:
    """Consistent read of a file's record; raises :class:`CacheUnavailable`."""
    res = meta_cache.get_consistent(meta_key(path))
    return FileMeta.decode(res.value.data) if res.value is not None else None


def update_meta(meta_cache: CacheInstance, path: str, *, cache_len: int | None = None,
                durable_len: int | None = None, sealed_len: int | None = None,
                grow_only: bool = False) -> bool:
    """Read-modify-write one or more fields of the record; ``False`` if the cache is unreachable.

    With ``grow_only`` the lengths never move backwards.
    """
    try:
        cur = read_meta(meta_cache, path) or FileMeta()
    except CacheUnavailable:
        return False
    if grow_only:
        cache_len = None if cache_len is None else max(cache_len, cur.cache_len)
        durable_len = None if durable_len is None else max(durable_len, cur.durable_len)
    new = FileMeta(cur.cache_len if cache_len is None else cache_len,
                   cur.durable_len if durable_len is None else durable_len,
                   cur.sealed_len if sealed_len is None else sealed_len)
    if new == cur:
        return True
    return meta_cache.put(meta_key(path), new.encode()) > 0


class LengthPoller:
    """Shared length poller: one consistent bulk read of the metadata cache per cycle.

    Files whose record cannot be read fall back to the durable log's own
    length, refreshed at most every ``durable_poll_ms``.
    """

    def __init__(self, meta_cache: CacheInstance, durable: DurableLog, clock: Callable[[], int],
                 durable_poll_ms: int = 1000):
        self.meta_cache = meta_cache
        self.durable = durable
        self.clock = clock
        self.durable_poll_ms = durable_poll_ms
        self._slow: dict[str, tuple[int, int, bool]] = {}
        self.meta_failures = 0

    def poll_lengths(self, paths: list[str]) -> dict[str, FileMeta]:
        if not paths:
            return {}
        keys = [meta_key(p) for p in paths]
        got = self.meta_cache.bulk_get(keys, "consistent")
        now = self.clock()
        out: dict[str, FileMeta] = {}
        for p, k in zip(paths, keys):
            v = got[k]
            last = self._slow.get(p)
            if last is None or now - last[0] >= self.durable_poll_ms:
                last = (now, self.durable.poll_length(p), self.durable.is_sealed(p))
                self._slow[p] = last
            _, dlen, sealed = last
            if v is not None and not isinstance(v, CacheUnavailable):
                m = FileMeta.decode(v.data)
                if dlen > m.durable_len or (sealed and m.sealed_len is None):
                    m = FileMeta(m.cache_len, max(dlen, m.durable_len),
                                 dlen if sealed and m.sealed_len is None else m.sealed_len)
                out[p] = m
                continue
            if isinstance(v, CacheUnavailable):
                self.meta_failures += 1
            out[p] = FileMeta(0, dlen, dlen if sealed else None, from_cache=False)
        return out


# -- writer side ----------------------------------------------------------------

@dataclass(frozen=True)
class PutRequest:
    seq: int
    data: bytes
    # content length of the chunk once this put lands
    end: int


class ChunkWritePlan:
    """Turns an out-of-order stream of byte ranges into chunk puts.

    Complete chunks are put once, as soon as all their bytes are known.  A
    partial chunk is rewritten from its first byte each time its known prefix
    grows, and puts to one chunk are serialized: a newer put for a chunk is
    held back until the previous one has been acknowledged.  ``pointer`` is the
    publishable cache length: every chunk below it was acknowledged in full,
    and the chunk holding it was acknowledged at least up to it.

    ``prefix_rule`` and ``publish_before_ack`` exist only to inject the two
    classic bugs in tests; leave them at their defaults.
    """

    def __init__(self, chunk_size: int = CHUNK_SIZE, start: int = 0, *, prefix_rule: bool = True,
                 publish_before_ack: bool = False):
        if start % chunk_size:
            raise ValueError("a write plan starts on a chunk boundary")
        self.C = chunk_size
        self.start = start
        self.pointer = start
        self.prefix_rule = prefix_rule
        self.publish_before_ack = publish_before_ack
        self._buf: dict[int, bytearray] = {}
        self._have: dict[int, list[list[int]]] = {}
        self._issued: dict[int, int] = {}
        self._inflight: dict[int, int] = {}
        self._acked: dict[int, int] = {}
        self.failed = False

    def _avail(self, seq: int) -> int:
        iv = self._have.get(seq)
        if not iv or iv[0][0] != 0:
            return 0
        return iv[0][1]

    def _merge(self, seq: int, a: int, b: int) -> None:
        iv = self._have.setdefault(seq, [])
        iv.append([a, b])
        iv.sort()
        merged = [iv[0]]
        for s, e in iv[1:]:
            if s <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], e)
            else:
                merged.append([s, e])
        self._have[seq] = merged

    def _request(self, seq: int) -> PutRequest | None:
        avail = self._avail(seq)
        if avail <= max(self._issued.get(seq, 0), self._acked.get(seq, 0)):
            return None
        if seq in self._inflight:
            return None
        buf = self._buf[seq]
        data = bytes(buf[:avail]) if self.prefix_rule else bytes(buf[self._issued.get(seq, 0):avail])
        self._issued[seq] = avail
        self._inflight[seq] = avail
        return PutRequest(seq, data, avail)

    def add(self, offset: int, data: bytes) -> list[PutRequest]:
        """Record bytes at ``offset``; returns the puts that may be issued now."""
        end = offset + len(data)
        if end <= self.pointer and not self.publish_before_ack:
            return []
        C = self.C
        if offset < self.start:
            data = data[self.start - offset:]
            offset = self.start
        touched = []
        pos = offset
        while pos < end:
            seq, off = divmod(pos, C)
            stop = min(C, off + end - pos)
            if self._acked.get(seq, 0) < C:
                buf = self._buf.get(seq)
                if buf is None:
                    buf = self._buf[seq] = bytearray(C)
                buf[off:stop] = data[pos - offset:pos - offset + stop - off]
                self._merge(seq, off, stop)
                touched.append(seq)
            pos += stop - off
        out = []
        for seq in touched:
            req = self._request(seq)
            if req is not None:
                out.append(req)
        if self.publish_before_ack:
            self._advance(self._avail)
        return out

    def on_ack(self, req: PutRequest, acked: int) -> list[PutRequest]:
        """Record the outcome of ``req``; returns follow-up puts for the same chunk."""
        self._inflight.pop(req.seq, None)
        if acked <= 0:
            self.failed = True
            # let the chunk be retried with whatever is known now
            self._issued[req.seq] = self._acked.get(req.seq, 0)
        else:
            self._acked[req.seq] = max(self._acked.get(req.seq, 0), req.end)
        if not self.publish_before_ack:
            self._advance(lambda s: self._acked.get(s, 0))
        nxt = self._request(req.seq)
        return [nxt] if nxt is not None else []

    def _advance(self, filled: Callable[[int], int]) -> None:
        C = self.C
        p = self.pointer
        while True:
            seq = p // C
            f = filled(seq)
            if f >= C:
                p = (seq + 1) * C
                if not self.publish_before_ack and seq not in self._inflight:
                    self._buf.pop(seq, None)
                    self._have.pop(seq, None)
                continue
            p = max(p, seq * C + f)
            break
        self.pointer = p

    def idle(self) -> bool:
        return not self._inflight and all(self._request_needed(s) is False for s in self._have)

    def _request_needed(self, seq: int) -> bool:
        return self._avail(seq) > max(self._issued.get(seq, 0), self._acked.get(seq, 0))

    def last_partial(self) -> tuple[int, int] | None:
        for seq in sorted(self._have, reverse=True):
            a = self._avail(seq)
            if 0 < a < self.C:
                return (seq, a)
        return None


@dataclass
class WriterState:
    """Producer-side state for shadowing a durable file into the data cache."""

    path: str
    handle: WriterHandle | None
    plan: ChunkWritePlan
    written: int = 0

    @property
    def last_partial(self) -> tuple[int, int] | None:
        return self.plan.last_partial()


def shadow_write(ws: WriterState, new_bytes: bytes) -> list[PutRequest]:
    """Chunk puts for ``new_bytes`` that were just appended durably at ``ws.written``."""
    reqs = ws.plan.add(ws.written, new_bytes)
    ws.written += len(new_bytes)
    return reqs


# -- reader side ----------------------------------------------------------------

@dataclass
class ReadStats:
    relaxed: int = 0
    hedged: int = 0
    consistent: int = 0
    cache_bytes: int = 0
    durable_reads: int = 0
    durable_bytes: int = 0
    failures: int = 0

    def add(self, other: "ReadStats") -> None:
        for f in ("relaxed", "hedged", "consistent", "cache_bytes", "durable_reads",
                  "durable_bytes", "failures"):
            setattr(self, f, getattr(self, f) + getattr(other, f))


@dataclass
class ReadOutcome:
    data: bytes
    latency_ms: int
    stats: ReadStats


_ANSWERED = ("hit", "miss", "migrating")


@dataclass
class ReadConfig:
    hedge_delay_ms: int = 30
    deadline_ms: int = 100


def read_range_cached(cache: CacheInstance, durable: DurableLog | None, path: str, offset: int,
                      length: int, geometry: ChunkGeometry = ChunkGeometry(),
                      config: ReadConfig = ReadConfig(), *, escalate: bool = True,
                      durable_limit: int | None = None) -> ReadOutcome:
    """Read ``[offset, offset+length)`` preferring the data cache.

    Per chunk: a relaxed read, hedged to a second replica when the first has
    not answered after ``hedge_delay_ms``; a consistent read when the value is
    shorter than the bytes needed; and, for chunks still missing, one durable
    read spanning all of them.  Chunk reads run in parallel, so the latency is
    the slowest chunk plus the durable read if one was needed.  Returns the
    contiguous prefix that could be assembled, which may be short.
    """
    stats = ReadStats()
    if length <= 0:
        return ReadOutcome(b"", 0, stats)
    C = geometry.chunk_size
    hedge = config.hedge_delay_ms
    deadline = config.deadline_ms
    pieces: list[bytes | None] = []
    spans = geometry.chunk_span(offset, length)
    slowest = 0.0
    for seq, a, b in spans:
        key = chunk_key(path, seq)
        r1 = cache.get_relaxed(key)
        stats.relaxed += 1
        answers = [(r1.latency_ms, r1)] if r1.status in _ANSWERED else []
        give_up = min(r1.latency_ms, deadline)
        if r1.latency_ms > hedge:
            stats.hedged += 1
            r2 = cache.get_relaxed(key, exclude=(r1.replica,) if r1.replica else ())
            if r2.status in _ANSWERED:
                answers.append((hedge + r2.latency_ms, r2))
            give_up = max(give_up, hedge + min(r2.latency_ms, deadline))
        if answers:
            t, res = min(answers, key=lambda a: a[0])
        else:
            t, res = give_up, None
        ok = res is not None and res.value is not None and len(res.value.data) >= b
        if not ok and escalate:
            stats.consistent += 1
            try:
                c = cache.get_consistent(key)
                t += c.latency_ms
                if c.value is not None and len(c.value.data) >= b:
                    res, ok = c, True
            except CacheUnavailable as e:
                t += e.latency_ms
                stats.failures += 1
        slowest = max(slowest, t)
        if ok:
            piece = res.value.data[a:b]
            stats.cache_bytes += len(piece)
            pieces.append(piece)
        else:
            pieces.append(None)
    latency = slowest
    missing = [i for i, p in enumerate(pieces) if p is None]
    if missing and durable is not None:
        first, last = spans[missing[0]], spans[missing[-1]]
        lo = first[0] * C + first[1]
        hi = last[0] * C + last[2]
        if durable_limit is not None:
            hi = min(hi, durable_limit)
        if hi > lo:
            try:
                blob = durable.read(path, lo, hi - lo)
                stats.durable_reads += 1
                stats.durable_bytes += len(blob)
                latency += durable.config.read_ms
                for i in missing:
                    seq, a, b = spans[i]
                    s = seq * C + a - lo
                    part = blob[s:s + b - a]
                    if part:
                        pieces[i] = part
            except DurableThrottled as e:
                stats.failures += 1
                latency += e.retry_after_ms
    out = bytearray()
    for (seq, a, b), p in zip(spans, pieces):
        if p is None:
            break
        out += p
        if len(p) < b - a:
            break
    return ReadOutcome(bytes(out), int(latency), stats)


# -- delayed durable reads ----------------------------------------------------------

@dataclass
class DelayedReadState:
    max_delay_ms: int = 1000
    size_record: deque = field(default_factory=deque)


def should_read_from_durable(st: DelayedReadState, cache_size: int, durable_size: int,
                             now: int) -> bool:
    rec = st.size_record
    rec.append((now, durable_size))
    while rec:
        if rec[0][1] > cache_size:
            break
        rec.popleft()
    if not rec:
        return False
    if now > rec[0][0] + st.max_delay_ms:
        rec.clear()
        return True
    return False


# -- message framing ------------------------------------------------------------------

_INDEX = struct.Struct("<QIQQ")
INDEX_RECORD_SIZE = _INDEX.size


@dataclass(frozen=True)
class IndexRecord:
    data_offset: int
    data_len: int
    produce_time_ms: int
    seq: int

    def encode(self) -> bytes:
        return _INDEX.pack(self.data_offset, self.data_len, self.produce_time_ms, self.seq)

    @classmethod
    def decode(cls, raw: bytes) -> "IndexRecord":
        return cls(*_INDEX.unpack(raw))


def shard_dir(stream: str, shard: int) -> str:
    return f"/streams/{stream}/{shard:04d}/"


def data_path(stream: str, shard: int, created_ms: int) -> str:
    return f"{shard_dir(stream, shard)}{created_ms:012d}.data"


def index_path(data: str) -> str:
    return data[: -len(".data")] + ".index"


# -- consumers ------------------------------------------------------------------------

class DeliveryViolation(Exception):
    """Consumed bytes disagree with the framing they claim to follow."""


@dataclass
class Storage:
    """The storage a consumer reads: usually its own cluster's, or a neighbour's when rerouted."""

    cluster: str
    data_cache: CacheInstance
    durable: DurableLog
    poller: LengthPoller
    extra_latency_ms: int = 0


@dataclass
class TailCursor:
    path: str
    pos: int = 0
    delay: DelayedReadState = field(default_factory=DelayedReadState)

    def read(self, storage: Storage, meta: FileMeta, want: int, now: int, geometry: ChunkGeometry,
             config: ReadConfig, stats: ReadStats) -> tuple[bytes, int]:
        """Read up to ``want`` new bytes, preferring the cache unless it has fallen behind."""
        if want <= 0:
            return b"", 0
        cache_len, durable_len = meta.cache_len, meta.durable_len
        if cache_len <= self.pos and durable_len <= self.pos:
            return b"", 0
        to_durable = should_read_from_durable(self.delay, cache_len, durable_len, now)
        if cache_len > self.pos and not to_durable:
            n = min(want, cache_len - self.pos)
            got = read_range_cached(storage.data_cache, storage.durable, self.path, self.pos, n,
                                    geometry, config, durable_limit=durable_len)
            stats.add(got.stats)
            return got.data, got.latency_ms
        if to_durable and durable_len > self.pos:
            n = min(want, durable_len - self.pos)
            try:
                blob = storage.durable.read(self.path, self.pos, n)
            except DurableThrottled as e:
                stats.failures += 1
                return b"", e.retry_after_ms
            stats.durable_reads += 1
            stats.durable_bytes += len(blob)
            return blob, storage.durable.config.read_ms
        return b"", 0


@dataclass
class ShardCursor:
    stream: str
    shard: int
    data: TailCursor | None = None
    index: TailCursor | None = None
    index_buf: bytearray = field(default_factory=bytearray)
    pending: deque = field(default_factory=deque)
    next_seq: int = 0
    files_done: int = 0

    def paths(self) -> list[str]:
        return [] if self.data is None else [self.index.path, self.data.path]


@dataclass
class Delivered:
    stream: str
    shard: int
    record: IndexRecord
    payload: bytes


@dataclass
class ConsumerStep:
    messages: list[Delivered]
    latency_ms: int
    stats: ReadStats
    # (path, offset, bytes) appended this step, for correctness monitors
    appended: list[tuple[str, int, bytes]]


@dataclass
class ConsumerConfig:
    poll_ms: int = 100
    rate_cap_bps: float = float("inf")
    max_bytes_per_poll: int = 1 << 20
    start_at_head: bool = False


class Consumer:
    """Reads message shards in order: index file first, then the data it points at."""

    def __init__(self, cid: str, storage: Storage, shards: list[tuple[str, int]],
                 geometry: ChunkGeometry = ChunkGeometry(), config: ConsumerConfig | None = None,
                 read_config: ReadConfig = ReadConfig()):
        self.id = cid
        self.storage = storage
        self.geometry = geometry
        self.config = config or ConsumerConfig()
        self.read_config = read_config
        self.cursors = [ShardCursor(s, k) for s, k in shards]
        self.tokens = 0.0
        self.last_refill: int | None = None
        self.data_bufs: dict[str, bytearray] = {}

    def _open_next(self, cur: ShardCursor) -> bool:
        files = [p for p in self.storage.durable.listdir(shard_dir(cur.stream, cur.shard))
                 if p.endswith(".data")]
        done = cur.data.path if cur.data is not None else None
        for p in files:
            if done is None or p > done:
                cur.data = TailCursor(p)
                cur.index = TailCursor(index_path(p))
                cur.index_buf = bytearray()
                cur.next_seq = 0
                self.data_bufs[p] = bytearray()
                return True
        return False

    def _budget(self, now: int) -> int:
        cap = self.config.rate_cap_bps
        if cap == float("inf"):
            return self.config.max_bytes_per_poll
        if self.last_refill is None:
            self.last_refill = now
            self.tokens = cap / 8 * self.config.poll_ms / 1000
        self.tokens = min(self.tokens + cap / 8 * (now - self.last_refill) / 1000, cap / 8)
        self.last_refill = now
        return int(min(self.tokens, self.config.max_bytes_per_poll))

    def consumer_next(self, now: int) -> ConsumerStep:
        stats = ReadStats()
        appended: list[tuple[str, int, bytes]] = []
        messages: list[Delivered] = []
        latency = 0
        for cur in self.cursors:
            if cur.data is None and not self._open_next(cur):
                continue
        paths = [p for cur in self.cursors for p in cur.paths()]
        if not paths:
            return ConsumerStep(messages, 0, stats, appended)
        metas = self.storage.poller.poll_lengths(paths)
        budget = self._budget(now)
        spent = 0
        for cur in self.cursors:
            if cur.data is None:
                continue
            lat, used = self._step_shard(cur, metas, budget - spent, now, stats, appended, messages)
            spent += used
            latency = max(latency, lat)
        if self.config.rate_cap_bps != float("inf"):
            self.tokens -= spent
        latency += self.storage.extra_latency_ms if (spent or latency) else 0
        return ConsumerStep(messages, latency, stats, appended)

    def _step_shard(self, cur: ShardCursor, metas: dict[str, FileMeta], budget: int, now: int,
                    stats: ReadStats, appended: list, messages: list) -> tuple[int, int]:
        g, rc, st = self.geometry, self.read_config, self.storage
        imeta, dmeta = metas[cur.index.path], metas[cur.data.path]
        latency = 0
        used = 0
        ipos = cur.index.pos
        blob, lat = cur.index.read(st, imeta, budget, now, g, rc, stats)
        if blob:
            appended.append((cur.index.path, ipos, blob))
            cur.index.pos += len(blob)
            cur.index_buf += blob
            used += len(blob)
            n = len(cur.index_buf) // INDEX_RECORD_SIZE
            for i in range(n):
                rec = IndexRecord.decode(bytes(cur.index_buf[i * INDEX_RECORD_SIZE:(i + 1) * INDEX_RECORD_SIZE]))
                if rec.seq != cur.next_seq:
                    raise DeliveryViolation(f"{cur.index.path}: record seq {rec.seq}, expected {cur.next_seq}")
                expect_off = cur.pending[-1].data_offset + cur.pending[-1].data_len if cur.pending else None
                if expect_off is not None and rec.data_offset != expect_off:
                    raise DeliveryViolation(f"{cur.index.path}: record {rec.seq} at {rec.data_offset}, expected {expect_off}")
                cur.pending.append(rec)
                cur.next_seq += 1
            del cur.index_buf[: n * INDEX_RECORD_SIZE]
        latency = max(latency, lat)
        if cur.pending:
            need_end = cur.pending[-1].data_offset + cur.pending[-1].data_len
            dpos = cur.data.pos
            want = min(budget - used, need_end - dpos)
            blob, lat = cur.data.read(st, dmeta, want, now, g, rc, stats)
            latency = max(latency, lat)
            if blob:
                appended.append((cur.data.path, dpos, blob))
                buf = self.data_bufs[cur.data.path]
                buf += blob
                cur.data.pos += len(blob)
                used += len(blob)
            buf = self.data_bufs[cur.data.path]
            base = cur.data.pos - len(buf)
            while cur.pending:
                rec = cur.pending[0]
                end = rec.data_offset + rec.data_len
                if end > cur.data.pos:
                    break
                if rec.data_offset != base:
                    raise DeliveryViolation(f"{cur.data.path}: message {rec.seq} at {rec.data_offset}, expected {base}")
                payload = bytes(buf[: rec.data_len])
                del buf[: rec.data_len]
                base = end
                cur.pending.popleft()
                messages.append(Delivered(cur.stream, cur.shard, rec, payload))
        if (imeta.sealed_len is not None and cur.index.pos >= imeta.sealed_len and not cur.pending
                and not cur.index_buf and dmeta.sealed_len is not None
                and cur.data.pos >= dmeta.sealed_len):
            cur.files_done += 1
            self.data_bufs.pop(cur.data.path, None)
            self._open_next(cur)
        return latency, used
