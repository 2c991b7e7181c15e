"""Replicated in-memory key-value cache.

One :class:`CacheInstance` per cluster role (data chunks, file metadata).
Keys are placed on ``n_replicas`` members of a consistent-hash ring.  Writes
go to every replica of the key; reads come in two flavours:

* relaxed: one random replica, possibly stale or short,
* consistent: the highest version among ``read_quorum`` responders.

The cache executes no logic on behalf of clients.  Locks are ordinary
records manipulated client-side, so they are best-effort by construction.
"""

from __future__ import annotations

import bisect
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

INF = math.inf


def _digest(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "big")


def chunk_key(path: str, seq: int) -> int:
    return _digest(f"{path}\x00{seq}")


def meta_key(path: str) -> int:
    return _digest(f"{path}\x00meta")


def lock_key(path: str) -> int:
    return _digest(f"{path}\x00lock")


class CacheUnavailable(Exception):
    """Fewer than ``read_quorum`` replicas answered for a key."""

    def __init__(self, key: int, responders: int, latency_ms: float = 0):
        super().__init__(f"key {key:#x}: {responders} responders")
        self.key = key
        self.latency_ms = latency_ms


@dataclass(frozen=True)
class VersionedValue:
    data: bytes
    version: int
    written_at: int


@dataclass
class ReplicationConfig:
    n_replicas: int = 3
    write_quorum: int = 3
    read_quorum: int = 2

    def __post_init__(self):
        if not 1 <= self.read_quorum <= self.n_replicas:
            raise ValueError("read_quorum must be in [1, n_replicas]")


@dataclass
class CacheReplicaConfig:
    capacity_bytes: int = 1 << 30
    gc_start_fraction: float = 0.80
    ttl_ms: int = 60_000
    max_qps: float = INF
    max_bps: float = INF

    def __post_init__(self):
        if not 0 < self.gc_start_fraction <= 1:
            raise ValueError("gc_start_fraction must be in (0, 1]")


DATA_CACHE_TTL_MS = 60_000
META_CACHE_TTL_MS = 86_400_000


@dataclass
class Read:
    """Outcome of one replica read: ``status`` is hit, miss, down, throttled or migrating."""

    status: str
    value: VersionedValue | None
    replica: str | None
    latency_ms: float


@dataclass
class LockRecord:
    owner: str
    nonce: int
    poisoned: bool = False
    acquired_at: int = 0

    @property
    def signature(self) -> tuple[str, int]:
        return (self.owner, self.nonce)

    def encode(self) -> bytes:
        return f"{self.owner}|{self.nonce}|{int(self.poisoned)}|{self.acquired_at}".encode()

    @classmethod
    def decode(cls, raw: bytes) -> "LockRecord":
        owner, nonce, poisoned, at = raw.decode().rsplit("|", 3)
        return cls(owner, int(nonce), poisoned == "1", int(at))


@dataclass
class CacheReplica:
    id: str
    alive: bool = True
    store: dict[int, VersionedValue] = field(default_factory=dict)
    used_bytes: int = 0
    # per-second accounting: current window and the last complete one
    window: int = -1
    cur_q: int = 0
    cur_b: int = 0
    last_q: int = 0
    last_b: int = 0
    cur_r: int = 0
    last_r: int = 0
    total_q: int = 0
    total_b: int = 0
    rejected: int = 0

    def _roll(self, now: int) -> None:
        w = now // 1000
        if w != self.window:
            if w == self.window + 1:
                self.last_q, self.last_b, self.last_r = self.cur_q, self.cur_b, self.cur_r
            else:
                self.last_q = self.last_b = self.last_r = 0
            self.window = w
            self.cur_q = self.cur_b = self.cur_r = 0

    def load(self, now: int) -> tuple[int, int]:
        """(requests, bytes) over the last complete second."""
        self._roll(now)
        return self.last_q, self.last_b

    def demand(self, now: int) -> int:
        """Requests offered over the last complete second, rejected ones included."""
        self._roll(now)
        return self.last_q + self.last_r

    def wipe(self) -> None:
        self.store.clear()
        self.used_bytes = 0


class CacheInstance:
    def __init__(self, name: str, clock: Callable[[], int], rng, n_replicas: int = 3,
                 config: CacheReplicaConfig | None = None,
                 replication: ReplicationConfig | None = None,
                 rtt_ms: int = 1, write_ms: int = 2, throttle_delay_ms: int = 50,
                 migration_ms: int = 1000, vnodes: int = 32,
                 max_value_bytes: int | None = None):
        self.name = name
        self.clock = clock
        self.rng = rng
        self.config = config or CacheReplicaConfig()
        self.replication = replication or ReplicationConfig()
        self.rtt_ms = rtt_ms
        self.write_ms = write_ms
        self.throttle_delay_ms = throttle_delay_ms
        self.migration_ms = migration_ms
        self.vnodes = vnodes
        self.max_value_bytes = max_value_bytes
        self.replicas: dict[str, CacheReplica] = {}
        self._ring: list[tuple[int, str]] = []
        self._sets: dict[int, tuple[str, ...]] = {}
        self._old_ring: list[tuple[int, str]] | None = None
        self._old_sets: dict[int, tuple[str, ...]] = {}
        self._migrating_until = -1
        self._vclock = 0
        self._next_id = 0
        self.reshards = 0
        for _ in range(n_replicas):
            self._add_to_ring(self._new_replica())

    # -- membership ---------------------------------------------------------

    def _new_replica(self) -> CacheReplica:
        r = CacheReplica(f"{self.name}-{self._next_id}")
        self._next_id += 1
        self.replicas[r.id] = r
        return r

    def _add_to_ring(self, r: CacheReplica) -> None:
        for i in range(self.vnodes):
            bisect.insort(self._ring, (_digest(f"{r.id}#{i}"), r.id))
        self._sets.clear()

    @staticmethod
    def _walk(ring: list[tuple[int, str]], key: int, n: int) -> tuple[str, ...]:
        if not ring:
            return ()
        out: list[str] = []
        i = bisect.bisect(ring, (key, ""))
        for k in range(len(ring)):
            rid = ring[(i + k) % len(ring)][1]
            if rid not in out:
                out.append(rid)
                if len(out) == n:
                    break
        return tuple(out)

    def replica_ids(self, key: int) -> tuple[str, ...]:
        s = self._sets.get(key)
        if s is None:
            s = self._sets[key] = self._walk(self._ring, key, self.replication.n_replicas)
        return s

    def replica_set(self, key: int) -> list[CacheReplica]:
        return [self.replicas[i] for i in self.replica_ids(key)]

    def _begin_reshard(self, mutate: Callable[[], None]) -> None:
        self._settle()
        if self._old_ring is None:
            # a reshard during a migration keeps migrating from the original ring
            self._old_ring = list(self._ring)
        self._old_sets = {}
        mutate()
        self._sets.clear()
        self._migrating_until = self.clock() + self.migration_ms
        self.reshards += 1

    def spawn_replica(self) -> str:
        """Add a replica and start migrating the keys it now owns."""
        r = self._new_replica()
        self._begin_reshard(lambda: self._add_to_ring(r))
        return r.id

    def retire_replica(self, rid: str) -> None:
        def drop():
            self._ring = [e for e in self._ring if e[1] != rid]
        self._begin_reshard(drop)

    def trigger_reshard(self, delta: int) -> list[str]:
        """Grow (delta > 0) or shrink the ring; returns the ids touched."""
        touched: list[str] = []
        if delta > 0:
            for _ in range(delta):
                touched.append(self.spawn_replica())
        else:
            for _ in range(-delta):
                members = self.ring_members()
                if len(members) <= self.replication.n_replicas:
                    break
                rid = members[-1]
                self.retire_replica(rid)
                touched.append(rid)
        return touched

    def ring_members(self) -> list[str]:
        ring_ids = {rid for _, rid in self._ring}
        return [rid for rid in self.replicas if rid in ring_ids]

    def kill_replica(self, rid: str) -> None:
        r = self.replicas[rid]
        r.alive = False
        r.wipe()

    def restart_replica(self, rid: str) -> None:
        self.replicas[rid].alive = True

    def inspect_occupancy(self) -> dict[str, float]:
        cap = self.config.capacity_bytes
        return {rid: r.used_bytes / cap for rid, r in self.replicas.items()}

    def migrating(self) -> bool:
        return self.clock() < self._migrating_until

    def _is_migrating(self, key: int) -> bool:
        if self.clock() >= self._migrating_until or self._old_ring is None:
            return False
        old = self._old_sets.get(key)
        if old is None:
            old = self._old_sets[key] = self._walk(self._old_ring, key, self.replication.n_replicas)
        return old != self.replica_ids(key)

    def _settle(self) -> None:
        """Finish a completed migration: copy values to new owners, drop the rest."""
        if self._old_ring is None or self.clock() < self._migrating_until:
            return
        self._old_ring = None
        self._old_sets = {}
        holders: dict[int, VersionedValue] = {}
        for r in self.replicas.values():
            for k, v in r.store.items():
                cur = holders.get(k)
                if cur is None or v.version > cur.version:
                    holders[k] = v
        for r in self.replicas.values():
            for k in [k for k in r.store if r.id not in self.replica_ids(k)]:
                self._remove(r, k)
        for k, v in holders.items():
            for r in self.replica_set(k):
                if r.alive:
                    cur = r.store.get(k)
                    if cur is None or cur.version < v.version:
                        self._store(r, k, v)
        for r in self.replicas.values():
            r.store = dict(sorted(r.store.items(), key=lambda kv: kv[1].written_at))

    # -- replica-level primitives --------------------------------------------

    def _admit(self, r: CacheReplica, nbytes: int, now: int, new_request: bool = True) -> bool:
        r._roll(now)
        cfg = self.config
        q = r.cur_q + (1 if new_request else 0)
        if q > cfg.max_qps or (r.cur_b + nbytes) * 8 > cfg.max_bps:
            r.rejected += 1
            r.cur_r += 1
            return False
        r.cur_q = q
        r.cur_b += nbytes
        r.total_q += 1 if new_request else 0
        r.total_b += nbytes
        return True

    def _remove(self, r: CacheReplica, key: int) -> None:
        v = r.store.pop(key, None)
        if v is not None:
            r.used_bytes -= len(v.data)

    def _store(self, r: CacheReplica, key: int, v: VersionedValue) -> None:
        self._remove(r, key)
        r.store[key] = v
        r.used_bytes += len(v.data)
        cap = self.config.capacity_bytes
        while r.used_bytes > cap and r.store:
            self._remove(r, next(iter(r.store)))

    def _lookup(self, r: CacheReplica, key: int, now: int) -> VersionedValue | None:
        v = r.store.get(key)
        if v is not None and v.written_at + self.config.ttl_ms <= now:
            self._remove(r, key)
            return None
        return v

    # -- client operations ------------------------------------------------------

    def put(self, key: int, data: bytes, version: int | None = None,
            replicas: Iterable[str] | None = None) -> int:
        """Write ``data`` to the key's replicas; returns the number that applied it.

        ``replicas`` restricts delivery to a subset, which models writes that
        only reached some replicas before the client deadline.
        """
        if self.max_value_bytes is not None and len(data) > self.max_value_bytes:
            raise ValueError(f"value of {len(data)} bytes exceeds {self.max_value_bytes}")
        self._settle()
        now = self.clock()
        targets = self.replica_set(key)
        if version is None:
            newest = max((r.store[key].version for r in targets if key in r.store), default=0)
            self._vclock = max(self._vclock + 1, newest + 1)
            version = self._vclock
        else:
            self._vclock = max(self._vclock, version)
        allowed = None if replicas is None else set(replicas)
        v = VersionedValue(bytes(data), version, now)
        acked = 0
        for r in targets:
            if not r.alive or (allowed is not None and r.id not in allowed):
                continue
            if not self._admit(r, len(data), now):
                continue
            cur = r.store.get(key)
            if cur is None or cur.version < version:
                self._store(r, key, v)
            acked += 1
        return acked

    def live_replicas(self, key: int) -> int:
        self._settle()
        return sum(1 for r in self.replica_set(key) if r.alive)

    def delete(self, key: int) -> None:
        self._settle()
        for r in self.replica_set(key):
            if r.alive:
                self._remove(r, key)

    def _probe(self, r: CacheReplica, key: int, now: int, new_request: bool = True) -> Read:
        if not r.alive:
            return Read("down", None, r.id, INF)
        if self._is_migrating(key):
            return Read("migrating", None, r.id, self.rtt_ms)
        v = self._lookup(r, key, now)
        if not self._admit(r, len(v.data) if v else 0, now, new_request):
            return Read("throttled", None, r.id, self.throttle_delay_ms)
        return Read("hit" if v is not None else "miss", v, r.id, self.rtt_ms)

    def get_relaxed(self, key: int, exclude: Iterable[str] = ()) -> Read:
        self._settle()
        ex = set(exclude)
        candidates = [r for r in self.replica_set(key) if r.id not in ex]
        if not candidates:
            return Read("down", None, None, INF)
        r = candidates[self.rng.randrange(len(candidates))]
        return self._probe(r, key, self.clock())

    def get_consistent(self, key: int) -> Read:
        self._settle()
        return self._consistent(key, self.clock(), None)

    def _consistent(self, key: int, now: int, touched: dict[str, bool] | None) -> Read:
        order = list(self.replica_set(key))
        self.rng.shuffle(order)
        need = self.replication.read_quorum
        got: list[Read] = []
        slow = 0.0
        for r in order:
            fresh = touched is None or r.id not in touched
            res = self._probe(r, key, now, new_request=fresh)
            if touched is not None:
                touched[r.id] = True
            if res.status in ("hit", "miss"):
                got.append(res)
                if len(got) == need:
                    break
            elif res.status == "throttled":
                slow = max(slow, res.latency_ms)
        if len(got) < need:
            raise CacheUnavailable(key, len(got), max(slow, self.throttle_delay_ms))
        best = max((g for g in got if g.value is not None), key=lambda g: g.value.version,
                   default=None)
        if best is None:
            return Read("miss", None, None, self.rtt_ms)
        return Read("hit", best.value, best.replica, self.rtt_ms)

    def bulk_get(self, keys: list[int], mode: str = "consistent") -> dict[int, object]:
        """Batched reads: each replica touched counts one request for the batch.

        Values are a :class:`VersionedValue`, ``None`` for a miss, or a
        :class:`CacheUnavailable` instance for a consistent read that failed.
        """
        if not keys:
            raise ValueError("bulk_get needs at least one key")
        if mode not in ("relaxed", "consistent"):
            raise ValueError(f"unknown mode {mode!r}")
        self._settle()
        now = self.clock()
        touched: dict[str, bool] = {}
        out: dict[int, object] = {}
        for k in keys:
            if mode == "consistent":
                try:
                    out[k] = self._consistent(k, now, touched).value
                except CacheUnavailable as e:
                    out[k] = e
            else:
                cands = self.replica_set(k)
                r = cands[self.rng.randrange(len(cands))]
                res = self._probe(r, k, now, new_request=r.id not in touched)
                touched[r.id] = True
                out[k] = res.value
        return out

    # -- locks -------------------------------------------------------------------

    def read_lock(self, key: int) -> LockRecord | None:
        res = self.get_consistent(key)
        return LockRecord.decode(res.value.data) if res.value is not None else None

    def acquire_lock(self, key: int, signature: tuple[str, int]) -> tuple[bool, LockRecord | None]:
        """Install ``signature`` if the lock is free; otherwise report the holder.

        An unreachable lock counts as acquired: locks only limit clobbering.
        """
        try:
            cur = self.read_lock(key)
        except CacheUnavailable:
            return True, None
        if cur is None or cur.signature == tuple(signature):
            rec = LockRecord(signature[0], signature[1], False, self.clock())
            self.put(key, rec.encode())
            return True, rec
        return False, cur

    def seize_lock(self, key: int, signature: tuple[str, int]) -> LockRecord:
        rec = LockRecord(signature[0], signature[1], False, self.clock())
        self.put(key, rec.encode())
        return rec

    def poison_lock(self, key: int) -> None:
        try:
            cur = self.read_lock(key)
        except CacheUnavailable:
            return
        if cur is None or cur.poisoned:
            return
        cur.poisoned = True
        self.put(key, cur.encode())

    def release_lock(self, key: int, signature: tuple[str, int]) -> None:
        try:
            cur = self.read_lock(key)
        except CacheUnavailable:
            return
        if cur is not None and cur.signature == tuple(signature):
            self.delete(key)

    def check_lock(self, key: int, signature: tuple[str, int]) -> str:
        """'held', 'poisoned', 'other' (someone else owns it), 'absent' or 'unknown'."""
        try:
            cur = self.read_lock(key)
        except CacheUnavailable:
            return "unknown"
        if cur is None:
            return "absent"
        if cur.signature != tuple(signature):
            return "other"
        return "poisoned" if cur.poisoned else "held"

    # -- garbage collection -----------------------------------------------------

    def gc_tick(self, now: int | None = None) -> int:
        """Drop expired entries, then evict least-recently-modified down to the GC threshold."""
        now = self.clock() if now is None else now
        ttl = self.config.ttl_ms
        limit = self.config.gc_start_fraction * self.config.capacity_bytes
        evicted = 0
        for r in self.replicas.values():
            store = r.store
            # dict order is modification order, hence ascending written_at
            while store:
                k = next(iter(store))
                if store[k].written_at + ttl <= now:
                    self._remove(r, k)
                    evicted += 1
                else:
                    break
            if r.used_bytes > limit:
                while store and r.used_bytes > limit:
                    self._remove(r, next(iter(store)))
                    evicted += 1
        return evicted
