"""Randomized interleaving checker for the cache write path.

One small file is produced into a durable log while several lockless cache
writers (a duel) shadow it into a real :class:`CacheInstance` through their
own :class:`ChunkWritePlan`.  Every put lands on a chosen subset of replicas
and is acknowledged as a separate step, evictions drop chunk values, and a
consumer reads through :func:`read_range_cached` whenever there is something
to read.  A chooser picks the next enabled step at random, or, for small
shapes, :func:`explore_exhaustive` walks every choice sequence.

Checked after every step:

* chunk prefix: every replica's value for chunk ``s`` is a prefix of the true
  bytes of chunk ``s``;
* pointer rule (ghost state kept by the checker, not the plan): a writer's
  pointer never passes the contiguous prefix the checker saw acknowledged;
* safety: the consumer only ever receives the true bytes, in order.

After the last step: every writer published the full file and the consumer
read all of it (termination).  Failing schedules are shrunk by replaying
them with single steps removed.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field

from ..durable_log import DurableLog
from ..file_layer import ChunkGeometry, ChunkWritePlan, ReadConfig, read_range_cached
from ..kv_cache import CacheInstance, chunk_key

PATH = "/check/file"


@dataclass
class CheckConfig:
    chunks: int = 4
    chunk_bytes: int = 4
    writers: int = 2
    trials: int = 100_000
    seed: int = 0
    max_evictions: int = 2
    # probability that a landing put reaches no replica
    lost_put_p: float = 0.05
    # exhaustive search only: lost puts per schedule (each one forces a retry)
    max_lost_puts: int = 1
    # mutations, for showing the checker catches the classic bugs
    prefix_rule: bool = True
    publish_before_ack: bool = False
    minimize: bool = True


@dataclass
class CheckFailure:
    kind: str
    detail: str
    trial: int
    schedule: list[tuple]

    def to_json(self) -> dict:
        return {"kind": self.kind, "detail": self.detail, "trial": self.trial,
                "schedule": [list(s) for s in self.schedule]}


@dataclass
class CheckResult:
    trials: int
    steps: int
    failures: list[CheckFailure] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_json(self) -> dict:
        return {"trials": self.trials, "steps": self.steps, "ok": self.ok,
                "failures": [f.to_json() for f in self.failures]}


class _Violation(Exception):
    def __init__(self, kind: str, detail: str):
        super().__init__(f"{kind}: {detail}")
        self.kind = kind
        self.detail = detail


class _Writer:
    def __init__(self):
        self.plan: ChunkWritePlan | None = None
        self.pos = 0
        # seq -> [request, landed?, replicas that applied it]
        self.inflight: dict[int, list] = {}
        self.ghost_acked: dict[int, int] = {}
        self.published = 0


class World:
    """One trial's state; ``apply`` performs a step, ``enabled`` lists them."""

    def __init__(self, cfg: CheckConfig, truth: bytes):
        self.cfg = cfg
        self.C = cfg.chunk_bytes
        self.N = len(truth)
        self.truth = truth
        self.now = 0
        self.cache = CacheInstance("chk", lambda: self.now, random.Random(0), vnodes=4)
        self.durable = DurableLog("chk", lambda: self.now)
        self.handle = self.durable.open_writer(PATH)
        self.produced = 0
        self.meta_len = 0
        self.writers = [_Writer() for _ in range(cfg.writers)]
        self.evictions = 0
        self.lost = 0
        self.read_pos = 0
        self.geometry = ChunkGeometry(self.C)
        self.read_cfg = ReadConfig()
        self._join(0)

    # -- steps -------------------------------------------------------------

    def enabled(self) -> list[tuple]:
        out: list[tuple] = []
        if self.produced < self.N:
            out.append(("produce",))
        for i, w in enumerate(self.writers):
            if w.plan is None:
                out.append(("join", i))
                continue
            if w.pos < self.produced:
                out.append(("deliver", i))
            for seq, (req, landed, _) in sorted(w.inflight.items()):
                out.append(("ack", i, seq) if landed else ("land", i, seq))
        if self.evictions < self.cfg.max_evictions:
            for r in self.cache.replicas.values():
                for k in r.store:
                    out.append(("evict",))
                    break
                else:
                    continue
                break
        if self.read_pos < self.meta_len:
            out.append(("read",))
        if self.read_pos < self.produced:
            out.append(("fallback",))
        return out

    def concretize(self, step: tuple, rng: random.Random | None) -> tuple:
        """Fill in a step's free choices; ``rng=None`` picks the canonical ones."""
        kind = step[0]
        if kind == "produce":
            n = self.N - self.produced
            return ("produce", min(n, rng.randint(1, self.C + 1)) if rng else n)
        if kind == "deliver":
            n = self.produced - self.writers[step[1]].pos
            return ("deliver", step[1], min(n, rng.randint(1, self.C + 1)) if rng else n)
        if kind == "land":
            if rng is None:
                mask = 7
            elif rng.random() < self.cfg.lost_put_p:
                mask = 0
            else:
                mask = rng.randint(1, 7)
            return ("land", step[1], step[2], mask)
        if kind == "evict":
            cands = sorted((rid, k) for rid, r in self.cache.replicas.items() for k in r.store)
            rid, k = cands[rng.randrange(len(cands))] if rng else cands[0]
            return ("evict", rid, k)
        return step

    def options(self) -> list[tuple]:
        """Every concrete next step, for exhaustive search.

        A landing put either reaches all replicas, only the first, or (when
        lost puts are enabled and the budget allows) none.
        """
        out = []
        lossy = self.cfg.lost_put_p > 0 and self.lost < self.cfg.max_lost_puts
        masks = (7, 1, 0) if lossy else (7, 1)
        for step in self.enabled():
            kind = step[0]
            if kind == "produce":
                rem = self.N - self.produced
                out.extend(("produce", n) for n in range(1, min(rem, self.C + 1) + 1))
            elif kind == "deliver":
                rem = self.produced - self.writers[step[1]].pos
                out.extend(("deliver", step[1], n) for n in range(1, min(rem, self.C + 1) + 1))
            elif kind == "land":
                out.extend(("land", step[1], step[2], m) for m in masks)
            elif kind == "evict":
                out.extend(("evict", rid, k) for rid, r in sorted(self.cache.replicas.items())
                           for k in sorted(r.store))
            else:
                out.append(step)
        return out

    def applicable(self, step: tuple) -> bool:
        kind = step[0]
        if kind == "produce":
            return self.produced < self.N
        if kind == "join":
            return self.writers[step[1]].plan is None
        if kind == "deliver":
            w = self.writers[step[1]]
            return w.plan is not None and w.pos < self.produced
        if kind in ("land", "ack"):
            ent = self.writers[step[1]].inflight.get(step[2])
            return ent is not None and ent[1] == (kind == "ack")
        if kind == "evict":
            r = self.cache.replicas.get(step[1])
            return r is not None and step[2] in r.store and self.evictions < self.cfg.max_evictions
        if kind == "read":
            return self.read_pos < self.meta_len
        if kind == "fallback":
            return self.read_pos < self.produced
        return False

    def apply(self, step: tuple) -> None:
        self.now += 1
        kind = step[0]
        if kind == "produce":
            n = min(step[1], self.N - self.produced)
            self.durable.append(self.handle, self.truth[self.produced:self.produced + n])
            self.produced += n
        elif kind == "join":
            self._join(step[1])
        elif kind == "deliver":
            w = self.writers[step[1]]
            n = min(step[2], self.produced - w.pos)
            reqs = w.plan.add(w.pos, self.truth[w.pos:w.pos + n])
            w.pos += n
            self._issue(w, reqs)
            if self.cfg.publish_before_ack:
                self._publish(w)
        elif kind == "land":
            self._land(self.writers[step[1]], step[2], step[3])
        elif kind == "ack":
            self._ack(self.writers[step[1]], step[2])
        elif kind == "evict":
            self.cache._remove(self.cache.replicas[step[1]], step[2])
            self.evictions += 1
        elif kind == "read":
            self._read(self.meta_len)
        elif kind == "fallback":
            self._read(self.produced)

    # -- pieces ---------------------------------------------------------------

    def _join(self, i: int) -> None:
        w = self.writers[i]
        start = self.meta_len // self.C * self.C
        w.plan = ChunkWritePlan(self.C, start, prefix_rule=self.cfg.prefix_rule,
                                publish_before_ack=self.cfg.publish_before_ack)
        w.pos = start
        # everything below the start is already published by someone else
        w.published = start

    def _issue(self, w: _Writer, reqs) -> None:
        for r in reqs:
            if r.seq in w.inflight:
                raise _Violation("plan", f"second put in flight for chunk {r.seq}")
            w.inflight[r.seq] = [r, False, 0]

    def _land(self, w: _Writer, seq: int, mask: int) -> None:
        ent = w.inflight[seq]
        key = chunk_key(PATH, seq)
        ids = self.cache.replica_ids(key)
        chosen = [rid for b, rid in enumerate(ids) if mask >> b & 1]
        ent[2] = self.cache.put(key, ent[0].data, replicas=chosen) if chosen else 0
        self.lost += not chosen
        ent[1] = True
        lo = seq * self.C
        want = self.truth[lo:lo + self.C]
        for rid in ids:
            v = self.cache.replicas[rid].store.get(key)
            if v is not None and want[:len(v.data)] != v.data:
                raise _Violation("chunk_prefix",
                                 f"replica {rid} holds {v.data!r} for chunk {seq}, not a prefix of {want!r}")

    def _ack(self, w: _Writer, seq: int) -> None:
        req, _, count = w.inflight.pop(seq)
        if count > 0:
            w.ghost_acked[seq] = max(w.ghost_acked.get(seq, 0), req.end)
        follow = w.plan.on_ack(req, count)
        self._issue(w, follow)
        self._publish(w)

    def _ghost_pointer(self, w: _Writer) -> int:
        C = self.C
        p = w.plan.start
        while True:
            seq = p // C
            got = w.ghost_acked.get(seq, 0)
            if got >= C:
                p = (seq + 1) * C
                continue
            return max(p, seq * C + got)

    def _publish(self, w: _Writer) -> None:
        p = w.plan.pointer
        ghost = self._ghost_pointer(w)
        if p > ghost:
            raise _Violation("pointer_rule", f"pointer {p} passes acknowledged prefix {ghost}")
        if p > w.published:
            w.published = p
            self.meta_len = max(self.meta_len, p)

    def _read(self, upto: int) -> None:
        pos = self.read_pos
        out = read_range_cached(self.cache, self.durable, PATH, pos, upto - pos, self.geometry,
                                self.read_cfg, durable_limit=self.produced)
        blob = out.data
        if blob != self.truth[pos:pos + len(blob)]:
            raise _Violation("safety", f"read at {pos} returned {blob!r}, "
                                       f"expected {self.truth[pos:pos + len(blob)]!r}")
        if pos + len(blob) > self.produced:
            raise _Violation("safety", f"read past produced length {self.produced}")
        self.read_pos = pos + len(blob)

    def final_check(self) -> None:
        if self.read_pos < self.N:
            self._read(self.N)
        for i, w in enumerate(self.writers):
            if w.plan.pointer != self.N or w.published != self.N:
                raise _Violation("termination",
                                 f"writer {i} stopped at pointer {w.plan.pointer}, "
                                 f"published {w.published} of {self.N}")
        if self.read_pos != self.N:
            raise _Violation("termination", f"consumer read {self.read_pos} of {self.N} bytes")


def _truth(cfg: CheckConfig, rng: random.Random) -> bytes:
    return bytes(rng.randrange(1, 256) for _ in range(cfg.chunks * cfg.chunk_bytes))


def run_trial(cfg: CheckConfig, truth: bytes, rng: random.Random,
              budget: int = 10_000) -> tuple[list[tuple], _Violation | None]:
    """Random schedule until nothing is enabled; returns the steps taken and any violation."""
    world = World(cfg, truth)
    taken: list[tuple] = []
    try:
        for _ in range(budget):
            en = world.enabled()
            if not en:
                break
            step = world.concretize(en[rng.randrange(len(en))], rng)
            taken.append(step)
            world.apply(step)
        else:
            raise _Violation("termination", f"no quiescence after {budget} steps")
        world.final_check()
    except _Violation as v:
        return taken, v
    return taken, None


def replay(cfg: CheckConfig, truth: bytes, schedule: list[tuple],
           budget: int = 10_000) -> _Violation | None:
    """Run ``schedule`` (skipping steps that no longer apply), then drain canonically."""
    world = World(cfg, truth)
    try:
        for step in schedule:
            if world.applicable(step):
                world.apply(step)
        for _ in range(budget):
            en = [s for s in world.enabled() if s[0] != "evict"]
            if not en:
                break
            world.apply(world.concretize(en[0], None))
        world.final_check()
    except _Violation as v:
        return v
    return None


def minimize(cfg: CheckConfig, truth: bytes, schedule: list[tuple], kind: str) -> list[tuple]:
    """Greedy one-step-at-a-time removal while the same kind of violation reproduces."""
    cur = list(schedule)
    changed = True
    while changed:
        changed = False
        i = len(cur) - 1
        while i >= 0:
            cand = cur[:i] + cur[i + 1:]
            v = replay(cfg, truth, cand)
            if v is not None and v.kind == kind:
                cur = cand
                changed = True
            i -= 1
    return cur


@dataclass
class ExhaustiveResult:
    paths: int
    complete: bool
    failure: CheckFailure | None = None


def explore_exhaustive(cfg: CheckConfig, truth: bytes | None = None,
                       max_paths: int = 200_000) -> ExhaustiveResult:
    """Run every schedule of one file, up to ``max_paths`` of them.

    Stateless search: each path re-executes from the initial state following
    a vector of option indices, then the vector is advanced like an odometer.
    ``complete`` says whether the whole choice tree was covered.
    """
    if truth is None:
        truth = bytes(range(1, cfg.chunks * cfg.chunk_bytes + 1))
    prefix: list[int] = []
    paths = 0
    while paths < max_paths:
        world = World(cfg, truth)
        taken: list[tuple] = []
        widths: list[int] = []
        err = None
        try:
            depth = 0
            while True:
                opts = world.options()
                if not opts:
                    break
                i = prefix[depth] if depth < len(prefix) else 0
                widths.append(len(opts))
                taken.append(opts[i])
                world.apply(opts[i])
                depth += 1
            world.final_check()
        except _Violation as v:
            err = v
        paths += 1
        if err is not None:
            sched = minimize(cfg, truth, taken, err.kind) if cfg.minimize else taken
            return ExhaustiveResult(paths, False, CheckFailure(err.kind, err.detail, paths - 1, sched))
        chosen = prefix[:len(widths)] + [0] * (len(widths) - len(prefix))
        while chosen and chosen[-1] + 1 >= widths[len(chosen) - 1]:
            chosen.pop()
        if not chosen:
            return ExhaustiveResult(paths, True)
        chosen[-1] += 1
        prefix = chosen
    return ExhaustiveResult(paths, False)


def check_interleavings(cfg: CheckConfig, *, stop_on_first: bool = True,
                        progress=None) -> CheckResult:
    t0 = time.perf_counter()
    master = random.Random(cfg.seed)
    res = CheckResult(0, 0)
    for trial in range(cfg.trials):
        rng = random.Random(master.getrandbits(64))
        truth = _truth(cfg, rng)
        taken, v = run_trial(cfg, truth, rng)
        res.trials += 1
        res.steps += len(taken)
        if v is not None:
            sched = minimize(cfg, truth, taken, v.kind) if cfg.minimize else taken
            again = replay(cfg, truth, sched)
            detail = again.detail if again is not None else v.detail
            res.failures.append(CheckFailure(v.kind, detail, trial, sched))
            if stop_on_first:
                break
        if progress is not None and trial % 10_000 == 0:
            progress(trial)
    res.seconds = time.perf_counter() - t0
    return res
