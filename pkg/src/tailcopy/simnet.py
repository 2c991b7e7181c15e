"""Deterministic discrete-event substrate.

Everything in the simulated cluster runs as callbacks on a single
:class:`Simulator` event loop.  Time is an integer number of milliseconds.
Ties are broken by insertion order, and the only randomness comes from the
simulator's seeded ``rng``, so a scenario replayed with the same seed yields
the same event sequence.
"""

from __future__ import annotations

import heapq
import itertools
import math
import random
from dataclasses import dataclass, field
from typing import Any, Callable


@dataclass
class ProcessHandle:
    """A killable unit of volatile state living in one cluster.

    ``incarnation`` changes on every kill, so events scheduled for an earlier
    life of the process are dropped even after a restart.
    """

    id: str
    cluster: str
    alive: bool = True
    incarnation: int = 0
    persistent: bool = False
    on_kill: list[Callable[[], None]] = field(default_factory=list, repr=False)
    on_restart: list[Callable[[], None]] = field(default_factory=list, repr=False)


@dataclass
class Link:
    src: str
    dst: str
    latency_ms: int
    bandwidth_bps: float
    up: bool = True
    # delivery time of the last message put on the wire, for FIFO order
    last_delivery: int = 0

    def __post_init__(self):
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be >= 0")
        if self.bandwidth_bps <= 0:
            raise ValueError("bandwidth_bps must be > 0")


class Simulator:
    def __init__(self, seed: int = 0, trace: bool = False):
        self.now = 0
        self.rng = random.Random(seed)
        self.seed = seed
        self._queue: list[tuple[int, int, Callable, tuple, ProcessHandle | None, int, str]] = []
        self._counter = itertools.count()
        self._cancelled: set[int] = set()
        self.processes: dict[str, ProcessHandle] = {}
        self.links: dict[tuple[str, str], Link] = {}
        self.events_fired = 0
        self.tracing = trace
        self.trace: list[str] = []
        # lifecycle / fault records kept regardless of ``tracing``
        self.log: list[dict[str, Any]] = []

    # -- events -------------------------------------------------------------

    def schedule(self, delay_ms: int, fn: Callable, *args, owner: ProcessHandle | None = None,
                 label: str | None = None) -> int:
        if delay_ms < 0:
            raise ValueError(f"negative delay {delay_ms}")
        eid = next(self._counter)
        inc = owner.incarnation if owner is not None else 0
        heapq.heappush(self._queue, (self.now + int(delay_ms), eid, fn, args, owner, inc,
                                     label or ""))
        return eid

    def at(self, time_ms: int, fn: Callable, *args, owner: ProcessHandle | None = None,
           label: str | None = None) -> int:
        return self.schedule(max(0, time_ms - self.now), fn, *args, owner=owner, label=label)

    def cancel(self, event_id: int) -> None:
        self._cancelled.add(event_id)

    def every(self, period_ms: int, fn: Callable[[], Any], *, owner: ProcessHandle | None = None,
              label: str | None = None, start_ms: int | None = None) -> None:
        """Call ``fn`` every ``period_ms`` until it returns ``False`` or the owner dies."""
        if period_ms <= 0:
            raise ValueError("period must be positive")

        def tick():
            if fn() is False:
                return
            self.schedule(period_ms, tick, owner=owner, label=label)

        self.schedule(period_ms if start_ms is None else start_ms, tick, owner=owner, label=label)

    def pending(self) -> int:
        return len(self._queue)

    def step(self) -> bool:
        while self._queue:
            t, eid, fn, args, owner, inc, label = heapq.heappop(self._queue)
            if eid in self._cancelled:
                self._cancelled.discard(eid)
                continue
            if owner is not None and (not owner.alive or owner.incarnation != inc):
                continue
            self.now = t
            self.events_fired += 1
            if self.tracing:
                self.trace.append(f"{t} {eid} {label or getattr(fn, '__qualname__', '?')}")
            fn(*args)
            return True
        return False

    def run(self, until: int | None = None) -> None:
        q = self._queue
        while q:
            if until is not None and q[0][0] > until:
                break
            self.step()
        if until is not None and self.now < until:
            self.now = until

    def record(self, ev: str, /, **fields) -> None:
        rec = {"t": self.now, "ev": ev}
        rec.update(fields)
        self.log.append(rec)

    # -- processes ----------------------------------------------------------

    def spawn(self, pid: str, cluster: str, persistent: bool = False) -> ProcessHandle:
        if pid in self.processes:
            raise ValueError(f"duplicate process id {pid}")
        p = ProcessHandle(pid, cluster, persistent=persistent)
        self.processes[pid] = p
        return p

    def kill_process(self, p: ProcessHandle) -> None:
        if not p.alive:
            return
        p.alive = False
        p.incarnation += 1
        self.record("kill", pid=p.id)
        if not p.persistent:
            for hook in p.on_kill:
                hook()

    def restart_process(self, p: ProcessHandle) -> None:
        if p.alive:
            return
        p.alive = True
        self.record("restart", pid=p.id)
        for hook in p.on_restart:
            hook()

    # -- network ------------------------------------------------------------

    def add_link(self, src: str, dst: str, latency_ms: int, bandwidth_bps: float) -> Link:
        link = Link(src, dst, int(latency_ms), float(bandwidth_bps))
        self.links[(src, dst)] = link
        return link

    def link(self, src: str, dst: str) -> Link:
        return self.links[(src, dst)]

    def send(self, link: Link, payload_bytes: int, on_deliver: Callable, *args,
             owner: ProcessHandle | None = None) -> int | None:
        """Ship ``payload_bytes`` over ``link``; returns the delivery time or ``None`` if dropped."""
        if not link.up:
            return None
        serialization = payload_bytes * 8 * 1000 / link.bandwidth_bps
        t = self.now + link.latency_ms + math.floor(serialization + 0.5)
        t = max(t, link.last_delivery)
        link.last_delivery = t
        self.schedule(t - self.now, on_deliver, *args, owner=owner)
        return t
