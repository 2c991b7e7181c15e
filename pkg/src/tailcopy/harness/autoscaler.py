from __future__ import annotations

import math
from typing import TYPE_CHECKING

from .scenario import AutoscalerSpec

if TYPE_CHECKING:
    from .runner import Run


class Autoscaler:
    """Threshold scaling for each cluster's data cache.

    Any replica over the QPS or bandwidth threshold for ``breach_periods``
    ticks in a row adds enough replicas to bring the mean back under it; a
    cache that stays below ``low_fraction`` of both thresholds for ``scale_down_after_ms`` loses one replica.
    """

    def __init__(self, run: "Run", spec: AutoscalerSpec):
        self.run = run
        self.spec = spec
        self.low_since: dict[str, int] = {}
        self.breaches: dict[str, int] = {}
        self.last_tick = -spec.period_ms
        self.actions: list[dict] = []

    def tick(self) -> None:
        if not self.spec.enabled:
            return
        now = self.run.sim.now
        if now - self.last_tick < self.spec.period_ms:
            return
        self.last_tick = now
        for name in sorted(self.run.fabric.clusters):
            self.autoscale_tick(self.run.fabric.clusters[name].data_cache)

    def autoscale_tick(self, inst) -> int:
        """Returns the replica-count change applied to ``inst``."""
        s = self.spec
        now = self.run.sim.now
        if inst.migrating():
            return 0
        members = [r for r in inst.ring_members() if inst.replicas[r].alive]
        if not members:
            return 0
        loads = [inst.replicas[r].load(now) for r in members]
        qps = [inst.replicas[r].demand(now) for r in members]
        bps = [b * 8 for _, b in loads]
        n = len(inst.ring_members())
        over = max(max(qps) / s.max_qps, max(bps) / s.max_bps)
        if over >= 1:
            self.breaches[inst.name] = self.breaches.get(inst.name, 0) + 1
            if self.breaches[inst.name] < s.breach_periods:
                return 0
            self.breaches[inst.name] = 0
            # size for the total load at the threshold, with at least one extra replica
            need = max(sum(qps) / s.max_qps, sum(bps) / s.max_bps)
            target = min(s.max_replicas, max(n + 1, math.ceil(need * 1.25)))
            delta = target - n
            if delta > 0:
                inst.trigger_reshard(delta)
                self._log(inst, delta, "scale_up")
            self.low_since.pop(inst.name, None)
            return max(delta, 0)
        self.breaches[inst.name] = 0
        low = max(max(qps) / s.max_qps, max(bps) / s.max_bps) < s.low_fraction
        if low and n > s.min_replicas:
            since = self.low_since.setdefault(inst.name, now)
            if now - since >= s.scale_down_after_ms:
                inst.trigger_reshard(-1)
                self.low_since[inst.name] = now
                self._log(inst, -1, "scale_down")
                return -1
        elif not low:
            self.low_since.pop(inst.name, None)
        return 0

    def _log(self, inst, delta: int, why: str) -> None:
        rec = {"t": self.run.sim.now, "cache": inst.name, "delta": delta, "why": why,
               "replicas": len(inst.ring_members())}
        self.actions.append(rec)
        self.run.sim.record("autoscale", **rec)
