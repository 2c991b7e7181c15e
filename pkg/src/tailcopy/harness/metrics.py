from __future__ import annotations

from collections import defaultdict

import numpy as np

from ..cluster import MetricsSink
from ..file_layer import ReadStats

PERCENTILES = (50, 95, 99, 99.9, 99.99)


def percentiles(values, ps=PERCENTILES) -> dict[str, float]:
    if len(values) == 0:
        return {}
    arr = np.asarray(values, dtype=float)
    got = np.percentile(arr, ps)
    return {f"p{p:g}": round(float(v), 3) for p, v in zip(ps, got)}


class Metrics(MetricsSink):
    """Everything the report needs, bucketed by simulated second where it is a rate."""

    def __init__(self):
        self.delays: dict[str, list[tuple[int, int]]] = defaultdict(list)
        self.consumer_fallbacks: dict[str, dict[int, int]] = defaultdict(lambda: defaultdict(int))
        self.consumer_failures: dict[str, dict[int, int]] = defaultdict(lambda: defaultdict(int))
        self.consumer_stats: dict[str, ReadStats] = defaultdict(ReadStats)
        self.reader_stats: dict[tuple[str, str], ReadStats] = defaultdict(ReadStats)
        self.hop_delays: dict[tuple[str, str, str], list[int]] = defaultdict(list)
        self.write_lat: dict[str, list[int]] = defaultdict(list)
        self.cache_load: dict[str, list[tuple[int, int, float, float, float]]] = defaultdict(list)
        self.replica_counts: dict[str, list[tuple[int, int]]] = defaultdict(list)
        self.consumed_bytes = 0

    # transport hooks

    def hop_delay(self, up, down, storage, ms):
        self.hop_delays[(up, down, storage)].append(int(ms))

    def reader_read(self, cluster, storage, stats):
        self.reader_stats[(cluster, storage)].add(stats)

    def write_latency(self, cluster, ms):
        self.write_lat[cluster].append(int(ms))

    # harness hooks

    def consumer_step(self, cluster: str, now: int, stats: ReadStats, nbytes: int) -> None:
        sec = now // 1000
        self.consumer_stats[cluster].add(stats)
        if stats.durable_reads:
            self.consumer_fallbacks[cluster][sec] += stats.durable_reads
        if stats.failures:
            self.consumer_failures[cluster][sec] += stats.failures
        self.consumed_bytes += nbytes

    def delivered(self, cluster: str, now: int, delay_ms: int) -> None:
        self.delays[cluster].append((now, delay_ms))

    def sample_cache(self, name: str, now: int, qps: list[float], bps: list[float]) -> None:
        self.cache_load[name].append((now, len(qps), float(sum(qps)), float(sum(bps)),
                                      float(max(qps, default=0))))

    # queries

    def fallback_series(self, cluster: str | None = None) -> dict[int, int]:
        out: dict[int, int] = defaultdict(int)
        for c, series in self.consumer_fallbacks.items():
            if cluster is None or c == cluster:
                for s, n in series.items():
                    out[s] += n
        return dict(out)

    def failure_total(self) -> int:
        return sum(sum(s.values()) for s in self.consumer_failures.values())

    def fallbacks_in(self, start_ms: int, end_ms: int) -> int:
        return sum(n for s, n in self.fallback_series().items()
                   if start_ms <= s * 1000 and (s + 1) * 1000 <= end_ms)

    def delay_percentiles(self, cluster: str, start_ms: int = 0, end_ms: int | None = None):
        vals = [d for t, d in self.delays.get(cluster, [])
                if t >= start_ms and (end_ms is None or t < end_ms)]
        return percentiles(vals)

    def report(self, window: tuple[int, int] | None) -> dict:
        out: dict = {"delivery_delay_ms": {}, "fallback_reads_per_s": {}, "read_failures": {},
                     "hop_delay_ms": {}, "write_latency_ms": {}, "cache": {}, "reader": {},
                     "consumer_reads": {}}
        for c in sorted(self.delays):
            out["delivery_delay_ms"][c] = {"all": self.delay_percentiles(c)}
            if window is not None:
                out["delivery_delay_ms"][c]["stable"] = self.delay_percentiles(c, *window)
            out["delivery_delay_ms"][c]["messages"] = len(self.delays[c])
        for c in sorted(self.consumer_fallbacks):
            series = self.consumer_fallbacks[c]
            out["fallback_reads_per_s"][c] = {str(s): series[s] for s in sorted(series)}
        for c in sorted(self.consumer_failures):
            out["read_failures"][c] = sum(self.consumer_failures[c].values())
        for k in sorted(self.hop_delays):
            out["hop_delay_ms"]["%s->%s:%s" % k] = percentiles(self.hop_delays[k], (50, 99))
        for c in sorted(self.write_lat):
            out["write_latency_ms"][c] = percentiles(self.write_lat[c], (50, 99, 99.9))
        for name in sorted(self.cache_load):
            rows = self.cache_load[name]
            out["cache"][name] = {
                "peak_qps": round(max(r[2] for r in rows), 3),
                "peak_bps": round(max(r[3] for r in rows), 3),
                "peak_replica_qps": round(max(r[4] for r in rows), 3),
                "replicas": [[rows[0][0], rows[0][1]]] + _changes([(r[0], r[1]) for r in rows]),
            }
        for (c, storage) in sorted(self.reader_stats):
            s = self.reader_stats[(c, storage)]
            out["reader"][f"{c}:{storage}"] = vars(s).copy()
        for c in sorted(self.consumer_stats):
            out["consumer_reads"][c] = vars(self.consumer_stats[c]).copy()
        return out


def _changes(series: list[tuple[int, int]]) -> list[list[int]]:
    out = []
    last = None
    for t, n in series:
        if last is not None and n != last:
            out.append([t, n])
        last = n
    return out
