"""Independent reference implementations used by the tests."""

from __future__ import annotations

import itertools
import random

from tailcopy.file_layer import ChunkWritePlan


def delayed_read_oracle(record: list, cache_size: int, durable_size: int, now: int,
                        max_delay: int) -> bool:
    """Line-by-line transliteration of the delayed durable read pseudocode."""
    record.append((now, durable_size))
    while len(record) > 0:
        if record[0][1] > cache_size:
            break
        record.pop(0)
    if len(record) == 0:
        return False
    if now > record[0][0] + max_delay:
        record.clear()
        return True
    return False


def codec_roundtrip(rng: random.Random, chunk_size: int, total: int, *, check_every_state=True,
                    prefix_rule=True, publish_before_ack=False) -> tuple[bool, str]:
    """Drive a ChunkWritePlan with random appends and out-of-order put landings.

    The cache is a dict seq -> bytes where a landing put overwrites the value.
    Returns (ok, reason).  Checked at every intermediate state: each cached
    chunk is a prefix of the true chunk bytes, and every byte below the plan's
    pointer is readable from the cache.
    """
    truth = bytes(rng.randrange(256) for _ in range(total))
    plan = ChunkWritePlan(chunk_size, 0, prefix_rule=prefix_rule,
                          publish_before_ack=publish_before_ack)
    cache: dict[int, bytes] = {}
    inflight: list = []
    written = 0

    def check() -> str:
        for seq, v in cache.items():
            if truth[seq * chunk_size:seq * chunk_size + len(v)] != v:
                return f"chunk {seq} value is not a prefix"
        p = plan.pointer
        for seq in range(0, (p + chunk_size - 1) // chunk_size):
            need = min(chunk_size, p - seq * chunk_size)
            if len(cache.get(seq, b"")) < need:
                return f"pointer {p} ahead of cached chunk {seq}"
        return ""

    while written < total or inflight:
        if written < total and (not inflight or rng.random() < 0.5):
            n = min(total - written, rng.randint(1, 2 * chunk_size))
            inflight.extend(plan.add(written, truth[written:written + n]))
            written += n
        else:
            req = inflight.pop(rng.randrange(len(inflight)))
            lost = rng.random() < 0.05
            if not lost:
                cache[req.seq] = req.data
            inflight.extend(plan.on_ack(req, 0 if lost else 3))
        if check_every_state:
            why = check()
            if why:
                return False, why
    why = check()
    if why:
        return False, why
    if plan.pointer != total:
        return False, f"pointer {plan.pointer} != {total} at quiescence"
    got = b"".join(cache[s] for s in sorted(cache))
    if got != truth:
        return False, "reassembled bytes differ"
    return True, ""


def spanning_tree_min(nodes: list[str], costs: dict[tuple[str, str], float]) -> float:
    """Minimum total cost over every labeled spanning tree (brute force over edge subsets)."""
    edges = list(costs.items())
    best = float("inf")
    for subset in itertools.combinations(edges, len(nodes) - 1):
        comp = {n: n for n in nodes}

        def root(x):
            while comp[x] != x:
                x = comp[x]
            return x

        ok = True
        for (a, b), _ in subset:
            ra, rb = root(a), root(b)
            if ra == rb:
                ok = False
                break
            comp[ra] = rb
        if ok:
            best = min(best, sum(c for _, c in subset))
    return best


def random_connected_graph(rng: random.Random, n: int) -> tuple[list[str], dict]:
    nodes = [chr(ord("A") + i) for i in range(n)]
    costs = {}
    for i in range(1, n):
        costs[(nodes[rng.randrange(i)], nodes[i])] = float(rng.randint(1, 9))
    for a, b in itertools.combinations(nodes, 2):
        if (a, b) not in costs and (b, a) not in costs and rng.random() < 0.4:
            costs[(a, b)] = float(rng.randint(1, 9))
    return nodes, costs
