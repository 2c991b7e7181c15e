"""Per-stream distribution trees over the cluster graph.

Trees are grown Prim-style from the source cluster.  Attaching child ``v``
under an in-tree node ``u`` costs::

    cost(u, v) + alpha * depth(u) + beta * fanout(u) + penalty(u) + penalty(u, v)

so bandwidth cost dominates while deep or bushy parents, and clusters near an
outage, are discouraged.  Edges that would exceed ``max_depth`` are never used.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field


class TreeError(Exception):
    def __init__(self, msg: str, unreachable: list[str] | None = None):
        super().__init__(msg)
        self.unreachable = unreachable or []


def _ek(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


@dataclass
class ClusterGraph:
    nodes: list[str]
    costs: dict[tuple[str, str], float] = field(default_factory=dict)
    node_penalty: dict[str, float] = field(default_factory=dict)
    edge_penalty: dict[tuple[str, str], float] = field(default_factory=dict)
    down_nodes: set[str] = field(default_factory=set)
    down_edges: set[tuple[str, str]] = field(default_factory=set)

    def __post_init__(self):
        self.costs = {_ek(a, b): float(c) for (a, b), c in self.costs.items()}
        for (a, b), c in self.costs.items():
            if c < 0:
                raise ValueError(f"negative cost on {a}-{b}")
            if a not in self.nodes or b not in self.nodes:
                raise ValueError(f"edge {a}-{b} references an unknown node")
        self._adj: dict[str, list[str]] = {n: [] for n in self.nodes}
        for a, b in self.costs:
            self._adj[a].append(b)
            self._adj[b].append(a)
        for n in self._adj:
            self._adj[n].sort()

    @classmethod
    def from_edges(cls, nodes, edges) -> "ClusterGraph":
        return cls(list(nodes), {(a, b): c for a, b, c in edges})

    def cost(self, a: str, b: str) -> float:
        return self.costs[_ek(a, b)]

    def has_edge(self, a: str, b: str) -> bool:
        return _ek(a, b) in self.costs

    def healthy(self, n: str) -> bool:
        return n not in self.down_nodes

    def edge_up(self, a: str, b: str) -> bool:
        return _ek(a, b) not in self.down_edges and self.healthy(a) and self.healthy(b)

    def neighbors(self, n: str) -> list[str]:
        return self._adj[n]

    def max_cost(self) -> float:
        return max(self.costs.values(), default=1.0)

    def copy(self) -> "ClusterGraph":
        g = ClusterGraph(list(self.nodes), dict(self.costs))
        g.node_penalty = dict(self.node_penalty)
        g.edge_penalty = dict(self.edge_penalty)
        g.down_nodes = set(self.down_nodes)
        g.down_edges = set(self.down_edges)
        return g

    def clear_penalties(self) -> None:
        self.node_penalty.clear()
        self.edge_penalty.clear()

    def to_json(self) -> dict:
        return {"nodes": list(self.nodes),
                "edges": [{"a": a, "b": b, "cost": c} for (a, b), c in sorted(self.costs.items())]}

    @classmethod
    def from_json(cls, obj: dict) -> "ClusterGraph":
        return cls(list(obj["nodes"]), {(e["a"], e["b"]): e["cost"] for e in obj["edges"]})


REGULAR = "regular"
RATE_LIMITED_LEAF = "rate_limited_leaf"


@dataclass
class CopyTree:
    root: str
    parent: dict[str, str | None]
    mode: dict[str, str] = field(default_factory=dict)
    rerouted: list[str] = field(default_factory=list)

    def __post_init__(self):
        for n in self.parent:
            self.mode.setdefault(n, REGULAR)

    @property
    def nodes(self) -> list[str]:
        return list(self.parent)

    def children(self, n: str) -> list[str]:
        return sorted(c for c, p in self.parent.items() if p == n)

    def fanout(self, n: str) -> int:
        return sum(1 for p in self.parent.values() if p == n)

    def depth(self, n: str) -> int:
        d = 0
        while self.parent[n] is not None:
            n = self.parent[n]
            d += 1
        return d

    def edges(self) -> list[tuple[str, str]]:
        return sorted((p, c) for c, p in self.parent.items() if p is not None)

    def hops(self) -> list[tuple[str, str]]:
        """Parent-before-child order, convenient for walking the tree from the root."""
        out = []
        q = deque([self.root])
        while q:
            u = q.popleft()
            for c in self.children(u):
                out.append((u, c))
                q.append(c)
        return out

    def total_cost(self, g: ClusterGraph) -> float:
        return sum(g.cost(p, c) for p, c in self.edges())

    def max_depth(self) -> int:
        return max((self.depth(n) for n in self.parent), default=0)

    def copy(self) -> "CopyTree":
        return CopyTree(self.root, dict(self.parent), dict(self.mode), list(self.rerouted))

    def to_json(self) -> dict:
        return {"root": self.root, "parent": dict(sorted(self.parent.items())),
                "mode": dict(sorted(self.mode.items())), "rerouted": list(self.rerouted)}

    @classmethod
    def from_json(cls, obj: dict) -> "CopyTree":
        return cls(obj["root"], dict(obj["parent"]), dict(obj.get("mode", {})),
                   list(obj.get("rerouted", [])))


@dataclass
class TreeConfig:
    alpha_depth: float = 0.05
    beta_fanout: float = 0.05
    max_depth: int | None = 4
    # BFS outage penalty: base_penalty_factor * max edge cost, halved per hop
    base_penalty_factor: float = 10.0
    penalty_decay: float = 2.0
    penalty_radius: int = 1


def _attach_weight(g: ClusterGraph, u: str, v: str, depth: int, fanout: int, alpha: float,
                   beta: float) -> float:
    return (g.cost(u, v) + alpha * depth + beta * fanout + g.node_penalty.get(u, 0.0)
            + g.edge_penalty.get(_ek(u, v), 0.0))


def build_tree(g: ClusterGraph, source: str, destinations, alpha_depth: float = 0.0,
               beta_fanout: float = 0.0, max_depth: int | None = 4) -> CopyTree:
    """Grow a distribution tree from ``source`` until every destination is attached.

    Relay clusters that end up as non-destination leaves are pruned.
    """
    dests = [d for d in destinations if d != source]
    if not g.healthy(source):
        raise TreeError(f"source {source} is down", [source])
    bad = [d for d in dests if d not in g.nodes]
    if bad:
        raise TreeError(f"unknown destinations {bad}", bad)
    parent: dict[str, str | None] = {source: None}
    depth = {source: 0}
    fanout = {source: 0}
    remaining = set(dests)
    while remaining:
        best = None
        for u in parent:
            du = depth[u]
            if max_depth is not None and du + 1 > max_depth:
                continue
            for v in g.neighbors(u):
                if v in parent or not g.edge_up(u, v):
                    continue
                w = _attach_weight(g, u, v, du, fanout[u], alpha_depth, beta_fanout)
                cand = (w, v, u)
                if best is None or cand < best:
                    best = cand
        if best is None:
            missing = sorted(remaining)
            raise TreeError(f"unreachable within max_depth={max_depth}: {missing}", missing)
        _, v, u = best
        parent[v] = u
        depth[v] = depth[u] + 1
        fanout[v] = 0
        fanout[u] += 1
        remaining.discard(v)
    keep = set(dests) | {source}
    pruned = True
    while pruned:
        pruned = False
        for n in list(parent):
            if n not in keep and all(p != n for p in parent.values()):
                del parent[n]
                pruned = True
    return CopyTree(source, parent)


def outage_penalties(g: ClusterGraph, outage_nodes=(), outage_edges=(),
                     config: TreeConfig = TreeConfig()) -> ClusterGraph:
    """Copy of ``g`` with BFS-decayed penalties around the outage."""
    out = g.copy()
    p0 = config.base_penalty_factor * g.max_cost()
    for src in outage_nodes:
        dist = {src: 0}
        q = deque([src])
        while q:
            u = q.popleft()
            if dist[u] >= config.penalty_radius:
                continue
            for v in g.neighbors(u):
                if v not in dist:
                    dist[v] = dist[u] + 1
                    q.append(v)
        for n, d in sorted(dist.items()):
            pen = p0 / config.penalty_decay ** d
            out.node_penalty[n] = out.node_penalty.get(n, 0.0) + pen
            for v in g.neighbors(n):
                k = _ek(n, v)
                dv = dist.get(v, d + 1)
                if min(d, dv) == d:
                    out.edge_penalty[k] = max(out.edge_penalty.get(k, 0.0), pen)
    for a, b in outage_edges:
        k = _ek(a, b)
        out.edge_penalty[k] = out.edge_penalty.get(k, 0.0) + p0
        for n in (a, b):
            out.node_penalty[n] = out.node_penalty.get(n, 0.0) + p0 / config.penalty_decay
    return out


def penalize_and_rebuild(t: CopyTree, g: ClusterGraph, outage_nodes=(), outage_edges=(),
                         config: TreeConfig = TreeConfig()) -> tuple[CopyTree, ClusterGraph]:
    """Penalize clusters and links around an outage and rebuild the tree.

    Destinations that can no longer be reached are dropped from the tree and
    listed in ``rerouted``.  Returns the new tree and the penalized graph.
    """
    if not outage_nodes and not outage_edges:
        raise ValueError("empty outage set")
    pg = outage_penalties(g, outage_nodes, outage_edges, config)
    dests = [n for n in t.nodes if n != t.root]
    rerouted: list[str] = []
    while True:
        try:
            nt = build_tree(pg, t.root, [d for d in dests if d not in rerouted],
                            config.alpha_depth, config.beta_fanout, config.max_depth)
            break
        except TreeError as e:
            if not e.unreachable or t.root in e.unreachable:
                raise
            rerouted.extend(e.unreachable)
    nt.rerouted = sorted(rerouted)
    for n, m in t.mode.items():
        if n in nt.parent and m == RATE_LIMITED_LEAF and not nt.children(n):
            nt.mode[n] = m
    return nt, pg


def add_cluster(t: CopyTree, g: ClusterGraph, new_cluster: str,
                config: TreeConfig = TreeConfig()) -> CopyTree:
    """Attach ``new_cluster`` as a rate-limited leaf under its cheapest eligible parent."""
    if not g.healthy(new_cluster):
        raise TreeError(f"{new_cluster} is down", [new_cluster])
    if new_cluster in t.parent:
        return t.copy()
    best = None
    for u in t.parent:
        if t.mode.get(u) == RATE_LIMITED_LEAF or not g.has_edge(u, new_cluster):
            continue
        if not g.edge_up(u, new_cluster):
            continue
        du = t.depth(u)
        if config.max_depth is not None and du + 1 > config.max_depth:
            continue
        w = _attach_weight(g, u, new_cluster, du, t.fanout(u), config.alpha_depth, config.beta_fanout)
        if best is None or (w, u) < best:
            best = (w, u)
    if best is None:
        raise TreeError(f"no eligible parent for {new_cluster}", [new_cluster])
    nt = t.copy()
    nt.parent[new_cluster] = best[1]
    nt.mode[new_cluster] = RATE_LIMITED_LEAF
    return nt


def promote(t: CopyTree, cluster: str) -> CopyTree:
    nt = t.copy()
    nt.mode[cluster] = REGULAR
    return nt


def reroute_consumers(g: ClusterGraph, t: CopyTree, cluster: str) -> str:
    """Nearest healthy in-tree cluster to ``cluster`` by path cost; ties go to the lower id."""
    dist = {cluster: 0.0}
    heap = [(0.0, cluster)]
    best = None
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist.get(u, float("inf")):
            continue
        if u != cluster and g.healthy(u) and u in t.parent and u not in t.rerouted:
            if best is None or (d, u) < best:
                best = (d, u)
            continue
        if best is not None and d > best[0]:
            break
        for v in g.neighbors(u):
            k = _ek(u, v)
            if k in g.down_edges or not g.healthy(v):
                continue
            nd = d + g.cost(u, v)
            if nd < dist.get(v, float("inf")):
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    if best is None:
        raise TreeError(f"no healthy cluster to reroute {cluster} to", [cluster])
    return best[1]
