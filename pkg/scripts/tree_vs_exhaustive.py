"""Greedy copy tree versus exhaustive enumeration of spanning trees on small graphs.

With no depth or fan-out penalty and every cluster a destination, the greedy
tree must cost exactly the enumerated minimum.  Also reports the depth cap
and how often the depth-capped tree is forced above the minimum.

    python3 scripts/tree_vs_exhaustive.py --graphs 200
"""

import argparse
import itertools
import random

from tailcopy.copy_tree import ClusterGraph, TreeError, build_tree


def spanning_tree_costs(g: ClusterGraph):
    """Yield the cost of every spanning tree of ``g`` (edge subsets of size n-1 without a cycle)."""
    n = len(g.nodes)
    edges = sorted(g.costs.items())
    for subset in itertools.combinations(edges, n - 1):
        parent = {v: v for v in g.nodes}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        ok = True
        for (a, b), _ in subset:
            ra, rb = find(a), find(b)
            if ra == rb:
                ok = False
                break
            parent[ra] = rb
        if ok:
            yield sum(c for _, c in subset)


def random_graph(rng: random.Random, n: int) -> ClusterGraph:
    nodes = [chr(ord("A") + i) for i in range(n)]
    costs = {}
    for i in range(1, n):
        costs[(nodes[rng.randrange(i)], nodes[i])] = rng.randint(1, 9)
    for a, b in itertools.combinations(nodes, 2):
        if (a, b) not in costs and (b, a) not in costs and rng.random() < 0.4:
            costs[(a, b)] = rng.randint(1, 9)
    return ClusterGraph(nodes, costs)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--graphs", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    equal = capped_deeper = capped_costlier = unreachable = 0
    for _ in range(args.graphs):
        g = random_graph(rng, rng.randint(2, 7))
        dests = g.nodes[1:]
        opt = min(spanning_tree_costs(g))
        free = build_tree(g, g.nodes[0], dests, 0.0, 0.0, None)
        equal += abs(free.total_cost(g) - opt) < 1e-9
        try:
            capped = build_tree(g, g.nodes[0], dests, 0.0, 0.0, 4)
        except TreeError:
            # some cluster is more than four hops from the source in g itself
            unreachable += 1
            continue
        capped_deeper += capped.max_depth() > 4
        capped_costlier += capped.total_cost(g) > opt + 1e-9
    print(f"{args.graphs} graphs: greedy == enumerated minimum on {equal}; "
          f"depth cap 4 violated on {capped_deeper}; capped tree costlier on {capped_costlier}; "
          f"no tree within 4 hops on {unreachable}")


if __name__ == "__main__":
    main()
