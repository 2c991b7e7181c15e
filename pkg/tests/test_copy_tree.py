import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import random_connected_graph, spanning_tree_min
from tailcopy.copy_tree import (RATE_LIMITED_LEAF, REGULAR, ClusterGraph, CopyTree, TreeConfig,
                                TreeError, add_cluster, build_tree, penalize_and_rebuild, promote,
                                reroute_consumers)

WORKED = {("A", "B"): 1, ("A", "C"): 2, ("A", "D"): 4, ("B", "C"): 1, ("B", "D"): 3, ("C", "D"): 5}


def worked():
    return ClusterGraph(["A", "B", "C", "D"], dict(WORKED))


def test_worked_example():
    g = worked()
    t = build_tree(g, "A", ["B", "C", "D"])
    assert t.edges() == [("A", "B"), ("B", "C"), ("B", "D")]
    assert t.total_cost(g) == 5 == spanning_tree_min(g.nodes, WORKED)


def test_outage_demotes_penalized_node_to_leaf():
    g = worked()
    t = build_tree(g, "A", ["B", "C", "D"])
    assert t.children("B")
    nt, pg = penalize_and_rebuild(t, g, ["B"], (), TreeConfig(alpha_depth=0, beta_fanout=0))
    assert nt.children("B") == []
    assert nt.edges() == [("A", "B"), ("A", "C"), ("A", "D")]
    # clearing the penalties restores the original tree
    pg.clear_penalties()
    assert build_tree(pg, "A", ["B", "C", "D"]).edges() == t.edges()


def test_rebuild_is_deterministic():
    g = worked()
    t = build_tree(g, "A", ["B", "C", "D"])
    a, _ = penalize_and_rebuild(t, g, ["C"])
    b, _ = penalize_and_rebuild(t, g, ["C"])
    assert a.to_json() == b.to_json()


def test_disconnected_destination_is_rerouted():
    g = ClusterGraph(["A", "B", "C"], {("A", "B"): 1, ("B", "C"): 1})
    t = build_tree(g, "A", ["B", "C"])
    g.down_nodes.add("B")
    nt, _ = penalize_and_rebuild(t, g, ["B"])
    assert nt.rerouted == ["B", "C"]


def test_single_destination_direct_iff_cheapest():
    g = ClusterGraph(["A", "B", "C"], {("A", "C"): 5, ("A", "B"): 1, ("B", "C"): 1})
    assert build_tree(g, "A", ["C"]).parent["C"] == "B"
    g2 = ClusterGraph(["A", "B", "C"], {("A", "C"): 1, ("A", "B"): 1, ("B", "C"): 1})
    assert build_tree(g2, "A", ["C"]).edges() == [("A", "C")]


def test_large_depth_penalty_gives_star():
    g = worked()
    t = build_tree(g, "A", ["B", "C", "D"], alpha_depth=100.0)
    assert t.max_depth() == 1


def test_depth_cap_and_unreachable():
    nodes = list("ABCDEF")
    chain = {(a, b): 1 for a, b in zip(nodes, nodes[1:])}
    g = ClusterGraph(nodes, chain)
    with pytest.raises(TreeError) as e:
        build_tree(g, "A", nodes[1:], max_depth=4)
    assert e.value.unreachable == ["F"]
    assert build_tree(g, "A", nodes[1:5], max_depth=4).max_depth() == 4


def test_relay_leaves_are_pruned():
    g = ClusterGraph(["A", "B", "C"], {("A", "B"): 1, ("A", "C"): 1})
    assert build_tree(g, "A", ["C"]).nodes == ["A", "C"]


@given(st.integers(0, 10**9), st.integers(2, 7))
def test_greedy_equals_enumeration(seed, n):
    nodes, costs = random_connected_graph(random.Random(seed), n)
    g = ClusterGraph(nodes, costs)
    t = build_tree(g, nodes[0], nodes[1:], 0.0, 0.0, None)
    assert t.total_cost(g) == pytest.approx(spanning_tree_min(nodes, costs))
    assert len(t.edges()) == n - 1


@given(st.integers(0, 10**9), st.integers(2, 7), st.floats(0, 3), st.floats(0, 3))
def test_tree_shape_invariants(seed, n, alpha, beta):
    nodes, costs = random_connected_graph(random.Random(seed), n)
    g = ClusterGraph(nodes, costs)
    try:
        t = build_tree(g, nodes[0], nodes[1:], alpha, beta, 4)
    except TreeError:
        return
    assert t.max_depth() <= 4
    assert len(t.edges()) == len(t.nodes) - 1
    for v in t.nodes:
        assert t.depth(v) <= len(nodes)


def test_add_cluster_as_rate_limited_leaf_then_promote():
    g = ClusterGraph(["A", "B", "C", "E"], {("A", "B"): 1, ("B", "C"): 1, ("C", "E"): 1,
                                            ("A", "E"): 9})
    t = build_tree(g, "A", ["B", "C"])
    nt = add_cluster(t, g, "E")
    assert nt.parent["E"] == "C" and nt.mode["E"] == RATE_LIMITED_LEAF
    g2 = ClusterGraph(["A", "B", "C", "E", "F"], {("A", "B"): 1, ("B", "C"): 1, ("C", "E"): 1,
                                                  ("E", "F"): 1, ("A", "F"): 9})
    t2 = add_cluster(build_tree(g2, "A", ["B", "C"]), g2, "E")
    # E is cheapest for F but a rate-limited leaf never takes children
    assert add_cluster(t2, g2, "F").parent["F"] == "A"
    p = promote(nt, "E")
    assert p.mode["E"] == REGULAR and p.parent == nt.parent


def test_reroute_nearest_with_id_tiebreak():
    g = ClusterGraph(["A", "B", "C", "D"], {("A", "B"): 1, ("B", "D"): 2, ("C", "D"): 2,
                                            ("A", "C"): 1})
    t = CopyTree("A", {"A": None, "B": "A", "C": "A", "D": "B"})
    g.down_nodes.add("D")
    assert reroute_consumers(g, t, "D") == "B"


def test_json_round_trip():
    t = build_tree(worked(), "A", ["B", "C", "D"])
    assert CopyTree.from_json(t.to_json()).to_json() == t.to_json()
    g = worked()
    assert ClusterGraph.from_json(g.to_json()).costs == g.costs
