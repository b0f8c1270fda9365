import networkx as nx
import numpy as np
import pytest

from ego_graph import sample_ego_graph, shortest_distance
from errors import UnknownNodeError
from hetgraph import EntityType, HetGraph, RelationType


def random_graph(seed, max_nodes=50):
    rng = np.random.default_rng(seed)
    n_members = int(rng.integers(2, max_nodes // 2))
    n_jobs = int(rng.integers(1, max_nodes - n_members))
    g = HetGraph()
    for i in range(1, n_members + 1):
        g.add_node(i, EntityType.MEMBER)
    for i in range(n_members + 1, n_members + n_jobs + 1):
        g.add_node(i, EntityType.JOB)
    for u in range(1, n_members + 1):
        for j in range(n_members + 1, n_members + n_jobs + 1):
            if rng.random() < 0.15:
                g.add_edge(u, j, RelationType.MEMBER_JOB)
        for v in range(1, n_members + 1):
            if u != v and rng.random() < 0.1:
                g.add_edge(u, v, RelationType.MEMBER_MEMBER)
    return g


def undirected(g):
    h = nx.Graph()
    h.add_nodes_from(g.node_ids())
    h.add_edges_from((src, dst) for src, dst, _ in g.edges())
    return h


def test_full_fanout_matches_bfs_oracle():
    for seed in range(100):
        g = random_graph(seed)
        oracle = undirected(g)
        k = g.node_ids()[seed % g.num_nodes]
        ego = sample_ego_graph(g, k, depth=2, fanout=10_000, seed=seed)
        expected = nx.single_source_shortest_path_length(oracle, k, cutoff=2)
        assert dict(ego.nodes) == expected


def test_sampled_distances_match_induced_shortest_paths():
    for seed in range(100):
        g = random_graph(seed)
        k = g.node_ids()[0]
        ego = sample_ego_graph(g, k, depth=2, fanout=2, seed=seed)
        induced = nx.Graph()
        induced.add_nodes_from(ego.node_ids)
        induced.add_edges_from((src, dst) for src, dst, _ in ego.edges)
        lengths = dict(nx.all_pairs_shortest_path_length(induced))
        for node_id, hop in ego.nodes:
            assert lengths[k][node_id] == hop == shortest_distance(ego, node_id)
            assert hop <= 2


def test_fanout_limits_each_frontier_node(toy_graph):
    ego = sample_ego_graph(toy_graph, 2, depth=1, fanout=1, seed=3)
    assert len(ego) == 2
    assert ego.distance(2) == 0


def test_center_and_ordering(toy_graph):
    ego = sample_ego_graph(toy_graph, 1, depth=2, fanout=5, seed=0)
    assert ego.nodes[0] == (1, 0)
    keys = [(hop, node_id) for node_id, hop in ego.nodes]
    assert keys == sorted(keys)
    assert dict(ego.nodes) == {1: 0, 2: 1, 5: 1, 6: 1, 3: 2}


def test_deterministic_for_seed(small_graph):
    a = sample_ego_graph(small_graph, 4, depth=2, fanout=2, seed=11)
    b = sample_ego_graph(small_graph, 4, depth=2, fanout=2, seed=11)
    assert a.nodes == b.nodes
    assert a.edges == b.edges


def test_isolated_center():
    g = HetGraph()
    g.add_node(1, EntityType.MEMBER)
    g.add_node(2, EntityType.JOB)
    ego = sample_ego_graph(g, 1, depth=2, fanout=3)
    assert ego.nodes == ((1, 0),)
    assert ego.edges == ()


def test_unknown_center(toy_graph):
    with pytest.raises(UnknownNodeError):
        sample_ego_graph(toy_graph, 99)


def test_distance_outside_ego(toy_graph):
    ego = sample_ego_graph(toy_graph, 4, depth=1, fanout=5)
    with pytest.raises(UnknownNodeError):
        ego.distance(1)


def test_without_recomputes_distances(toy_graph):
    ego = sample_ego_graph(toy_graph, 1, depth=2, fanout=5, seed=0)
    pruned = ego.without({2})
    assert 2 not in pruned
    # 3 was only reachable through 2
    assert 3 not in pruned
    assert pruned.distance(5) == 1
    assert ego.without({1}) is ego
