"""
Ego-Graph Sampling Module

Samples the D-hop neighborhood of a center node with a per-node fan-out
limit. Expansion is breadth-first and treats every edge as traversable in
both directions; hop distances are shortest distances inside the sampled
subgraph.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Tuple

import networkx as nx
import numpy as np

from errors import UnknownNodeError
from hetgraph import HetGraph, RelationType


@dataclass(frozen=True)
class EgoGraph:
    """
    A sampled neighborhood around ``center``.

    Attributes:
        center: Center node id (distance 0)
        nodes: (node id, hop distance) pairs sorted by (hop, id)
        edges: Induced directed edges (src, dst, rel) sorted by (src, dst)
        depth: Sampling depth D
    """

    center: int
    nodes: Tuple[Tuple[int, int], ...]
    edges: Tuple[Tuple[int, int, RelationType], ...]
    depth: int
    _dist: Dict[int, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._dist.update(dict(self.nodes))

    def __contains__(self, node_id: int) -> bool:
        return node_id in self._dist

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def node_ids(self) -> List[int]:
        return [node_id for node_id, _ in self.nodes]

    def distance(self, node_id: int) -> int:
        """Hop distance of a node from the center."""
        if node_id not in self._dist:
            raise UnknownNodeError(node_id, where=f"ego graph of {self.center}")
        return self._dist[node_id]

    def without(self, drop: Iterable[int]) -> "EgoGraph":
        """
        Ego graph with some nodes removed.

        Distances are recomputed inside the remaining induced subgraph; nodes
        that become unreachable or farther than ``depth`` are dropped too.
        The center is never removed.
        """
        drop = set(drop) - {self.center}
        if not drop & set(self._dist):
            return self
        keep = [n for n in self._dist if n not in drop]
        edges = [e for e in self.edges if e[0] not in drop and e[1] not in drop]
        return _assemble(self.center, keep, edges, self.depth)


def _assemble(center: int, node_ids: Iterable[int],
              edges: Iterable[Tuple[int, int, RelationType]], depth: int) -> EgoGraph:
    """Build an EgoGraph with BFS distances over the undirected induced subgraph."""
    undirected = nx.Graph()
    undirected.add_node(center)
    undirected.add_nodes_from(node_ids)
    undirected.add_edges_from((src, dst) for src, dst, _ in edges)

    lengths = nx.single_source_shortest_path_length(undirected, center, cutoff=depth)
    nodes = tuple(sorted(((n, d) for n, d in lengths.items()), key=lambda nd: (nd[1], nd[0])))
    kept = set(lengths)
    induced = tuple(sorted((e for e in edges if e[0] in kept and e[1] in kept),
                           key=lambda e: (e[0], e[1])))
    return EgoGraph(center=center, nodes=nodes, edges=induced, depth=depth)


def sample_ego_graph(g: HetGraph, k: int, depth: int = 2, fanout: int = 5,
                     seed: int = 0) -> EgoGraph:
    """
    Sample the ``depth``-hop ego graph of node ``k``.

    Breadth-first expansion, one hop at a time. Every frontier node (in id
    order) keeps at most ``fanout`` of its not-yet-visited neighbors, drawn
    uniformly without replacement. Deterministic for a fixed seed.

    Args:
        g: Graph to sample from
        k: Center node id
        depth: Number of hops D (>= 1)
        fanout: Per-node neighbor limit per hop (>= 1)
        seed: RNG seed

    Returns:
        EgoGraph containing the center at distance 0

    Raises:
        UnknownNodeError: If k is not in the graph
    """
    if not g.has_node(k):
        raise UnknownNodeError(k)
    if depth < 1 or fanout < 1:
        raise ValueError("depth and fanout must be at least 1")

    rng = np.random.default_rng(seed)
    visited = {k}
    frontier = [k]

    for _ in range(depth):
        next_frontier: List[int] = []
        for node_id in sorted(frontier):
            candidates = [n for n in g.undirected_neighbors(node_id) if n not in visited]
            if len(candidates) > fanout:
                picked = sorted(candidates[i] for i in rng.choice(len(candidates), fanout, replace=False))
            else:
                picked = candidates
            visited.update(picked)
            next_frontier.extend(picked)
        frontier = next_frontier
        if not frontier:
            break

    edges = [
        (src, dst, rel)
        for src in visited
        for dst, rel in ((d, g.graph[src][d]["rel"]) for d in g.graph.successors(src))
        if dst in visited
    ]
    return _assemble(k, visited, edges, depth)


def shortest_distance(ego: EgoGraph, i: int) -> int:
    """
    Hop distance dist(i, center) as stored in the ego graph.

    Raises:
        UnknownNodeError: If i is not part of the ego graph
    """
    return ego.distance(i)
