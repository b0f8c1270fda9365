"""
Metapath Module

Typed path schemas over member/job entities (UU, UI, IU, UIU, ...), their
existence test between two nodes, the proximity indicator vector used by
attention alignment, and the (center, intermediates, ends) triple sampler
for two-hop structural prompts.

Metapath existence is strictly directed along relation signatures: an IU
step means "job j was interacted with by member j2", i.e. the member→job
relation traversed backwards.
"""

import threading
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from ego_graph import EgoGraph
from errors import RelationTypeError, SkipInstance, UnknownNodeError
from hetgraph import EntityType, HetGraph, RelationType


_LETTERS = {"U": EntityType.MEMBER, "I": EntityType.JOB}


@dataclass(frozen=True)
class Metapath:
    """
    A metapath: entity sequence of length l+1 and relation sequence of length l.

    The self metapath has l = 0 and an empty entity sequence.
    """

    entity_seq: Tuple[EntityType, ...]
    relation_seq: Tuple[RelationType, ...]
    abbreviation: str

    @property
    def length(self) -> int:
        return len(self.relation_seq)

    @property
    def is_self(self) -> bool:
        return self.length == 0

    @property
    def start(self) -> EntityType:
        return self.entity_seq[0]

    @property
    def end(self) -> EntityType:
        return self.entity_seq[-1]

    def step(self, index: int) -> Tuple[EntityType, EntityType, RelationType]:
        """(from type, to type, relation) of one step."""
        return self.entity_seq[index], self.entity_seq[index + 1], self.relation_seq[index]

    def compatible_with(self, g: HetGraph, k: int) -> bool:
        """A metapath is compatible with k when it starts at k's entity type."""
        return not self.is_self and g.entity_type(k) is self.start


SELF_METAPATH = Metapath(entity_seq=(), relation_seq=(), abbreviation="SELF")

# Every metapath prompts can be built for; the training default is the first six
BUILDABLE_METAPATHS = ("UU", "UI", "IU", "UIU", "UUI", "IUI", "UUU", "IUU")


def parse_metapath(abbreviation: str) -> Metapath:
    """
    Parse an abbreviation such as ``"UIU"`` into a Metapath.

    Raises:
        ValueError: For unknown letters, JJ steps (no job-job relation) or
            paths shorter than one hop
    """
    abbreviation = abbreviation.strip().upper()
    if abbreviation == "SELF":
        return SELF_METAPATH
    if len(abbreviation) < 2 or any(ch not in _LETTERS for ch in abbreviation):
        raise ValueError(f"invalid metapath {abbreviation!r}")

    entities = tuple(_LETTERS[ch] for ch in abbreviation)
    relations = []
    for a, b in zip(entities, entities[1:]):
        if a is EntityType.MEMBER and b is EntityType.MEMBER:
            relations.append(RelationType.MEMBER_MEMBER)
        elif EntityType.JOB in (a, b) and a is not b:
            relations.append(RelationType.MEMBER_JOB)
        else:
            raise ValueError(f"metapath {abbreviation!r} has a job-job step; no such relation")
    return Metapath(entity_seq=entities, relation_seq=tuple(relations), abbreviation=abbreviation)


def metapath_set(names: Sequence[str]) -> List[Metapath]:
    """Ordered metapath set Φ with the self metapath at index 0."""
    return [SELF_METAPATH] + [parse_metapath(name) for name in names]


def step_neighbors(g: HetGraph, node_id: int, phi: Metapath, index: int) -> List[int]:
    """
    Nodes reachable from ``node_id`` by step ``index`` of ``phi``.

    Forward when the step follows the relation signature, backwards otherwise
    (job→member over the member→job relation).
    """
    src_type, dst_type, rel = phi.step(index)
    if g.entity_type(node_id) is not src_type:
        return []
    if src_type is rel.source_type and dst_type is rel.target_type:
        return g.neighbors(node_id, rel)
    return g.in_neighbors(node_id, rel)


def reachable(g: HetGraph, j: int, phi: Metapath) -> Set[int]:
    """End nodes of all phi-paths starting at j (empty when j has the wrong type)."""
    if phi.is_self:
        return {j}
    if g.entity_type(j) is not phi.start:
        return set()
    frontier = {j}
    for index in range(phi.length):
        frontier = {n for node_id in frontier for n in step_neighbors(g, node_id, phi, index)}
        if not frontier:
            break
    return frontier


def metapath_exists(g: HetGraph, j: int, j2: int, phi: Metapath) -> bool:
    """
    Whether a directed path realizing ``phi`` leads from j to j2.

    Type-incompatible endpoints return False rather than raising. Round trips
    (j = j2, e.g. u→i→u) count for l >= 1.

    Raises:
        UnknownNodeError: If either node is missing
    """
    for node_id in (j, j2):
        if not g.has_node(node_id):
            raise UnknownNodeError(node_id)
    if phi.is_self:
        return j == j2
    if g.entity_type(j) is not phi.start or g.entity_type(j2) is not phi.end:
        return False
    return j2 in reachable(g, j, phi)


def compute_proximity(g: HetGraph, j: int, j2: int, phis: Sequence[Metapath]) -> np.ndarray:
    """
    Proximity vector ψ between j and j2 over an ordered metapath set.

    Args:
        g: Graph
        j: Node the generating token is associated with
        j2: Attended node
        phis: Ordered metapath set with the self metapath first

    Returns:
        uint8 vector of length len(phis); bit 0 set iff j == j2
    """
    if not phis or not phis[0].is_self:
        raise ValueError("metapath set must start with the self metapath")
    return np.array([metapath_exists(g, j, j2, phi) for phi in phis], dtype=np.uint8)


class ProximityIndex:
    """
    Cached proximity lookups for one graph and one metapath set.

    Reachable sets are memoized per (node, metapath) so repeated queries from
    the same generating node (every completion row of a feature prompt) cost
    one path expansion per metapath. The cache is shared by the trainer's
    worker threads.
    """

    def __init__(self, g: HetGraph, phis: Sequence[Metapath]):
        if not phis or not phis[0].is_self:
            raise ValueError("metapath set must start with the self metapath")
        self.g = g
        self.phis = list(phis)
        self._reach: Dict[Tuple[int, int], Set[int]] = {}
        self._lock = threading.Lock()

    def _reachable(self, j: int, index: int) -> Set[int]:
        key = (j, index)
        with self._lock:
            if key not in self._reach:
                self._reach[key] = reachable(self.g, j, self.phis[index])
            return self._reach[key]

    def cached(self) -> int:
        """Number of memoized (node, metapath) reachable sets."""
        with self._lock:
            return len(self._reach)

    def proximity(self, j: int, j2: int) -> np.ndarray:
        """Same result as compute_proximity, served from the cache."""
        for node_id in (j, j2):
            if not self.g.has_node(node_id):
                raise UnknownNodeError(node_id)
        bits = np.zeros(len(self.phis), dtype=np.uint8)
        bits[0] = j == j2
        type_j2 = self.g.entity_type(j2)
        for index in range(1, len(self.phis)):
            if self.phis[index].end is type_j2 and j2 in self._reachable(j, index):
                bits[index] = 1
        return bits


@dataclass(frozen=True)
class MetapathTriple:
    """(center, sampled intermediates, sampled end nodes) for a two-hop metapath."""

    center: int
    intermediates: Tuple[int, ...]
    ends: Tuple[int, ...]


def sample_metapath_triple(g: HetGraph, k: int, phi: Metapath, n_mid: int, n_end: int,
                           ego: Optional[EgoGraph], seed: int) -> MetapathTriple:
    """
    Sample the triple used to approximate a two-hop metapath in a prompt.

    Intermediates are drawn uniformly without replacement. End nodes are drawn
    from the multiset union of the intermediates' end-neighbors, so nodes
    reachable through several intermediates are proportionally more likely;
    the draw is without replacement over distinct nodes. The center, every
    ego-graph node and every intermediate are excluded from the ends.

    Args:
        g: Graph
        k: Center node
        phi: Two-hop metapath starting at k's type
        n_mid: Maximum number of intermediates
        n_end: Maximum number of end nodes
        ego: Ego graph whose nodes are excluded from the ends (may be None)
        seed: RNG seed

    Returns:
        MetapathTriple; ``ends`` may be empty when every candidate is excluded

    Raises:
        RelationTypeError: If phi is not a two-hop metapath compatible with k
        SkipInstance: If k has no intermediate neighbor under phi's first step
    """
    if phi.length != 2:
        raise RelationTypeError(f"metapath {phi.abbreviation} is not two-hop")
    if not phi.compatible_with(g, k):
        raise RelationTypeError(
            f"metapath {phi.abbreviation} does not start at a {g.entity_type(k).value}"
        )

    rng = np.random.default_rng(seed)
    first = step_neighbors(g, k, phi, 0)
    if not first:
        raise SkipInstance("no_intermediates", f"node {k} under {phi.abbreviation}")

    picks = rng.choice(len(first), size=min(n_mid, len(first)), replace=False)
    intermediates = tuple(sorted(first[i] for i in picks))

    excluded = {k} | set(intermediates) | (set(ego.node_ids) if ego is not None else set())
    counts: Dict[int, int] = {}
    for m in intermediates:
        for end in step_neighbors(g, m, phi, 1):
            if end not in excluded:
                counts[end] = counts.get(end, 0) + 1

    if not counts:
        return MetapathTriple(center=k, intermediates=intermediates, ends=())

    candidates = sorted(counts)
    weights = np.array([counts[c] for c in candidates], dtype=np.float64)
    drawn = rng.choice(len(candidates), size=min(n_end, len(candidates)), replace=False,
                       p=weights / weights.sum())
    return MetapathTriple(center=k, intermediates=intermediates,
                          ends=tuple(candidates[i] for i in drawn))
