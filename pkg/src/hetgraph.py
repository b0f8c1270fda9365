"""
Heterogeneous Graph Module

Storage for the job-marketplace graph: typed member/job nodes with text
features and labels, and directed typed edges (member→job interactions,
member→member follows/co-working). Backed by a NetworkX DiGraph with
node/edge attributes, plus sorted adjacency indexes for fast lookups.
"""

import json
import threading
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Literal, Optional, Set, Tuple

import networkx as nx
from pydantic import BaseModel, ConfigDict, ValidationError

from errors import GraphError, GraphParseError, GraphValidationError, RelationTypeError, UnknownNodeError


class EntityType(str, Enum):
    """Node entity type."""

    MEMBER = "member"
    JOB = "job"

    @property
    def letter(self) -> str:
        """One-letter code used in metapath abbreviations (U or I)."""
        return "U" if self is EntityType.MEMBER else "I"


class RelationType(str, Enum):
    """Directed relation type; the value is the graph-file tag."""

    MEMBER_JOB = "ui"
    MEMBER_MEMBER = "uu"

    @property
    def source_type(self) -> EntityType:
        return EntityType.MEMBER

    @property
    def target_type(self) -> EntityType:
        return EntityType.JOB if self is RelationType.MEMBER_JOB else EntityType.MEMBER


# Link-prediction tasks and the relation each one ranks
LINK_TASKS = {
    "jymbii": RelationType.MEMBER_JOB,
    "pymk": RelationType.MEMBER_MEMBER,
}


# Graph-file records; unknown keys are rejected
class NodeRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["node"]
    id: int
    type: EntityType
    features: Dict[str, str] = {}
    labels: Dict[str, int] = {}


class EdgeRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["edge"]
    rel: RelationType
    src: int
    dst: int


class HetGraph:
    """
    Heterogeneous text-attributed marketplace graph.

    The graph structure:
    - Nodes: integer ids with attributes (type, features, labels). Members
      occupy ids 1..N_U and jobs N_U+1..N_U+N_I.
    - Edges: directed, with a ``rel`` attribute (RelationType).

    The graph is treated as immutable once loaded; the adjacency indexes are
    built lazily on first lookup and shared by all readers.
    """

    def __init__(self):
        """Initialize an empty graph."""
        self.graph = nx.DiGraph()
        self._out: Optional[Dict[RelationType, Dict[int, List[int]]]] = None
        self._in: Optional[Dict[RelationType, Dict[int, List[int]]]] = None
        self._index_lock = threading.Lock()

    # Construction

    def add_node(self, node_id: int, entity_type: EntityType,
                 features: Optional[Dict[str, str]] = None,
                 labels: Optional[Dict[str, int]] = None) -> None:
        """
        Add a typed node.

        Args:
            node_id: Dense integer id
            entity_type: Member or job
            features: Optional text features by name
            labels: Optional label indices by task name

        Raises:
            GraphValidationError: If the id is already present
        """
        if node_id in self.graph:
            raise GraphValidationError(f"duplicate node id {node_id}")
        self.graph.add_node(
            node_id,
            type=EntityType(entity_type),
            features=dict(features or {}),
            labels=dict(labels or {})
        )
        self._out = self._in = None

    def add_edge(self, src: int, dst: int, rel: RelationType) -> None:
        """
        Add a directed typed edge (duplicates collapse).

        Raises:
            GraphValidationError: If an endpoint is missing, the endpoint types
                do not match the relation signature, or the edge is a self-loop
        """
        rel = RelationType(rel)
        for node_id in (src, dst):
            if node_id not in self.graph:
                raise GraphValidationError(f"edge {src}->{dst} references unknown id {node_id}")
        if src == dst:
            raise GraphValidationError(f"self-loop on node {src}")
        if self.entity_type(src) is not rel.source_type or self.entity_type(dst) is not rel.target_type:
            raise GraphValidationError(
                f"edge {src}->{dst} has types {self.entity_type(src).value}->"
                f"{self.entity_type(dst).value}, relation {rel.value} expects "
                f"{rel.source_type.value}->{rel.target_type.value}"
            )
        self.graph.add_edge(src, dst, rel=rel)
        self._out = self._in = None

    def validate(self) -> None:
        """
        Check the dense id layout: members 1..N_U, then jobs N_U+1..N.

        Raises:
            GraphValidationError: If ids are not dense or types are interleaved
        """
        ids = sorted(self.graph.nodes)
        if ids and ids != list(range(1, len(ids) + 1)):
            missing = sorted(set(range(1, len(ids) + 1)) - set(ids))
            raise GraphValidationError(f"node ids are not dense 1..{len(ids)} (missing {missing[:5]})")
        n_members = self.n_members
        for node_id in ids:
            expected = EntityType.MEMBER if node_id <= n_members else EntityType.JOB
            if self.entity_type(node_id) is not expected:
                raise GraphValidationError(
                    f"node {node_id} is a {self.entity_type(node_id).value}; members must "
                    f"occupy ids 1..{n_members} and jobs the ids after them"
                )

    # Indexes

    def _build_index(self) -> None:
        out = {rel: {} for rel in RelationType}
        inc = {rel: {} for rel in RelationType}
        for src, dst, rel in self.graph.edges(data="rel"):
            out[rel].setdefault(src, []).append(dst)
            inc[rel].setdefault(dst, []).append(src)
        for table in (out, inc):
            for rel in RelationType:
                for node_id in table[rel]:
                    table[rel][node_id].sort()
        self._out, self._in = out, inc

    def _indexes(self) -> Tuple[Dict, Dict]:
        """Out/in adjacency indexes, built once even with concurrent readers."""
        with self._index_lock:
            if self._out is None or self._in is None:
                self._build_index()
            return self._out, self._in

    def _require(self, node_id: int) -> None:
        if node_id not in self.graph:
            raise UnknownNodeError(node_id)

    # Queries

    @property
    def n_members(self) -> int:
        return sum(1 for _, t in self.graph.nodes(data="type") if t is EntityType.MEMBER)

    @property
    def n_jobs(self) -> int:
        return sum(1 for _, t in self.graph.nodes(data="type") if t is EntityType.JOB)

    @property
    def num_nodes(self) -> int:
        return self.graph.number_of_nodes()

    def node_ids(self, entity_type: Optional[EntityType] = None) -> List[int]:
        """Sorted node ids, optionally restricted to one entity type."""
        return sorted(n for n, t in self.graph.nodes(data="type")
                      if entity_type is None or t is entity_type)

    def has_node(self, node_id: int) -> bool:
        return node_id in self.graph

    def entity_type(self, node_id: int) -> EntityType:
        self._require(node_id)
        return self.graph.nodes[node_id]["type"]

    def features(self, node_id: int) -> Dict[str, str]:
        self._require(node_id)
        return self.graph.nodes[node_id]["features"]

    def feature(self, node_id: int, name: str) -> Optional[str]:
        """Text feature, or None when absent."""
        return self.features(node_id).get(name)

    def label(self, node_id: int, task: str) -> Optional[int]:
        """Label index for a task, or None when the node is unlabeled."""
        self._require(node_id)
        return self.graph.nodes[node_id]["labels"].get(task)

    def labeled_nodes(self, task: str) -> List[int]:
        """Sorted ids of nodes carrying a label for ``task``."""
        return sorted(n for n, labels in self.graph.nodes(data="labels") if task in labels)

    def tasks(self) -> List[str]:
        """Sorted names of all label tasks present in the graph."""
        names: Set[str] = set()
        for _, labels in self.graph.nodes(data="labels"):
            names.update(labels)
        return sorted(names)

    def num_classes(self, task: str) -> int:
        """Number of classes of a task (max label + 1, at least 2)."""
        values = [labels[task] for _, labels in self.graph.nodes(data="labels") if task in labels]
        return max(2, max(values) + 1) if values else 2

    def neighbors(self, node_id: int, rel: RelationType) -> List[int]:
        """
        Sorted out-neighbors of a node under a relation.

        Args:
            node_id: Source node
            rel: Relation type; its source type must match the node's type

        Returns:
            Sorted, duplicate-free list of neighbor ids

        Raises:
            UnknownNodeError: If the node does not exist
            RelationTypeError: If the node's type is not the relation's source type
        """
        rel = RelationType(rel)
        if self.entity_type(node_id) is not rel.source_type:
            raise RelationTypeError(
                f"node {node_id} is a {self.entity_type(node_id).value}; relation "
                f"{rel.value} starts at a {rel.source_type.value}"
            )
        out, _ = self._indexes()
        return list(out[rel].get(node_id, []))

    def in_neighbors(self, node_id: int, rel: RelationType) -> List[int]:
        """Sorted in-neighbors of a node under a relation (reverse traversal)."""
        rel = RelationType(rel)
        if self.entity_type(node_id) is not rel.target_type:
            raise RelationTypeError(
                f"node {node_id} is a {self.entity_type(node_id).value}; relation "
                f"{rel.value} ends at a {rel.target_type.value}"
            )
        _, inc = self._indexes()
        return list(inc[rel].get(node_id, []))

    def undirected_neighbors(self, node_id: int) -> List[int]:
        """Sorted neighbors over all relations in both directions."""
        self._require(node_id)
        return sorted(set(self.graph.successors(node_id)) | set(self.graph.predecessors(node_id)))

    def has_edge(self, src: int, dst: int, rel: RelationType) -> bool:
        return self.graph.has_edge(src, dst) and self.graph[src][dst]["rel"] is RelationType(rel)

    def edges(self, rel: Optional[RelationType] = None) -> Iterator[Tuple[int, int, RelationType]]:
        """Iterate edges as (src, dst, rel), sorted by (src, dst)."""
        for src, dst, r in sorted(self.graph.edges(data="rel"), key=lambda e: (e[0], e[1])):
            if rel is None or r is RelationType(rel):
                yield src, dst, r

    def num_edges(self, rel: Optional[RelationType] = None) -> int:
        return sum(1 for _ in self.edges(rel))

    def without_edges(self, rel: RelationType, pairs: Iterable[Tuple[int, int]]) -> "HetGraph":
        """
        Copy of the graph with the given edges of one relation removed.

        Used to build the training graph once link splits are drawn.
        """
        drop = {(src, dst) for src, dst in pairs}
        rel = RelationType(rel)
        copy = HetGraph()
        copy.graph = self.graph.copy()
        copy.graph.remove_edges_from(
            (src, dst) for src, dst in drop if self.has_edge(src, dst, rel)
        )
        return copy

    def get_stats(self) -> Dict:
        """
        Get statistics about the graph.

        Returns:
            Dictionary with node and edge counts per type
        """
        return {
            "members": self.n_members,
            "jobs": self.n_jobs,
            "member_job_edges": self.num_edges(RelationType.MEMBER_JOB),
            "member_member_edges": self.num_edges(RelationType.MEMBER_MEMBER),
            "tasks": self.tasks()
        }

    # Serialization

    def to_records(self) -> Iterator[Dict]:
        """Graph-file records: all nodes by id, then all edges by (src, dst)."""
        for node_id in self.node_ids():
            attrs = self.graph.nodes[node_id]
            yield {
                "kind": "node",
                "id": node_id,
                "type": attrs["type"].value,
                "features": attrs["features"],
                "labels": attrs["labels"]
            }
        for src, dst, rel in self.edges():
            yield {"kind": "edge", "rel": rel.value, "src": src, "dst": dst}

    def save_graph(self, filepath: str) -> None:
        """
        Save the graph as JSON Lines (UTF-8, one record per line).

        Args:
            filepath: Destination path; parent directories are created
        """
        path = Path(filepath)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for record in self.to_records():
                f.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_graph(filepath: str) -> HetGraph:
    """
    Load and validate a graph from a JSON-Lines file.

    Args:
        filepath: Path to the graph file

    Returns:
        Validated HetGraph

    Raises:
        GraphParseError: For a malformed line (line number reported)
        GraphError: If the file does not exist
        GraphValidationError: For dangling edges, type mismatches, duplicate ids
            or a non-dense id layout
    """
    nodes: List[NodeRecord] = []
    edges: List[Tuple[int, EdgeRecord]] = []

    if not Path(filepath).exists():
        raise GraphError(f"graph file not found: {filepath}")

    with open(filepath, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise GraphParseError(line_number, f"invalid JSON ({e.msg})") from e
            if not isinstance(raw, dict):
                raise GraphParseError(line_number, "record must be a JSON object")

            try:
                if raw.get("kind") == "node":
                    nodes.append(NodeRecord.model_validate(raw))
                elif raw.get("kind") == "edge":
                    edges.append((line_number, EdgeRecord.model_validate(raw)))
                else:
                    raise GraphParseError(line_number, f"unknown record kind {raw.get('kind')!r}")
            except ValidationError as e:
                raise GraphParseError(line_number, str(e).replace("\n", " ")) from e

    graph = HetGraph()
    for record in sorted(nodes, key=lambda r: r.id):
        graph.add_node(record.id, record.type, record.features, record.labels)
    graph.validate()

    for line_number, record in edges:
        try:
            graph.add_edge(record.src, record.dst, record.rel)
        except GraphValidationError as e:
            raise GraphValidationError(f"line {line_number}: {e}") from e

    return graph
