"""
Vocabulary Module

Byte-level tokenizer, the unified vocabulary layout (text tokens, then one
token per graph node, then per-task class tokens) and the composed node-token
embedding: feature row + entity-type row + hop-distance row.
"""

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from autodiff import Tensor
from ego_graph import EgoGraph
from errors import UnknownNodeError, VocabError
from hetgraph import EntityType, HetGraph


N_BYTES = 256
SPECIAL_TOKENS = {"<pad>": 256, "<bos>": 257, "<eos>": 258, "<sep>": 259}
V_TEXT = N_BYTES + len(SPECIAL_TOKENS)

# Row of the entity table used for each type
ENTITY_INDEX = {EntityType.MEMBER: 0, EntityType.JOB: 1}


class Tokenizer(Protocol):
    """Anything that maps text to ids in [0, vocab_size) and back."""

    vocab_size: int

    def encode(self, text: str) -> List[int]: ...

    def decode(self, ids: Sequence[int]) -> str: ...


class ByteTokenizer:
    """One token per UTF-8 byte, plus four special tokens after the bytes."""

    vocab_size = V_TEXT

    def encode(self, text: str) -> List[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: Sequence[int]) -> str:
        """
        Decode ids back to text; special tokens are dropped.

        Raises:
            VocabError: On any id outside the text range
        """
        data = bytearray()
        for token in ids:
            token = int(token)
            if token < 0 or token >= self.vocab_size:
                raise VocabError(f"token id {token} is not a text token")
            if token < N_BYTES:
                data.append(token)
        return data.decode("utf-8", errors="replace")


DEFAULT_TOKENIZER = ByteTokenizer()


def tokenize_text(text: str, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> List[int]:
    return tokenizer.encode(text)


def detokenize(ids: Sequence[int], tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> str:
    return tokenizer.decode(ids)


@dataclass(frozen=True)
class VocabLayout:
    """
    Partition of [0, V_total) into text, node and class token ranges.

    Node ids 1..N map to tokens V_text..V_text+N-1 (members first, since the
    graph keeps members at ids 1..N_U). Class ranges follow in task order.
    """

    v_text: int
    n_members: int
    n_jobs: int
    class_counts: Tuple[Tuple[str, int], ...] = ()

    @property
    def n_nodes(self) -> int:
        return self.n_members + self.n_jobs

    @property
    def text_range(self) -> Tuple[int, int]:
        return 0, self.v_text

    @property
    def node_range(self) -> Tuple[int, int]:
        return self.v_text, self.v_text + self.n_nodes

    @property
    def member_range(self) -> Tuple[int, int]:
        return self.v_text, self.v_text + self.n_members

    @property
    def job_range(self) -> Tuple[int, int]:
        return self.v_text + self.n_members, self.v_text + self.n_nodes

    @property
    def class_ranges(self) -> Dict[str, Tuple[int, int]]:
        ranges = {}
        start = self.node_range[1]
        for task, count in self.class_counts:
            ranges[task] = (start, start + count)
            start += count
        return ranges

    @property
    def v_total(self) -> int:
        return self.node_range[1] + sum(count for _, count in self.class_counts)

    def node_token_id(self, node_id: int) -> int:
        if not 1 <= node_id <= self.n_nodes:
            raise UnknownNodeError(node_id, where="vocabulary")
        return self.v_text + node_id - 1

    def node_of(self, token: int) -> int:
        start, end = self.node_range
        if not start <= token < end:
            raise VocabError(f"token id {token} is not a node token")
        return token - self.v_text + 1

    def is_node_token(self, token: int) -> bool:
        start, end = self.node_range
        return start <= token < end

    def entity_of(self, token: int) -> EntityType:
        """Entity type of the node a node token stands for."""
        return EntityType.MEMBER if self.node_of(token) <= self.n_members else EntityType.JOB

    def range_for(self, entity_type: EntityType) -> Tuple[int, int]:
        return self.member_range if entity_type is EntityType.MEMBER else self.job_range

    def token_name(self, token: int) -> str:
        """Readable name for a non-byte token, e.g. ``<member_3>``."""
        if self.is_node_token(token):
            node_id = self.node_of(token)
            if node_id <= self.n_members:
                return f"<member_{node_id}>"
            return f"<job_{node_id}>"
        for name, special in SPECIAL_TOKENS.items():
            if special == token:
                return name
        for task, (start, end) in self.class_ranges.items():
            if start <= token < end:
                return f"<{task}_{token - start}>"
        raise VocabError(f"token id {token} outside vocabulary of size {self.v_total}")

    def to_manifest(self) -> Dict:
        return {
            "v_text": self.v_text,
            "n_members": self.n_members,
            "n_jobs": self.n_jobs,
            "class_counts": [[task, count] for task, count in self.class_counts],
        }

    @classmethod
    def from_manifest(cls, manifest: Mapping) -> "VocabLayout":
        return cls(
            v_text=int(manifest["v_text"]),
            n_members=int(manifest["n_members"]),
            n_jobs=int(manifest["n_jobs"]),
            class_counts=tuple((str(t), int(c)) for t, c in manifest["class_counts"]),
        )

    @classmethod
    def for_graph(cls, g: HetGraph, tasks: Optional[Sequence[str]] = None,
                  tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> "VocabLayout":
        """Layout for a graph; class ranges for every node-label task (sorted)."""
        names = sorted(g.tasks() if tasks is None else tasks)
        return cls(
            v_text=tokenizer.vocab_size,
            n_members=g.n_members,
            n_jobs=g.n_jobs,
            class_counts=tuple((task, g.num_classes(task)) for task in names),
        )


@dataclass
class EmbeddingTables:
    """Input embedding tables; all rows have dimension K = d_model."""

    text_embed: Tensor
    Z: Tensor
    E: Tensor
    P: Tensor

    def check(self, layout: VocabLayout, depth: int) -> None:
        """
        Raises:
            VocabError: If a row count disagrees with the layout or depth
        """
        expected = {
            "text_embed": layout.v_text,
            "Z": layout.n_nodes,
            "E": len(ENTITY_INDEX),
            "P": depth + 1,
        }
        dims = set()
        for name, rows in expected.items():
            table = getattr(self, name)
            if table.shape[0] != rows:
                raise VocabError(f"{name} has {table.shape[0]} rows, expected {rows}")
            dims.add(table.shape[1])
        if len(dims) != 1:
            raise VocabError(f"embedding tables disagree on dimension: {sorted(dims)}")


def init_embedding_tables(layout: VocabLayout, d_model: int, depth: int,
                          rng: np.random.Generator, std: float = 0.02,
                          dtype=np.float32) -> EmbeddingTables:
    """Gaussian-initialized tables for a layout."""

    def table(rows: int, name: str) -> Tensor:
        values = rng.normal(0.0, std, size=(rows, d_model)).astype(dtype)
        return Tensor(values, requires_grad=True, name=name)

    return EmbeddingTables(
        text_embed=table(layout.v_text, "text_embed"),
        Z=table(layout.n_nodes, "Z"),
        E=table(len(ENTITY_INDEX), "E"),
        P=table(depth + 1, "P"),
    )


def compose_node_embedding(tables: EmbeddingTables, g: HetGraph, node_id: int,
                           ego: EgoGraph) -> Tensor:
    """
    Input embedding of one node token: z_i + e_type(i) + p_dist(i, center).

    Args:
        tables: Embedding tables
        g: Graph (for the node's entity type)
        node_id: Node i
        ego: Ego graph holding the hop distance

    Returns:
        K-vector Tensor on the tape

    Raises:
        UnknownNodeError: If i is not in the ego graph
        VocabError: If the distance exceeds the positional table
    """
    dist = ego.distance(node_id)
    if dist >= tables.P.shape[0]:
        raise VocabError(f"node {node_id} is {dist} hops from the center; "
                         f"positional table covers 0..{tables.P.shape[0] - 1}")
    return (tables.Z[node_id - 1]
            + tables.E[ENTITY_INDEX[g.entity_type(node_id)]]
            + tables.P[dist])
