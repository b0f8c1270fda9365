"""
Prompt Construction Module

Builds ego-graph prompts as token sequences for the five prompt kinds:
feature modeling, first-order and higher-order structural modeling, node
tasks and link tasks. Every token carries a segment tag, an optional node
association (used by attention alignment) and a hop index (used for the
positional embedding of node tokens).

Builders are pure functions of (graph, ego graph, seed) and signal an
unusable instance by raising SkipInstance with a reason tag.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from ego_graph import EgoGraph
from errors import RelationTypeError, SkipInstance
from hetgraph import EntityType, HetGraph, RelationType
from metapath import Metapath, ProximityIndex, sample_metapath_triple, step_neighbors
from prompt_templates import (
    FEATURE_QUESTION, FINAL_RELATION_QUESTIONS, INSTRUCTION, LINK_OBSERVED, LINK_QUESTIONS,
    MULTI_SKILL_QUESTION, RELATION_QUESTIONS, SEGMENT_BREAK, TASK_QUESTIONS,
    BINARY_SKILL_QUESTION,
)
from vocab import DEFAULT_TOKENIZER, SPECIAL_TOKENS, Tokenizer, VocabLayout


class SegmentTag(str, Enum):
    INSTRUCTION = "instruction"
    EGO_GRAPH = "ego_graph"
    INTERMEDIATE_RELATION = "intermediate_relation"
    FEATURE = "feature"
    QUESTION = "question"
    COMPLETION = "completion"


class LossSpace(str, Enum):
    """Token subset a completion (or link target) is normalized over."""

    TEXT_ONLY = "text"
    MEMBER_ONLY = "member"
    JOB_ONLY = "job"


class PromptKind(str, Enum):
    FEATURE = "feature"
    STRUCTURE = "structure"
    NODE_TASK = "node_task"
    LINK_TASK = "link_task"


def loss_space_for(entity_type: EntityType) -> LossSpace:
    return LossSpace.MEMBER_ONLY if entity_type is EntityType.MEMBER else LossSpace.JOB_ONLY


@dataclass(frozen=True)
class PromptInstance:
    """
    One prompt (plus completion for language-modeling kinds).

    Attributes:
        kind: Which objective the instance feeds
        tokens: Full token sequence, prompt then completion
        node_assoc: Per-token associated node id or None
        segments: Per-token segment tag; completion tokens form a suffix
        hops: Per-token hop index for node tokens (0 for text tokens)
        is_node: Per-token flag, True for node tokens
        n_targets: Length of the completion suffix
        loss_space: Restriction for completion targets / link targets
        ego: Ego graph the prompt was built from
        name: Feature, metapath or task name
        label: Class index for node tasks (None when unlabeled)
        heldout: Held-out neighbors for link tasks
    """

    kind: PromptKind
    tokens: Tuple[int, ...]
    node_assoc: Tuple[Optional[int], ...]
    segments: Tuple[SegmentTag, ...]
    hops: Tuple[int, ...]
    is_node: Tuple[bool, ...]
    n_targets: int
    loss_space: Optional[LossSpace]
    ego: EgoGraph
    name: str = ""
    label: Optional[int] = None
    heldout: FrozenSet[int] = field(default_factory=frozenset)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def center(self) -> int:
        return self.ego.center

    @property
    def prompt_length(self) -> int:
        return len(self.tokens) - self.n_targets

    @property
    def targets(self) -> Tuple[int, ...]:
        return self.tokens[self.prompt_length:]

    @property
    def prompt_tokens(self) -> Tuple[int, ...]:
        return self.tokens[:self.prompt_length]


class _Sequence:
    """Accumulates parallel token/assoc/segment/hop lists."""

    def __init__(self, builder: "PromptBuilder"):
        self.builder = builder
        self.tokens: List[int] = []
        self.assoc: List[Optional[int]] = []
        self.segments: List[SegmentTag] = []
        self.hops: List[int] = []
        self.is_node: List[bool] = []

    def text(self, text: str, segment: SegmentTag, assoc: Optional[int] = None) -> None:
        self.text_ids(self.builder.tokenizer.encode(text), segment, assoc)

    def text_ids(self, ids: Sequence[int], segment: SegmentTag, assoc: Optional[int] = None) -> None:
        self.tokens.extend(ids)
        self.assoc.extend([assoc] * len(ids))
        self.segments.extend([segment] * len(ids))
        self.hops.extend([0] * len(ids))
        self.is_node.extend([False] * len(ids))

    def node(self, node_id: int, segment: SegmentTag, hop: int) -> None:
        self.tokens.append(self.builder.layout.node_token_id(node_id))
        self.assoc.append(node_id)
        self.segments.append(segment)
        self.hops.append(min(hop, self.builder.depth))
        self.is_node.append(True)

    def build(self, kind: PromptKind, n_targets: int, loss_space: Optional[LossSpace],
              ego: EgoGraph, **extra) -> PromptInstance:
        return PromptInstance(
            kind=kind,
            tokens=tuple(self.tokens),
            node_assoc=tuple(self.assoc),
            segments=tuple(self.segments),
            hops=tuple(self.hops),
            is_node=tuple(self.is_node),
            n_targets=n_targets,
            loss_space=loss_space,
            ego=ego,
            **extra
        )


class PromptBuilder:
    """
    Builds PromptInstances for one graph and vocabulary layout.

    Ego-graph nodes are listed by ascending hop, members before jobs, then
    ascending id.
    """

    def __init__(self, g: HetGraph, layout: VocabLayout, depth: int = 2,
                 tokenizer: Tokenizer = DEFAULT_TOKENIZER, max_feature_bytes: int = 96):
        """
        Args:
            g: Graph the prompts describe (the training graph during training)
            layout: Vocabulary layout for node tokens
            depth: Ego depth D; hop indices are clamped to it
            tokenizer: Text tokenizer
            max_feature_bytes: Feature texts are cut to this many bytes
        """
        self.g = g
        self.layout = layout
        self.depth = depth
        self.tokenizer = tokenizer
        self.max_feature_bytes = max_feature_bytes

    # Shared pieces

    def _ego_order(self, ego: EgoGraph) -> List[Tuple[int, int]]:
        member_first = {EntityType.MEMBER: 0, EntityType.JOB: 1}
        return sorted(ego.nodes, key=lambda nd: (nd[1], member_first[self.g.entity_type(nd[0])], nd[0]))

    def _preamble(self, ego: EgoGraph) -> _Sequence:
        seq = _Sequence(self)
        seq.text(INSTRUCTION, SegmentTag.INSTRUCTION)
        for node_id, hop in self._ego_order(ego):
            seq.node(node_id, SegmentTag.EGO_GRAPH, hop)
        seq.text(SEGMENT_BREAK, SegmentTag.EGO_GRAPH)
        return seq

    def _feature_ids(self, k: int, feature: str) -> List[int]:
        text = self.g.feature(k, feature)
        if not text:
            return []
        ids = self.tokenizer.encode(text)
        return ids[:self.max_feature_bytes]

    @staticmethod
    def _require_center(ego: EgoGraph, k: int) -> None:
        if ego.center != k:
            raise ValueError(f"node {k} is not the center of the ego graph (center {ego.center})")

    # Feature modeling

    def build_feature_prompt(self, ego: EgoGraph, k: int, feature: str) -> PromptInstance:
        """
        Feature-modeling prompt: the completion is the center's feature text.

        Raises:
            SkipInstance: If k has no (or an empty) value for the feature
        """
        self._require_center(ego, k)
        completion = self._feature_ids(k, feature)
        if not completion:
            raise SkipInstance("missing_feature", f"node {k} has no {feature}")

        entity = self.g.entity_type(k).value
        before, after = FEATURE_QUESTION
        seq = self._preamble(ego)
        seq.text(before.format(feature=feature, entity=entity), SegmentTag.QUESTION)
        seq.node(k, SegmentTag.QUESTION, 0)
        seq.text(after, SegmentTag.QUESTION)
        seq.text_ids(completion, SegmentTag.COMPLETION, assoc=k)
        return seq.build(PromptKind.FEATURE, len(completion), LossSpace.TEXT_ONLY, ego, name=feature)

    def build_text_prompt(self, k: int, feature: str) -> PromptInstance:
        """
        Plain text instance ``<bos>`` + feature text, used for backbone
        pretraining. Contains no node tokens.

        Raises:
            SkipInstance: If k has no (or an empty) value for the feature
        """
        completion = self._feature_ids(k, feature)
        if not completion:
            raise SkipInstance("missing_feature", f"node {k} has no {feature}")
        seq = _Sequence(self)
        seq.text_ids([SPECIAL_TOKENS["<bos>"]], SegmentTag.INSTRUCTION)
        seq.text_ids(completion, SegmentTag.COMPLETION, assoc=k)
        ego = EgoGraph(center=k, nodes=((k, 0),), edges=(), depth=self.depth)
        return seq.build(PromptKind.FEATURE, len(completion), LossSpace.TEXT_ONLY, ego, name=feature)

    # Structural modeling

    def build_first_order_prompt(self, ego: EgoGraph, k: int, phi: Metapath, n_end: int,
                                 seed: int) -> PromptInstance:
        """
        One-hop structural prompt; completion lists phi-neighbors of k that
        are not in the ego graph, in random order.

        Raises:
            RelationTypeError: If phi is not one-hop or does not start at k's type
            SkipInstance: If no neighbor outside the ego graph exists
        """
        self._require_center(ego, k)
        if phi.length != 1 or not phi.compatible_with(self.g, k):
            raise RelationTypeError(f"metapath {phi.abbreviation} is not a one-hop path from node {k}")

        candidates = [n for n in step_neighbors(self.g, k, phi, 0) if n not in ego]
        if not candidates:
            raise SkipInstance("no_targets", f"node {k} under {phi.abbreviation}")

        rng = np.random.default_rng(seed)
        picks = rng.choice(len(candidates), size=min(n_end, len(candidates)), replace=False)
        ends = [candidates[i] for i in rng.permutation(picks)]

        before, after = RELATION_QUESTIONS[phi.abbreviation]
        seq = self._preamble(ego)
        seq.text(before, SegmentTag.QUESTION)
        seq.node(k, SegmentTag.QUESTION, 0)
        seq.text(after, SegmentTag.QUESTION)
        for node_id in ends:
            seq.node(node_id, SegmentTag.COMPLETION, 1)
        return seq.build(PromptKind.STRUCTURE, len(ends), loss_space_for(phi.end), ego,
                         name=phi.abbreviation)

    def build_higher_order_prompt(self, ego: EgoGraph, k: int, phi: Metapath, n_mid: int,
                                  n_end: int, seed: int) -> PromptInstance:
        """
        Two-hop structural prompt: the first relation step and its sampled
        intermediates are spelled out, the final step is the question.

        Raises:
            RelationTypeError: If phi is not two-hop or does not start at k's type
            SkipInstance: If the triple has no intermediates or no end nodes
        """
        self._require_center(ego, k)
        triple = sample_metapath_triple(self.g, k, phi, n_mid, n_end, ego, seed)
        if not triple.ends:
            raise SkipInstance("no_targets", f"node {k} under {phi.abbreviation}")

        rng = np.random.default_rng(seed)
        ends = [triple.ends[i] for i in rng.permutation(len(triple.ends))]

        before, after = RELATION_QUESTIONS[phi.abbreviation[:2]]
        seq = self._preamble(ego)
        seq.text(before, SegmentTag.INTERMEDIATE_RELATION)
        seq.node(k, SegmentTag.INTERMEDIATE_RELATION, 0)
        seq.text(after + " ", SegmentTag.INTERMEDIATE_RELATION)
        for node_id in triple.intermediates:
            seq.node(node_id, SegmentTag.INTERMEDIATE_RELATION, 1)
        seq.text(" " + FINAL_RELATION_QUESTIONS[phi.abbreviation[1:]], SegmentTag.QUESTION)
        for node_id in ends:
            seq.node(node_id, SegmentTag.COMPLETION, phi.length)
        return seq.build(PromptKind.STRUCTURE, len(ends), loss_space_for(phi.end), ego,
                         name=phi.abbreviation)

    # Downstream tasks

    def task_question(self, task: str) -> str:
        """Question text for a node task; unknown binary tasks ask about a skill."""
        if task in TASK_QUESTIONS:
            return TASK_QUESTIONS[task]
        if task in self.g.tasks() and self.g.num_classes(task) == 2:
            return BINARY_SKILL_QUESTION.format(name=task)
        return MULTI_SKILL_QUESTION

    def build_node_task_prompt(self, ego: EgoGraph, k: int, task: str,
                               features: Sequence[str] = ("biography",)) -> PromptInstance:
        """
        Node-task prompt ending at the question; the class head reads the last
        hidden state. The feature segment is omitted when k has none of the
        requested features; several features are joined with ``<sep>``.
        """
        self._require_center(ego, k)
        seq = self._preamble(ego)
        entity = self.g.entity_type(k).value
        before, after = FEATURE_QUESTION

        written = 0
        for feature in features:
            ids = self._feature_ids(k, feature)
            if not ids:
                continue
            if written:
                seq.text_ids([SPECIAL_TOKENS["<sep>"]], SegmentTag.FEATURE)
            seq.text(before.format(feature=feature, entity=entity), SegmentTag.FEATURE)
            seq.node(k, SegmentTag.FEATURE, 0)
            seq.text(after + " ", SegmentTag.FEATURE)
            seq.text_ids(ids, SegmentTag.FEATURE)
            written += 1
        if written:
            seq.text(SEGMENT_BREAK, SegmentTag.FEATURE)

        seq.text(self.task_question(task), SegmentTag.QUESTION)
        return seq.build(PromptKind.NODE_TASK, 0, None, ego, name=task,
                         label=self.g.label(k, task))

    def build_link_task_prompt(self, ego: EgoGraph, k: int, rel: RelationType,
                               mask_ratio: float, seed: int) -> Tuple[PromptInstance, FrozenSet[int]]:
        """
        Link-task prompt listing k's observed neighbors under ``rel``.

        With mask_ratio > 0 a random subset of the neighbors is held out and
        returned as the target set; held-out nodes are also pruned from the
        ego graph. With mask_ratio = 0 every neighbor is shown and nothing is
        held out (prediction time).

        Returns:
            (PromptInstance, held-out neighbor set)

        Raises:
            RelationTypeError: If k is not a member
            SkipInstance: If masking is requested and k has fewer than two neighbors
        """
        self._require_center(ego, k)
        rel = RelationType(rel)
        neighbors = self.g.neighbors(k, rel)

        heldout: FrozenSet[int] = frozenset()
        if mask_ratio > 0:
            n = len(neighbors)
            if n < 2:
                raise SkipInstance("too_few_neighbors", f"node {k} has {n} {rel.value} neighbors")
            n_mask = min(max(int(np.floor(mask_ratio * n + 0.5)), 1), n - 1)
            rng = np.random.default_rng(seed)
            heldout = frozenset(neighbors[i] for i in rng.choice(n, size=n_mask, replace=False))
            ego = ego.without(heldout)
        shown = [n for n in neighbors if n not in heldout]

        before, after = LINK_OBSERVED[rel.value]
        seq = self._preamble(ego)
        seq.text(before, SegmentTag.INTERMEDIATE_RELATION)
        seq.node(k, SegmentTag.INTERMEDIATE_RELATION, 0)
        seq.text(after, SegmentTag.INTERMEDIATE_RELATION)
        for node_id in shown:
            seq.node(node_id, SegmentTag.INTERMEDIATE_RELATION, 1)
        seq.text(SEGMENT_BREAK + LINK_QUESTIONS[rel.value], SegmentTag.QUESTION)

        instance = seq.build(PromptKind.LINK_TASK, 0, loss_space_for(rel.target_type), ego,
                             name=rel.value, heldout=heldout)
        return instance, heldout


@dataclass(frozen=True)
class BiasMatrix:
    """
    Sparse proximity vectors for (generating row, attended column) pairs.

    Attributes:
        rows: Generating positions (completion tokens with a node association)
        cols: Attended node-token positions
        psi: uint8 array (len(rows), len(cols), |Φ|); zero where t' > t
    """

    rows: Tuple[int, ...]
    cols: Tuple[int, ...]
    psi: np.ndarray

    @property
    def is_empty(self) -> bool:
        return not self.rows or not self.cols or not self.psi.any()

    def dense(self, length: int) -> np.ndarray:
        """Full (T, T, |Φ|) array with zero vectors outside rows × cols."""
        out = np.zeros((length, length, self.psi.shape[-1]), dtype=np.uint8)
        if self.rows and self.cols:
            out[np.ix_(self.rows, self.cols)] = self.psi
        return out


def attention_bias_matrix(instance: PromptInstance, index: ProximityIndex,
                          include_completion_keys: bool = True) -> BiasMatrix:
    """
    Proximity vectors between each generating completion position and the
    node tokens it may attend to.

    Rows are completion positions with a node association (every feature-text
    token is associated with the center, every completion node token with
    itself). Columns are prompt node tokens and, optionally, completion node
    tokens at or before the row. Text columns never appear, so their bias is
    always zero.

    Args:
        instance: Prompt instance
        index: Proximity cache for the graph and the ordered metapath set
        include_completion_keys: Also bias attention onto earlier completion nodes

    Returns:
        BiasMatrix
    """
    start = instance.prompt_length
    rows = [t for t in range(start, len(instance)) if instance.node_assoc[t] is not None]
    cols = [
        t for t in range(len(instance))
        if instance.is_node[t] and (t < start or include_completion_keys)
    ]

    psi = np.zeros((len(rows), len(cols), len(index.phis)), dtype=np.uint8)
    for r, t in enumerate(rows):
        j = instance.node_assoc[t]
        for c, t2 in enumerate(cols):
            if t2 <= t:
                psi[r, c] = index.proximity(j, instance.node_assoc[t2])
    return BiasMatrix(rows=tuple(rows), cols=tuple(cols), psi=psi)


def render_prompt(instance: PromptInstance, layout: VocabLayout,
                  tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> Dict:
    """
    Human-readable rendering of an instance for debug dumps.

    Consecutive text tokens of one segment are decoded into a single run;
    node tokens render as ``<member_i>``/``<job_i>``.
    """
    runs = []
    pending: List[int] = []
    pending_segment: Optional[SegmentTag] = None

    def flush():
        if pending:
            runs.append({"segment": pending_segment.value, "text": tokenizer.decode(pending)})
            pending.clear()

    for t, token in enumerate(instance.tokens):
        segment = instance.segments[t]
        if instance.is_node[t] or token >= 256:
            flush()
            runs.append({
                "segment": segment.value,
                "token": layout.token_name(token),
                "assoc": instance.node_assoc[t],
                "hop": instance.hops[t],
            })
        else:
            if segment is not pending_segment:
                flush()
            pending_segment = segment
            pending.append(token)
    flush()

    return {
        "kind": instance.kind.value,
        "name": instance.name,
        "center": instance.center,
        "length": len(instance),
        "runs": runs,
        "targets": (tokenizer.decode(instance.targets) if instance.loss_space is LossSpace.TEXT_ONLY
                    else [layout.token_name(t) for t in instance.targets]),
        "loss_space": instance.loss_space.value if instance.loss_space else None,
        "label": instance.label,
        "heldout": sorted(instance.heldout),
    }
