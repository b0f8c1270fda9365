import numpy as np
import pytest

from ego_graph import EgoGraph, sample_ego_graph
from errors import RelationTypeError, SkipInstance
from hetgraph import EntityType, RelationType
from metapath import ProximityIndex, compute_proximity, metapath_set, parse_metapath
from prompts import (
    LossSpace, PromptBuilder, PromptKind, SegmentTag, attention_bias_matrix, render_prompt,
)
from vocab import DEFAULT_TOKENIZER, VocabLayout


def center_only(k, depth=2):
    return EgoGraph(center=k, nodes=((k, 0),), edges=(), depth=depth)


@pytest.fixture
def builder(toy_graph):
    return PromptBuilder(toy_graph, VocabLayout.for_graph(toy_graph))


def node_ids(instance, layout, completion=False):
    start = instance.prompt_length
    span = range(start, len(instance)) if completion else range(start)
    return [layout.node_of(instance.tokens[t]) for t in span if instance.is_node[t]]


def check_integrity(instance, layout):
    """Parallel arrays agree and completion tokens form a suffix."""
    n = len(instance)
    assert len(instance.node_assoc) == len(instance.segments) == len(instance.hops) == n
    completion = [t for t in range(n) if instance.segments[t] is SegmentTag.COMPLETION]
    assert completion == list(range(instance.prompt_length, n))
    for t in range(n):
        assert instance.is_node[t] == layout.is_node_token(instance.tokens[t])
        if instance.is_node[t]:
            assert instance.node_assoc[t] == layout.node_of(instance.tokens[t])
        else:
            assert instance.hops[t] == 0


def test_feature_prompt(builder, toy_graph):
    ego = sample_ego_graph(toy_graph, 1, depth=2, fanout=5, seed=0)
    instance = builder.build_feature_prompt(ego, 1, "biography")
    check_integrity(instance, builder.layout)
    assert instance.kind is PromptKind.FEATURE
    assert instance.loss_space is LossSpace.TEXT_ONLY
    assert DEFAULT_TOKENIZER.decode(instance.targets) == toy_graph.feature(1, "biography")
    assert all(instance.node_assoc[t] == 1 for t in range(instance.prompt_length, len(instance)))
    assert set(node_ids(instance, builder.layout)) == set(ego.node_ids)


def test_ego_tokens_ordered_by_hop(builder, toy_graph):
    ego = sample_ego_graph(toy_graph, 1, depth=2, fanout=5, seed=0)
    instance = builder.build_feature_prompt(ego, 1, "headline")
    listed = [(instance.hops[t], instance.node_assoc[t]) for t in range(len(instance))
              if instance.segments[t] is SegmentTag.EGO_GRAPH and instance.is_node[t]]
    assert listed == [(0, 1), (1, 2), (1, 5), (1, 6), (2, 3)]


def test_feature_truncation(toy_graph):
    builder = PromptBuilder(toy_graph, VocabLayout.for_graph(toy_graph), max_feature_bytes=10)
    instance = builder.build_feature_prompt(center_only(1), 1, "biography")
    assert instance.n_targets == 10


def test_missing_feature_is_skipped(builder):
    with pytest.raises(SkipInstance) as info:
        builder.build_feature_prompt(center_only(5), 5, "biography")
    assert info.value.reason == "missing_feature"


def test_center_mismatch(builder):
    with pytest.raises(ValueError):
        builder.build_feature_prompt(center_only(2), 1, "biography")


def test_text_prompt_has_no_node_tokens(builder, toy_graph):
    instance = builder.build_text_prompt(5, "description")
    assert not any(instance.is_node)
    assert instance.tokens[0] == 257
    assert DEFAULT_TOKENIZER.decode(instance.targets) == toy_graph.feature(5, "description")


def test_first_order_excludes_ego_nodes(builder, toy_graph):
    ui = parse_metapath("UI")
    instance = builder.build_first_order_prompt(center_only(1), 1, ui, n_end=5, seed=3)
    check_integrity(instance, builder.layout)
    assert sorted(node_ids(instance, builder.layout, completion=True)) == [5, 6]
    assert instance.loss_space is LossSpace.JOB_ONLY

    ego = sample_ego_graph(toy_graph, 1, depth=2, fanout=5, seed=0)
    with pytest.raises(SkipInstance) as info:
        builder.build_first_order_prompt(ego, 1, ui, n_end=5, seed=3)
    assert info.value.reason == "no_targets"


def test_first_order_limits_ends(builder):
    instance = builder.build_first_order_prompt(center_only(1), 1, parse_metapath("UI"), n_end=1, seed=0)
    assert instance.n_targets == 1


def test_first_order_rejects_incompatible(builder):
    with pytest.raises(RelationTypeError):
        builder.build_first_order_prompt(center_only(5), 5, parse_metapath("UI"), n_end=2, seed=0)
    with pytest.raises(RelationTypeError):
        builder.build_first_order_prompt(center_only(1), 1, parse_metapath("UIU"), n_end=2, seed=0)


def test_higher_order_prompt(builder):
    instance = builder.build_higher_order_prompt(center_only(1), 1, parse_metapath("UIU"),
                                                 n_mid=3, n_end=3, seed=0)
    check_integrity(instance, builder.layout)
    assert node_ids(instance, builder.layout, completion=True) == [2]
    assert instance.loss_space is LossSpace.MEMBER_ONLY
    middle = [instance.node_assoc[t] for t in range(len(instance))
              if instance.segments[t] is SegmentTag.INTERMEDIATE_RELATION and instance.is_node[t]]
    assert middle[0] == 1
    assert set(middle[1:]) <= {5, 6}
    assert instance.hops[-1] == 2


def test_node_task_prompt(builder, toy_graph):
    ego = sample_ego_graph(toy_graph, 1, depth=2, fanout=5, seed=0)
    instance = builder.build_node_task_prompt(ego, 1, "coding")
    check_integrity(instance, builder.layout)
    assert instance.n_targets == 0
    assert instance.label == 1
    question = builder.task_question("coding")
    assert DEFAULT_TOKENIZER.decode(instance.tokens[-len(question):]) == question
    assert any(s is SegmentTag.FEATURE for s in instance.segments)


def test_node_task_without_features(builder):
    instance = builder.build_node_task_prompt(center_only(5), 5, "coding")
    assert not any(s is SegmentTag.FEATURE for s in instance.segments)
    assert instance.label is None


def test_link_prompt_hides_heldout(builder, toy_graph):
    ego = sample_ego_graph(toy_graph, 1, depth=2, fanout=5, seed=0)
    instance, heldout = builder.build_link_task_prompt(ego, 1, RelationType.MEMBER_JOB, 0.5, seed=1)
    check_integrity(instance, builder.layout)
    assert len(heldout) == 1 and heldout <= {5, 6}
    assert instance.heldout == heldout
    shown = set(node_ids(instance, builder.layout))
    assert not shown & heldout
    assert not any(n in instance.ego for n in heldout)
    assert ({5, 6} - heldout) <= shown


def test_link_prompt_without_masking(builder, toy_graph):
    ego = sample_ego_graph(toy_graph, 1, depth=2, fanout=5, seed=0)
    instance, heldout = builder.build_link_task_prompt(ego, 1, RelationType.MEMBER_JOB, 0.0, seed=1)
    assert heldout == frozenset()
    assert {5, 6} <= set(node_ids(instance, builder.layout))


def test_link_prompt_needs_two_neighbors(builder):
    with pytest.raises(SkipInstance) as info:
        builder.build_link_task_prompt(center_only(3), 3, RelationType.MEMBER_JOB, 0.5, seed=0)
    assert info.value.reason == "too_few_neighbors"


@pytest.mark.parametrize("ratio", [0.1, 0.5, 0.9])
def test_mask_count(small_graph, ratio):
    builder = PromptBuilder(small_graph, VocabLayout.for_graph(small_graph))
    checked = 0
    for k in small_graph.node_ids(EntityType.MEMBER):
        n = len(small_graph.neighbors(k, RelationType.MEMBER_JOB))
        if n < 2:
            continue
        _, heldout = builder.build_link_task_prompt(center_only(k), k, RelationType.MEMBER_JOB, ratio, seed=k)
        assert len(heldout) == min(max(int(np.floor(ratio * n + 0.5)), 1), n - 1)
        checked += 1
    assert checked > 0


def test_bias_matrix(builder, toy_graph):
    phis = metapath_set(["UU", "UI", "IU", "UIU", "UUI", "IUI"])
    index = ProximityIndex(toy_graph, phis)
    ego = sample_ego_graph(toy_graph, 1, depth=2, fanout=5, seed=0)
    instance = builder.build_feature_prompt(ego, 1, "headline")
    bias = attention_bias_matrix(instance, index)

    assert list(bias.rows) == list(range(instance.prompt_length, len(instance)))
    assert all(instance.is_node[c] for c in bias.cols)
    dense = bias.dense(len(instance))
    text_cols = [t for t in range(len(instance)) if not instance.is_node[t]]
    assert not dense[:, text_cols].any()
    for r, t in enumerate(bias.rows):
        for c, t2 in enumerate(bias.cols):
            expected = compute_proximity(toy_graph, 1, instance.node_assoc[t2], phis)
            assert np.array_equal(bias.psi[r, c], expected)
    # self metapath marks exactly the center's own token
    self_cols = {bias.cols[c] for c in np.flatnonzero(bias.psi[0, :, 0])}
    assert {instance.node_assoc[t] for t in self_cols} == {1}


def test_render_prompt(builder):
    instance = builder.build_first_order_prompt(center_only(1), 1, parse_metapath("UI"), n_end=5, seed=3)
    rendered = render_prompt(instance, builder.layout)
    assert rendered["kind"] == "structure"
    assert rendered["loss_space"] == "job"
    assert sorted(rendered["targets"]) == ["<job_5>", "<job_6>"]
    assert rendered["runs"][0] == {"segment": "instruction", "text": "Given an ego-network in a job marketplace: "}
