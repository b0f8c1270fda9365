import numpy as np
import pytest

from ego_graph import sample_ego_graph
from errors import UnknownNodeError, VocabError
from hetgraph import EntityType
from vocab import (
    SPECIAL_TOKENS, V_TEXT, ByteTokenizer, VocabLayout, compose_node_embedding, detokenize,
    init_embedding_tables, tokenize_text,
)


def test_special_tokens_follow_bytes():
    assert SPECIAL_TOKENS == {"<pad>": 256, "<bos>": 257, "<eos>": 258, "<sep>": 259}
    assert V_TEXT == 260


def test_tokenize_detokenize():
    text = "experienced in sql, naïve budgeting"
    ids = tokenize_text(text)
    assert all(0 <= i < 256 for i in ids)
    assert detokenize(ids) == text
    assert detokenize([257] + ids + [258]) == text


def test_detokenize_rejects_non_text_ids():
    with pytest.raises(VocabError, match="300"):
        ByteTokenizer().decode([65, 300])
    with pytest.raises(VocabError):
        ByteTokenizer().decode([-1])


def test_layout_ranges(toy_graph):
    layout = VocabLayout.for_graph(toy_graph)
    assert layout.text_range == (0, 260)
    assert layout.member_range == (260, 264)
    assert layout.job_range == (264, 267)
    assert layout.class_ranges == {"coding": (267, 269), "work_mode": (269, 272)}
    assert layout.v_total == 272


def test_node_tokens(toy_graph):
    layout = VocabLayout.for_graph(toy_graph)
    assert layout.node_token_id(1) == 260
    assert layout.node_of(266) == 7
    assert layout.entity_of(layout.node_token_id(5)) is EntityType.JOB
    assert layout.token_name(263) == "<member_4>"
    assert layout.token_name(264) == "<job_5>"
    assert layout.token_name(257) == "<bos>"
    assert layout.token_name(270) == "<work_mode_1>"
    with pytest.raises(UnknownNodeError):
        layout.node_token_id(8)
    with pytest.raises(VocabError):
        layout.node_of(12)


def test_manifest(toy_graph):
    layout = VocabLayout.for_graph(toy_graph)
    assert VocabLayout.from_manifest(layout.to_manifest()) == layout


def test_compose_node_embedding(toy_graph):
    layout = VocabLayout.for_graph(toy_graph)
    tables = init_embedding_tables(layout, 8, 2, np.random.default_rng(0), dtype=np.float64)
    tables.check(layout, 2)
    ego = sample_ego_graph(toy_graph, 1, depth=2, fanout=5)

    for node_id, hop in ego.nodes:
        entity = 0 if toy_graph.entity_type(node_id) is EntityType.MEMBER else 1
        expected = tables.Z.data[node_id - 1] + tables.E.data[entity] + tables.P.data[hop]
        assert np.allclose(compose_node_embedding(tables, toy_graph, node_id, ego).data, expected)


def test_compose_outside_ego(toy_graph):
    layout = VocabLayout.for_graph(toy_graph)
    tables = init_embedding_tables(layout, 8, 2, np.random.default_rng(0))
    ego = sample_ego_graph(toy_graph, 4, depth=1, fanout=5)
    with pytest.raises(UnknownNodeError):
        compose_node_embedding(tables, toy_graph, 1, ego)


def test_check_catches_wrong_rows(toy_graph):
    layout = VocabLayout.for_graph(toy_graph)
    tables = init_embedding_tables(layout, 8, 2, np.random.default_rng(0))
    with pytest.raises(VocabError):
        tables.check(layout, 3)
