import json
from concurrent.futures import ThreadPoolExecutor

import pytest

from conftest import SMALL_SYNTH
from errors import GraphParseError, GraphValidationError, RelationTypeError, UnknownNodeError
from hetgraph import EntityType, HetGraph, RelationType, load_graph
from synth import generate_graph


def write_lines(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write((record if isinstance(record, str) else json.dumps(record)) + "\n")


def node(node_id, entity_type="member", **extra):
    return {"kind": "node", "id": node_id, "type": entity_type, **extra}


def test_counts_and_stats(toy_graph):
    stats = toy_graph.get_stats()
    assert stats["members"] == 4
    assert stats["jobs"] == 3
    assert stats["member_job_edges"] == 6
    assert stats["member_member_edges"] == 4
    assert stats["tasks"] == ["coding", "work_mode"]


def test_neighbors_are_sorted_and_typed(toy_graph):
    assert toy_graph.neighbors(1, RelationType.MEMBER_JOB) == [5, 6]
    assert toy_graph.neighbors(2, RelationType.MEMBER_MEMBER) == [1, 3]
    assert toy_graph.neighbors(4, RelationType.MEMBER_MEMBER) == []
    assert toy_graph.in_neighbors(5, RelationType.MEMBER_JOB) == [1, 2]


def test_neighbors_rejects_job_source(toy_graph):
    with pytest.raises(RelationTypeError):
        toy_graph.neighbors(5, RelationType.MEMBER_JOB)


def test_unknown_node(toy_graph):
    with pytest.raises(UnknownNodeError) as info:
        toy_graph.entity_type(99)
    assert info.value.node_id == 99


def test_add_edge_validates_signature(toy_graph):
    with pytest.raises(GraphValidationError):
        toy_graph.add_edge(5, 1, RelationType.MEMBER_JOB)
    with pytest.raises(GraphValidationError):
        toy_graph.add_edge(1, 7, RelationType.MEMBER_MEMBER)
    with pytest.raises(GraphValidationError):
        toy_graph.add_edge(1, 1, RelationType.MEMBER_MEMBER)
    with pytest.raises(GraphValidationError):
        toy_graph.add_edge(1, 42, RelationType.MEMBER_JOB)


def test_validate_requires_members_before_jobs():
    g = HetGraph()
    g.add_node(1, EntityType.JOB)
    g.add_node(2, EntityType.MEMBER)
    with pytest.raises(GraphValidationError):
        g.validate()


def test_validate_requires_dense_ids():
    g = HetGraph()
    g.add_node(1, EntityType.MEMBER)
    g.add_node(3, EntityType.JOB)
    with pytest.raises(GraphValidationError):
        g.validate()


def test_without_edges_leaves_original(toy_graph):
    pruned = toy_graph.without_edges(RelationType.MEMBER_JOB, [(1, 5), (3, 7)])
    assert pruned.neighbors(1, RelationType.MEMBER_JOB) == [6]
    assert pruned.neighbors(3, RelationType.MEMBER_JOB) == []
    assert toy_graph.neighbors(1, RelationType.MEMBER_JOB) == [5, 6]
    assert pruned.num_edges() == toy_graph.num_edges() - 2


def test_save_and_load(tmp_path, toy_graph):
    path = tmp_path / "graph.jsonl"
    toy_graph.save_graph(str(path))
    loaded = load_graph(str(path))
    assert list(loaded.to_records()) == list(toy_graph.to_records())
    assert loaded.feature(1, "headline") == "python engineer"
    assert loaded.label(3, "coding") == 0


def test_load_reports_line_of_bad_json(tmp_path):
    path = tmp_path / "bad.jsonl"
    write_lines(path, [node(1), "{not json", node(2, "job")])
    with pytest.raises(GraphParseError) as info:
        load_graph(str(path))
    assert info.value.line_number == 2


def test_load_rejects_unknown_keys(tmp_path):
    path = tmp_path / "bad.jsonl"
    write_lines(path, [node(1, colour="red")])
    with pytest.raises(GraphParseError) as info:
        load_graph(str(path))
    assert info.value.line_number == 1


def test_load_rejects_dangling_edge(tmp_path):
    path = tmp_path / "bad.jsonl"
    write_lines(path, [node(1), node(2, "job"), {"kind": "edge", "rel": "ui", "src": 1, "dst": 9}])
    with pytest.raises(GraphValidationError, match="line 3"):
        load_graph(str(path))


def test_load_rejects_unknown_relation(tmp_path):
    path = tmp_path / "bad.jsonl"
    write_lines(path, [node(1), node(2, "job"), {"kind": "edge", "rel": "iu", "src": 2, "dst": 1}])
    with pytest.raises(GraphParseError):
        load_graph(str(path))


def test_num_classes(toy_graph):
    assert toy_graph.num_classes("coding") == 2
    assert toy_graph.num_classes("work_mode") == 3
    assert toy_graph.labeled_nodes("coding") == [1, 2, 3, 4]


def test_concurrent_first_lookups_match_sequential():
    shared, reference = generate_graph(SMALL_SYNTH), generate_graph(SMALL_SYNTH)
    queries = [(k, rel) for k in shared.node_ids(EntityType.MEMBER) for rel in RelationType] * 4
    with ThreadPoolExecutor(max_workers=8) as executor:
        results = list(executor.map(lambda q: shared.neighbors(*q), queries))
    assert results == [reference.neighbors(k, rel) for k, rel in queries]
