"""Shared fixtures: a hand-built marketplace, a small synthetic one and tiny run configs."""

import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "src"))

from config import SynthConfig, build_config  # noqa: E402
from hetgraph import EntityType, HetGraph, RelationType  # noqa: E402
from synth import generate_graph  # noqa: E402


MEMBER_TEXT = {
    1: ("python engineer", "experienced professional skilled in python, sql."),
    2: ("sql analyst", "experienced professional skilled in sql, dashboards."),
    3: ("budgeting lead", "experienced professional skilled in budgeting, hiring."),
    4: ("hiring manager", "experienced professional skilled in hiring, mentoring."),
}
JOB_TEXT = {
    5: ("python engineer", "we are looking for someone with python."),
    6: ("sql analyst", "we are looking for someone with sql."),
    7: ("budgeting lead", "we are looking for someone with budgeting."),
}


def build_toy_graph() -> HetGraph:
    """
    Members 1-4, jobs 5-7.

    ui: 1->5, 1->6, 2->5, 2->6, 3->7, 4->7
    uu: 1<->2, 2<->3
    """
    g = HetGraph()
    for node_id, (headline, bio) in MEMBER_TEXT.items():
        g.add_node(node_id, EntityType.MEMBER, {"headline": headline, "biography": bio},
                   {"coding": int(node_id <= 2), "work_mode": node_id % 3})
    for node_id, (title, description) in JOB_TEXT.items():
        g.add_node(node_id, EntityType.JOB, {"title": title, "description": description})
    g.validate()
    for src, dst in [(1, 5), (1, 6), (2, 5), (2, 6), (3, 7), (4, 7)]:
        g.add_edge(src, dst, RelationType.MEMBER_JOB)
    for a, b in [(1, 2), (2, 3)]:
        g.add_edge(a, b, RelationType.MEMBER_MEMBER)
        g.add_edge(b, a, RelationType.MEMBER_MEMBER)
    return g


SMALL_SYNTH = SynthConfig(n_members=30, n_jobs=20, n_clusters=3, p_in=0.3, p_out=0.02,
                          p_uu=0.3, seed=0)

TINY_SETTINGS = {
    "model.layers": 2, "model.heads": 2, "model.d_model": 16, "model.d_ff": 32,
    "model.context": 256, "train.max_feature_bytes": 32, "train.fanout": 3,
    "train.stage0_epochs": 1, "train.warmup_epochs": 1, "train.epochs": 2,
    "train.batch_size": 4, "train.verbose": False, "eval.min_degree": 3,
    "eval.n_ego_samples": 2, "eval.n_ego_samples_valid": 2,
}


@pytest.fixture
def toy_graph():
    return build_toy_graph()


@pytest.fixture(scope="session")
def small_graph():
    return generate_graph(SMALL_SYNTH)


@pytest.fixture
def tiny_config():
    return build_config(TINY_SETTINGS)


@pytest.fixture
def tiny_config_64():
    return build_config(TINY_SETTINGS, {"model.precision": 64})
