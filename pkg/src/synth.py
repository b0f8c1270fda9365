"""
Synthetic Marketplace Module

Generates job-marketplace graphs with planted latent clusters, so link
structure and node labels have known ground truth:

- every member and job belongs to one cluster, drawn uniformly
- member→job interactions appear with probability p_in inside a cluster
  and p_out across clusters
- co-working member↔member edges appear inside clusters (both directions)
- texts are built from cluster-specific skill words
- skill labels are a fixed function of the cluster, flipped with the noise
  rate; work-mode labels are drawn from a per-cluster prior

Also holds the link and node split procedures used for evaluation.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Sequence, Tuple

import numpy as np

from config import SynthConfig, make_rng
from errors import UnknownTaskError
from hetgraph import EntityType, HetGraph, RelationType


SKILL_WORDS = [
    "python", "java", "sql", "spark", "kubernetes", "docker", "react", "typescript",
    "budgeting", "forecasting", "negotiation", "leadership", "mentoring", "hiring", "roadmaps", "strategy",
    "marketing", "seo", "branding", "copywriting", "sales", "crm", "outreach", "campaigns",
    "logistics", "procurement", "inventory", "warehousing", "shipping", "sourcing", "routing", "dispatch",
    "nursing", "triage", "pharmacy", "patients", "clinical", "charting", "vaccines", "wellness",
    "accounting", "audit", "tax", "payroll", "compliance", "ledgers", "invoicing", "treasury",
    "figma", "illustration", "typography", "wireframes", "prototyping", "usability", "animation", "layout",
    "statistics", "regression", "modeling", "experiments", "dashboards", "sampling", "surveys", "metrics",
]

ROLES = ["engineer", "manager", "specialist", "analyst", "coordinator", "lead"]
WORK_MODES = ["onsite", "remote", "hybrid"]


def coding_label(cluster: int) -> int:
    return int(cluster % 2 == 0)


def management_label(cluster: int) -> int:
    return int(cluster % 3 == 1)


@dataclass
class SyntheticMarketplace:
    """Generated graph plus its ground truth (never shown to the model)."""

    graph: HetGraph
    member_clusters: np.ndarray
    job_clusters: np.ndarray
    clean_labels: Dict[str, Dict[int, int]] = field(default_factory=dict)

    def sidecar(self) -> Dict:
        n_members = len(self.member_clusters)
        return {
            "members": {str(i + 1): int(c) for i, c in enumerate(self.member_clusters)},
            "jobs": {str(n_members + i + 1): int(c) for i, c in enumerate(self.job_clusters)},
            "clean_labels": {task: {str(k): v for k, v in labels.items()}
                             for task, labels in self.clean_labels.items()},
        }


def cluster_words(config: SynthConfig) -> List[List[str]]:
    """Disjoint skill-word lists, one per cluster."""
    needed = config.n_clusters * config.words_per_cluster
    words = list(SKILL_WORDS)
    while len(words) < needed:
        words.append(f"skill{len(words)}")
    return [words[c * config.words_per_cluster:(c + 1) * config.words_per_cluster]
            for c in range(config.n_clusters)]


def _pick(rng: np.random.Generator, words: Sequence[str], count: int) -> List[str]:
    return [words[i] for i in rng.choice(len(words), size=min(count, len(words)), replace=False)]


def _member_features(rng: np.random.Generator, words: Sequence[str], count: int) -> Dict[str, str]:
    picked = _pick(rng, words, count)
    return {
        "headline": f"{picked[0]} {ROLES[rng.integers(len(ROLES))]}",
        "biography": "experienced professional skilled in " + ", ".join(picked) + ".",
    }


def _job_features(rng: np.random.Generator, words: Sequence[str], count: int, cluster: int) -> Dict[str, str]:
    picked = _pick(rng, words, count)
    return {
        "title": f"{picked[0]} {ROLES[rng.integers(len(ROLES))]}",
        "company": f"company {cluster}{chr(ord('a') + int(rng.integers(3)))}",
        "description": "we are looking for someone with " + ", ".join(picked) + ".",
        "skills": ", ".join(sorted(picked)),
    }


def generate_marketplace(config: SynthConfig) -> SyntheticMarketplace:
    """
    Generate a planted-cluster marketplace.

    Args:
        config: Generator settings (validated by pydantic)

    Returns:
        SyntheticMarketplace with the graph and ground-truth clusters
    """
    rng = np.random.default_rng(config.seed)
    n_members, n_jobs, n_clusters = config.n_members, config.n_jobs, config.n_clusters

    member_clusters = rng.integers(0, n_clusters, size=n_members)
    job_clusters = rng.integers(0, n_clusters, size=n_jobs)
    vocab = cluster_words(config)
    work_mode_prior = rng.dirichlet(np.full(len(WORK_MODES), 0.5), size=n_clusters)

    graph = HetGraph()
    clean: Dict[str, Dict[int, int]] = {"coding": {}, "management": {}}
    for index, cluster in enumerate(member_clusters):
        node_id = index + 1
        labels = {}
        for task, rule in (("coding", coding_label), ("management", management_label)):
            value = rule(int(cluster))
            clean[task][node_id] = value
            labels[task] = 1 - value if rng.random() < config.label_noise else value
        labels["work_mode"] = int(rng.choice(len(WORK_MODES), p=work_mode_prior[cluster]))
        features = _member_features(rng, vocab[cluster], config.words_per_text)
        graph.add_node(node_id, EntityType.MEMBER, features, labels)

    for index, cluster in enumerate(job_clusters):
        features = _job_features(rng, vocab[cluster], config.words_per_text, int(cluster))
        graph.add_node(n_members + index + 1, EntityType.JOB, features)
    graph.validate()

    same = member_clusters[:, None] == job_clusters[None, :]
    interactions = rng.random((n_members, n_jobs)) < np.where(same, config.p_in, config.p_out)
    for u, i in zip(*np.nonzero(interactions)):
        graph.add_edge(int(u) + 1, n_members + int(i) + 1, RelationType.MEMBER_JOB)

    coworkers = np.triu(rng.random((n_members, n_members)) < config.p_uu, k=1)
    coworkers &= member_clusters[:, None] == member_clusters[None, :]
    for u, v in zip(*np.nonzero(coworkers)):
        graph.add_edge(int(u) + 1, int(v) + 1, RelationType.MEMBER_MEMBER)
        graph.add_edge(int(v) + 1, int(u) + 1, RelationType.MEMBER_MEMBER)

    return SyntheticMarketplace(graph=graph, member_clusters=member_clusters,
                                job_clusters=job_clusters, clean_labels=clean)


def generate_graph(config: SynthConfig) -> HetGraph:
    return generate_marketplace(config).graph


def write_marketplace(config: SynthConfig, out_path: str) -> SyntheticMarketplace:
    """Generate, save the graph file and a ``.clusters.json`` sidecar next to it."""
    print(f"\n{'='*70}")
    print(f"Generating marketplace: {config.n_members} members, {config.n_jobs} jobs, "
          f"{config.n_clusters} clusters (seed {config.seed})")
    print(f"{'='*70}")

    market = generate_marketplace(config)
    market.graph.save_graph(out_path)
    sidecar = Path(out_path).with_suffix(".clusters.json")
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump(market.sidecar(), f, indent=2)

    stats = market.graph.get_stats()
    print(f"✓ Wrote {out_path}: {stats['member_job_edges']} member-job edges, "
          f"{stats['member_member_edges']} member-member edges")
    print(f"✓ Wrote ground-truth clusters to {sidecar}")
    return market


# Splits

def _split_counts(n: int, ratios: Tuple[float, float, float]) -> Tuple[int, int, int]:
    """(train, valid, test) counts; valid and test are rounded, train takes the rest."""
    n_valid = int(np.floor(ratios[1] * n + 0.5))
    n_test = int(np.floor(ratios[2] * n + 0.5))
    n_test = min(n_test, n - n_valid)
    return n - n_valid - n_test, n_valid, n_test


@dataclass
class LinkSplits:
    """
    Per-node partition of one relation's links.

    Nodes below the degree threshold keep all links in ``train`` and are not
    evaluation nodes.
    """

    rel: RelationType
    train: Dict[int, FrozenSet[int]]
    valid: Dict[int, FrozenSet[int]]
    test: Dict[int, FrozenSet[int]]
    eval_nodes: List[int]

    def split(self, name: str) -> Dict[int, FrozenSet[int]]:
        if name not in ("train", "valid", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def heldout_pairs(self) -> List[Tuple[int, int]]:
        """All (src, dst) links in the validation and test parts."""
        return sorted((k, j) for part in (self.valid, self.test) for k, ends in part.items() for j in ends)


def split_links(g: HetGraph, rel: RelationType, ratios: Tuple[float, float, float] = (0.6, 0.2, 0.2),
                min_degree: int = 5, seed: int = 0) -> LinkSplits:
    """
    Partition each source node's links under ``rel`` into train/valid/test.

    Only nodes with at least ``min_degree`` links are split and evaluated.
    Each node's partition uses its own derived seed.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios {ratios} must sum to 1")
    rel = RelationType(rel)
    train, valid, test, eval_nodes = {}, {}, {}, []
    for k in g.node_ids(rel.source_type):
        ends = g.neighbors(k, rel)
        if len(ends) < min_degree:
            train[k] = frozenset(ends)
            continue
        n_train, n_valid, _ = _split_counts(len(ends), ratios)
        order = make_rng(seed, k, rel.value, "link_split").permutation(len(ends))
        shuffled = [ends[i] for i in order]
        train[k] = frozenset(shuffled[:n_train])
        valid[k] = frozenset(shuffled[n_train:n_train + n_valid])
        test[k] = frozenset(shuffled[n_train + n_valid:])
        eval_nodes.append(k)
    return LinkSplits(rel=rel, train=train, valid=valid, test=test, eval_nodes=eval_nodes)


@dataclass
class NodeSplits:
    task: str
    train: List[int]
    valid: List[int]
    test: List[int]

    def split(self, name: str) -> List[int]:
        if name not in ("train", "valid", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def split_nodes(g: HetGraph, task: str, ratios: Tuple[float, float, float] = (0.7, 0.15, 0.15),
                seed: int = 0) -> NodeSplits:
    """
    Partition the labeled nodes of a task into train/valid/test.

    Raises:
        UnknownTaskError: If no node carries a label for the task
    """
    labeled = g.labeled_nodes(task)
    if not labeled:
        raise UnknownTaskError(f"no node carries a label for task {task!r}")
    n_train, n_valid, _ = _split_counts(len(labeled), ratios)
    order = make_rng(seed, task, "node_split").permutation(len(labeled))
    shuffled = [labeled[i] for i in order]
    return NodeSplits(
        task=task,
        train=sorted(shuffled[:n_train]),
        valid=sorted(shuffled[n_train:n_train + n_valid]),
        test=sorted(shuffled[n_train + n_valid:]),
    )
