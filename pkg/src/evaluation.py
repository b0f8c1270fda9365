"""
Evaluation Module

N_g-averaged prediction for node and link tasks, the evaluation protocol
over held-out splits, link baselines and embedding export.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator
from tqdm import tqdm

from config import RunConfig, config_hash, derive_seed
from ego_graph import sample_ego_graph
from errors import EvaluationError
from hetgraph import EntityType, HetGraph, RelationType
from metrics import classification_metrics, ranking_metrics
from prompts import PromptBuilder
from trainer import TaskSplits, task_kind
from transformer import ParameterStore, predict_class_probabilities, predict_link_probabilities


class MetricsBlock(BaseModel):
    """Metrics for one N_g value (or one seed)."""

    n_ego_samples: int
    seed: int
    n_nodes: int
    metrics: Dict[str, float]

    @field_validator("metrics")
    @classmethod
    def check_unit_interval(cls, value):
        for name, metric in value.items():
            if not 0.0 <= metric <= 1.0:
                raise ValueError(f"metric {name}={metric} outside [0, 1]")
        return value


class EvalReport(BaseModel):
    """
    Evaluation result of one task on one split.

    ``metrics`` is the mean over ``per_seed``; ``sweep`` holds one block per
    extra N_g value; ``baselines`` maps baseline name to its metrics (link
    tasks only).
    """

    task: str
    kind: str
    split: str
    n_ego_samples: int
    n_nodes: int
    metrics: Dict[str, float]
    per_seed: List[MetricsBlock] = Field(default_factory=list)
    sweep: List[MetricsBlock] = Field(default_factory=list)
    baselines: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    config_hash: str = ""

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.model_validate_json(text)


def _map(fn: Callable, items: Sequence, workers: int, desc: str, verbose: bool) -> List:
    """Apply fn to items (thread pool when workers > 1), keeping input order."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return list(tqdm(executor.map(fn, items), total=len(items), desc=desc,
                             disable=not verbose, leave=False))
    return [fn(item) for item in tqdm(items, desc=desc, disable=not verbose, leave=False)]


def candidate_ids(g: HetGraph, entity_type: EntityType) -> np.ndarray:
    """Node ids of one entity type in head-row order."""
    return np.asarray(g.node_ids(entity_type), dtype=np.int64)


def rank_candidates(scores: np.ndarray, ids: np.ndarray, excluded: Iterable[int], m: int) -> List[int]:
    """
    Top-m candidate ids by descending score, ties by ascending id.

    Excluded ids never appear. Returns the whole pool when m exceeds it.
    """
    keep = ~np.isin(ids, np.fromiter(excluded, dtype=np.int64))
    ids, scores = ids[keep], scores[keep]
    order = np.lexsort((ids, -scores))
    return [int(i) for i in ids[order[:m]]]


class Predictor:
    """
    N_g-averaged predictions from a trained parameter store.

    Every prompt uses an ego graph drawn with seed
    ``derive_seed(seed, "predict", task, k, s)`` for s in 0..N_g-1, so
    predictions are pure functions of (parameters, graph, seed, config).
    """

    def __init__(self, params: ParameterStore, g: HetGraph, config: RunConfig):
        self.params = params
        self.g = g
        self.config = config
        self.builder = PromptBuilder(g, params.layout, config.train.depth,
                                     max_feature_bytes=config.train.max_feature_bytes)

    def _egos(self, k: int, task: str, n_ego_samples: int, seed: int):
        if n_ego_samples < 1:
            raise ValueError(f"N_g must be at least 1, got {n_ego_samples}")
        train = self.config.train
        return [sample_ego_graph(self.g, k, train.depth, train.fanout,
                                 seed=derive_seed(seed, "predict", task, k, s))
                for s in range(n_ego_samples)]

    def class_probabilities(self, k: int, task: str, n_ego_samples: int, seed: int) -> np.ndarray:
        """Average of the class softmax over N_g node-task prompts."""
        if task_kind(self.g, task) != "node":
            raise EvaluationError(f"{task!r} is a link task, not a node task")
        features = self.config.train.node_task_features
        probs = [predict_class_probabilities(self.params, self.builder.build_node_task_prompt(ego, k, task, features))
                 for ego in self._egos(k, task, n_ego_samples, seed)]
        return np.mean(probs, axis=0)

    def predict_node(self, k: int, task: str, n_ego_samples: int, seed: int) -> int:
        """Argmax of the averaged class probabilities (lowest index on ties)."""
        return int(np.argmax(self.class_probabilities(k, task, n_ego_samples, seed)))

    def link_probabilities(self, k: int, rel: RelationType, n_ego_samples: int, seed: int) -> np.ndarray:
        """Average of the multinomial over all members (or jobs) across N_g link prompts."""
        rel = RelationType(rel)
        probs = []
        for ego in self._egos(k, rel.value, n_ego_samples, seed):
            instance, _ = self.builder.build_link_task_prompt(ego, k, rel, 0.0, seed)
            probs.append(predict_link_probabilities(self.params, instance))
        return np.mean(probs, axis=0)

    def predict_links(self, k: int, rel: RelationType, m: int, n_ego_samples: int, seed: int,
                      exclude: Iterable[int] = ()) -> List[int]:
        """
        Top-m targets of k under rel.

        The ranking excludes k, every observed neighbor of k in the graph and
        ``exclude``; ties break by ascending id.
        """
        rel = RelationType(rel)
        probs = self.link_probabilities(k, rel, n_ego_samples, seed)
        excluded = {k} | set(self.g.neighbors(k, rel)) | set(exclude)
        return rank_candidates(probs, candidate_ids(self.g, rel.target_type), excluded, m)


def predict_node(params: ParameterStore, g: HetGraph, k: int, task: str, n_ego_samples: int,
                 seed: int, config: RunConfig) -> int:
    return Predictor(params, g, config).predict_node(k, task, n_ego_samples, seed)


def predict_links(params: ParameterStore, g: HetGraph, k: int, rel: RelationType, m: int,
                  n_ego_samples: int, seed: int, config: RunConfig) -> List[int]:
    return Predictor(params, g, config).predict_links(k, rel, m, n_ego_samples, seed)


# Baselines

def popularity_scores(g: HetGraph, rel: RelationType) -> np.ndarray:
    """Training in-degree of every candidate under rel."""
    rel = RelationType(rel)
    return np.asarray([len(g.in_neighbors(j, rel)) for j in g.node_ids(rel.target_type)], dtype=np.float64)


def dot_product_scores(z: np.ndarray, g: HetGraph, k: int, rel: RelationType) -> np.ndarray:
    """Embedding dot products z_k · z_j over every candidate j."""
    rel = RelationType(rel)
    rows = candidate_ids(g, rel.target_type) - 1
    return z[rows].astype(np.float64) @ z[k - 1].astype(np.float64)


def untrained_embeddings(params: ParameterStore, config: RunConfig) -> np.ndarray:
    """Z of a fresh initialization with the run's seed."""
    fresh = ParameterStore.initialize(params.config, params.layout, derive_seed(config.train.seed, "init"))
    return fresh["Z"].data


# Protocol

def _split_name(config: RunConfig, split: Optional[str]) -> str:
    split = split or config.eval.split
    if split not in ("valid", "test"):
        raise EvaluationError(f"unknown evaluation split {split!r}")
    return split


def _default_ng(config: RunConfig, split: str) -> int:
    return config.eval.n_ego_samples_valid if split == "valid" else config.eval.n_ego_samples


def _evaluate_node_task(predictor: Predictor, nodes: List[int], task: str, n_ego_samples: int,
                        seed: int) -> MetricsBlock:
    config = predictor.config
    y_pred = _map(lambda k: predictor.predict_node(k, task, n_ego_samples, seed), nodes,
                  config.train.workers, f"{task} N_g={n_ego_samples}", config.train.verbose)
    y_true = [predictor.g.label(k, task) for k in nodes]
    metrics = classification_metrics(y_true, y_pred, predictor.g.num_classes(task))
    return MetricsBlock(n_ego_samples=n_ego_samples, seed=seed, n_nodes=len(nodes), metrics=metrics)


def _link_exclusions(splits, split: str, k: int) -> Set[int]:
    excluded = set(splits.train.get(k, ()))
    if split == "test":
        excluded |= set(splits.valid.get(k, ()))
    return excluded


def _evaluate_link_task(predictor: Predictor, splits, nodes: List[int], split: str, n_ego_samples: int,
                        seed: int) -> MetricsBlock:
    config = predictor.config
    targets = splits.split(split)
    m = max(list(config.eval.recall_at) + list(config.eval.ndcg_at))
    rankings = _map(
        lambda k: predictor.predict_links(k, splits.rel, m, n_ego_samples, seed,
                                          exclude=_link_exclusions(splits, split, k)),
        nodes, config.train.workers, f"{splits.rel.value} N_g={n_ego_samples}", config.train.verbose,
    )
    metrics = ranking_metrics(dict(zip(nodes, rankings)), targets, config.eval.recall_at, config.eval.ndcg_at)
    return MetricsBlock(n_ego_samples=n_ego_samples, seed=seed, n_nodes=len(nodes), metrics=metrics)


def link_baselines(params: ParameterStore, g: HetGraph, splits, nodes: List[int], split: str,
                   config: RunConfig) -> Dict[str, Dict[str, float]]:
    """Popularity and untrained-embedding baselines under the model's exclusions."""
    rel = splits.rel
    ids = candidate_ids(g, rel.target_type)
    m = max(list(config.eval.recall_at) + list(config.eval.ndcg_at))
    popularity = popularity_scores(g, rel)
    z = untrained_embeddings(params, config)
    targets = splits.split(split)

    def excluded(k: int) -> Set[int]:
        return {k} | set(g.neighbors(k, rel)) | _link_exclusions(splits, split, k)

    out = {}
    for name, scorer in (("popularity", lambda k: popularity),
                         ("untrained_dot_product", lambda k: dot_product_scores(z, g, k, rel))):
        rankings = {k: rank_candidates(scorer(k), ids, excluded(k), m) for k in nodes}
        out[name] = ranking_metrics(rankings, targets, config.eval.recall_at, config.eval.ndcg_at)
    return out


def evaluate(params: ParameterStore, g: HetGraph, splits: TaskSplits, task: str, config: RunConfig,
             split: Optional[str] = None, n_ego_samples: Optional[int] = None,
             seeds: Optional[Sequence[int]] = None) -> EvalReport:
    """
    Evaluate one task on its held-out split.

    Node tasks report accuracy and F1; link tasks report Recall@M and NDCG@M
    over the evaluation nodes that have held-out targets. ``g`` is the
    training graph (held-out links removed).

    Args:
        params: Trained parameters
        g: Training graph
        splits: Splits prepared for the task
        task: Node task label name or link task (jymbii, pymk)
        config: Run configuration
        split: "valid" or "test" (default from config)
        n_ego_samples: N_g (default from config for the split)
        seeds: Evaluation seeds; metrics are averaged over them

    Raises:
        EvaluationError: If the task has no prepared split or no evaluation nodes
        UnknownTaskError: If the task is unknown
    """
    split = _split_name(config, split)
    n_ego_samples = n_ego_samples or _default_ng(config, split)
    seeds = list(seeds) if seeds else [config.train.seed]
    kind = task_kind(g, task)
    predictor = Predictor(params, g, config)

    if kind == "node":
        if task not in splits.nodes:
            raise EvaluationError(f"no node split prepared for task {task!r}")
        nodes = splits.nodes[task].split(split)
        run = lambda ng, seed: _evaluate_node_task(predictor, nodes, task, ng, seed)
    else:
        if task not in splits.links:
            raise EvaluationError(f"no link split prepared for task {task!r}")
        link_splits = splits.links[task]
        targets = link_splits.split(split)
        nodes = [k for k in link_splits.eval_nodes if targets.get(k)]
        run = lambda ng, seed: _evaluate_link_task(predictor, link_splits, nodes, split, ng, seed)
    if not nodes:
        raise EvaluationError(f"task {task!r} has no evaluation nodes in the {split} split")

    per_seed = [run(n_ego_samples, seed) for seed in seeds]
    names = per_seed[0].metrics.keys()
    metrics = {name: float(np.mean([block.metrics[name] for block in per_seed])) for name in names}
    sweep = [run(ng, seeds[0]) for ng in config.eval.sweep_ng if ng != n_ego_samples]

    baselines = {}
    if kind == "link" and config.eval.baselines:
        baselines = link_baselines(params, g, link_splits, nodes, split, config)

    return EvalReport(task=task, kind=kind, split=split, n_ego_samples=n_ego_samples, n_nodes=len(nodes),
                      metrics=metrics, per_seed=per_seed, sweep=sweep, baselines=baselines,
                      config_hash=config_hash(config))


def macro_f1(reports: Sequence[EvalReport]) -> Optional[float]:
    """Macro F1 across node-task reports (None without node tasks)."""
    scores = [r.metrics["f1"] for r in reports if r.kind == "node"]
    return float(np.mean(scores)) if scores else None


def print_report(report: EvalReport) -> None:
    print(f"\n{'='*70}")
    print(f"{report.task} ({report.kind}) on {report.split}: {report.n_nodes} nodes, N_g={report.n_ego_samples}")
    print(f"{'='*70}")
    for name, value in report.metrics.items():
        print(f"  {name:<14} {value:.4f}")
    for block in report.sweep:
        values = ", ".join(f"{name} {value:.4f}" for name, value in block.metrics.items())
        print(f"  N_g={block.n_ego_samples:<3} {values}")
    for baseline, values in report.baselines.items():
        print(f"  baseline {baseline}: " + ", ".join(f"{name} {value:.4f}" for name, value in values.items()))


def export_embeddings(params: ParameterStore, g: HetGraph, path: str) -> int:
    """
    Write one tab-separated row per node: id, entity type, then its Z row.

    Values are written with ``repr`` so they read back exactly.

    Returns:
        Number of rows written
    """
    z = params["Z"].data
    rows = 0
    with open(path, "w", encoding="utf-8") as f:
        for node_id in g.node_ids():
            values = "\t".join(repr(float(x)) for x in z[node_id - 1])
            f.write(f"{node_id}\t{g.entity_type(node_id).value}\t{values}\n")
            rows += 1
    return rows


def read_embeddings(path: str) -> Dict[int, Tuple[EntityType, np.ndarray]]:
    """Inverse of export_embeddings."""
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            parts = line.rstrip("\n").split("\t")
            out[int(parts[0])] = (EntityType(parts[1]), np.asarray([float(x) for x in parts[2:]]))
    return out
