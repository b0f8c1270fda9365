"""
Training Module

Runs the training schedule:

1. stage 0: plain causal language modeling of node texts to train the
   backbone, which is frozen afterwards when ``freeze_backbone`` is set
2. warmup: per node, one feature-modeling instance plus one one-hop and one
   two-hop structural instance; updates Z, E, P, the bias vectors and the
   untied heads
3. interleaved: feature, structural and task batches in turn (1:1:1)

Instances are built from per-(node, epoch, purpose) derived seeds, so runs
are reproducible and independent of the worker count. Epoch orders come from
the trainer's generator, whose state is saved with the checkpoint so a
resumed run continues the same order stream. Every epoch appends
one JSON object to the training log.
"""

import json
import time
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import zip_longest
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from config import RunConfig, derive_seed, make_rng
from ego_graph import EgoGraph, sample_ego_graph
from errors import ContextOverflowError, NonFiniteError, SkipInstance, TrainingError, UnknownTaskError
from hetgraph import LINK_TASKS, HetGraph
from metapath import Metapath, ProximityIndex, metapath_set
from optimizer import Adam, optimizer_step
from prompts import BiasMatrix, PromptBuilder, PromptInstance, attention_bias_matrix
from synth import LinkSplits, NodeSplits, split_links, split_nodes
from transformer import ParameterStore, TransformerConfig, instance_loss
from vocab import VocabLayout


# One built instance ready for the model, or the reason it was skipped
Built = Tuple[str, Union[Tuple[PromptInstance, Optional[BiasMatrix]], str]]


@dataclass
class TaskSplits:
    """Link splits per link task and node splits per node task."""

    links: Dict[str, LinkSplits] = field(default_factory=dict)
    nodes: Dict[str, NodeSplits] = field(default_factory=dict)


def task_kind(g: HetGraph, task: str) -> str:
    """'link' or 'node'; raises UnknownTaskError otherwise."""
    if task in LINK_TASKS:
        return "link"
    if task in g.tasks():
        return "node"
    raise UnknownTaskError(f"unknown task {task!r} (link tasks: {sorted(LINK_TASKS)}, "
                           f"node tasks: {g.tasks()})")


def prepare_splits(g: HetGraph, config: RunConfig, tasks: Optional[Sequence[str]] = None) -> TaskSplits:
    """Deterministic splits for every task, drawn from the full graph."""
    splits = TaskSplits()
    for task in tasks if tasks is not None else config.train.tasks:
        if task_kind(g, task) == "link":
            splits.links[task] = split_links(g, LINK_TASKS[task], config.eval.link_ratios,
                                             config.eval.min_degree, config.train.seed)
        else:
            splits.nodes[task] = split_nodes(g, task, config.eval.node_ratios, config.train.seed)
    return splits


def run_splits(g: HetGraph, config: RunConfig, extra_tasks: Sequence[str] = ()) -> TaskSplits:
    """
    Splits for every link task plus the configured node tasks.

    Link splits are always drawn for both link tasks so the training graph
    stays the same whichever tasks a later stage finetunes on.
    """
    node_tasks = sorted({task for task in list(config.train.tasks) + list(extra_tasks) if task not in LINK_TASKS})
    return prepare_splits(g, config, sorted(LINK_TASKS) + node_tasks)


def training_graph(g: HetGraph, splits: TaskSplits) -> HetGraph:
    """The graph with every validation/test link removed."""
    train = g
    for link_splits in splits.links.values():
        train = train.without_edges(link_splits.rel, link_splits.heldout_pairs())
    return train


def build_model(g: HetGraph, config: RunConfig, precision: Optional[int] = None) -> ParameterStore:
    """Freshly initialized parameters for a graph and run configuration."""
    layout = VocabLayout.for_graph(g)
    phis = metapath_set(config.train.metapaths)
    model_config = TransformerConfig.from_settings(config.model, layout, len(phis),
                                                   config.train.depth, precision)
    return ParameterStore.initialize(model_config, layout, derive_seed(config.train.seed, "init"))


@dataclass
class EpochStats:
    """Per-objective losses, instance counts and skip counts of one epoch."""

    epoch: int
    phase: str
    losses: Dict[str, List[float]] = field(default_factory=lambda: defaultdict(list))
    skips: Counter = field(default_factory=Counter)
    seconds: float = 0.0

    def record(self, objective: str, loss: float) -> None:
        self.losses[objective].append(loss)

    def skip(self, reason: str) -> None:
        self.skips[reason] += 1

    def mean_loss(self, objective: str) -> Optional[float]:
        values = self.losses.get(objective)
        return float(np.mean(values)) if values else None

    def summary(self) -> Dict:
        return {
            "epoch": self.epoch,
            "phase": self.phase,
            "losses": {name: self.mean_loss(name) for name in sorted(self.losses)},
            "counts": {name: len(values) for name, values in sorted(self.losses.items())},
            "skips": dict(sorted(self.skips.items())),
            "seconds": round(self.seconds, 3),
        }


class Trainer:
    """
    Trains a ParameterStore on a (training) graph.

    Attributes:
        g: Training graph (validation/test links removed)
        params: Parameters being trained
        config: Run configuration
        splits: Task splits
        optimizer: Adam state, persisted in checkpoints
        rng: Generator drawing epoch orders, persisted in checkpoints
        history: EpochStats of every epoch run so far
    """

    def __init__(self, g: HetGraph, params: ParameterStore, config: RunConfig,
                 splits: Optional[TaskSplits] = None):
        self.g = g
        self.params = params
        self.config = config
        self.splits = splits or TaskSplits()
        train = config.train

        self.builder = PromptBuilder(g, params.layout, train.depth,
                                     max_feature_bytes=train.max_feature_bytes)
        self.phis: List[Metapath] = metapath_set(train.metapaths)
        if len(self.phis) != params.config.n_metapaths:
            raise TrainingError(f"model was built for {params.config.n_metapaths} metapaths, "
                                f"config lists {len(self.phis)}")
        self.index = ProximityIndex(g, self.phis)
        self.optimizer = Adam(lr=train.lr, grad_clip=train.grad_clip)
        self.rng = make_rng(train.seed, "order")
        self.history: List[EpochStats] = []

    # Parameter groups per phase

    def _set_phase(self, phase: str) -> None:
        groups = {"stage0": ["backbone"],
                  "warmup": ["hot", "bias", "head"],
                  "interleaved": ["hot", "bias", "head", "class"]}[phase]
        if phase != "stage0" and not self.config.train.freeze_backbone:
            groups = groups + ["backbone"]
        names = [name for group in groups for name in self.params.group(group)]
        self.params.set_trainable(names)

    # Instance construction

    def _ego(self, k: int, epoch: int, purpose: str) -> EgoGraph:
        train = self.config.train
        return sample_ego_graph(self.g, k, train.depth, train.fanout,
                                seed=derive_seed(train.seed, "ego", epoch, k, purpose))

    def with_bias(self, instance: PromptInstance) -> Tuple[PromptInstance, Optional[BiasMatrix]]:
        if not self.params.config.attention_alignment or instance.n_targets == 0:
            return instance, None
        bias = attention_bias_matrix(instance, self.index, self.config.model.bias_completion_keys)
        return instance, bias

    def feature_instance(self, k: int, epoch: int) -> PromptInstance:
        """
        Feature-modeling instance for one available feature of k (seeded pick).

        Raises:
            SkipInstance: If k has no non-empty feature
        """
        names = sorted(name for name, text in self.g.features(k).items() if text)
        if not names:
            raise SkipInstance("missing_feature", f"node {k}")
        feature = names[make_rng(self.config.train.seed, "feature", epoch, k).integers(len(names))]
        return self.builder.build_feature_prompt(self._ego(k, epoch, "feature"), k, feature)

    def structure_instances(self, k: int, epoch: int) -> List[Union[PromptInstance, SkipInstance]]:
        """
        Structural instances for k: one random one-hop and one random two-hop
        metapath (or every compatible metapath with the ``all`` policy).
        Skipped instances are returned as their SkipInstance.
        """
        train = self.config.train
        rng = make_rng(train.seed, "metapath", epoch, k)
        results: List[Union[PromptInstance, SkipInstance]] = []
        for length in (1, 2):
            compatible = [phi for phi in self.phis[1:] if phi.length == length and phi.compatible_with(self.g, k)]
            if not compatible:
                results.append(SkipInstance("no_metapath", f"node {k}, {length}-hop"))
                continue
            chosen = compatible if train.metapath_policy == "all" else [compatible[rng.integers(len(compatible))]]
            for phi in chosen:
                seed = derive_seed(train.seed, "structure", epoch, k, phi.abbreviation)
                ego = self._ego(k, epoch, phi.abbreviation)
                try:
                    if length == 1:
                        results.append(self.builder.build_first_order_prompt(ego, k, phi, train.n_end, seed))
                    else:
                        results.append(self.builder.build_higher_order_prompt(
                            ego, k, phi, train.n_mid, train.n_end, seed))
                except SkipInstance as e:
                    results.append(e)
        return results

    def task_instance(self, k: int, epoch: int, task: str) -> PromptInstance:
        """
        Node-task or masked link-task instance for k.

        Raises:
            SkipInstance: For link tasks when k has fewer than two neighbors
            UnknownTaskError: For unknown tasks
        """
        train = self.config.train
        ego = self._ego(k, epoch, task)
        if task_kind(self.g, task) == "link":
            seed = derive_seed(train.seed, "mask", epoch, k, task)
            instance, _ = self.builder.build_link_task_prompt(ego, k, LINK_TASKS[task], train.mask_ratio, seed)
            return instance
        return self.builder.build_node_task_prompt(ego, k, task, train.node_task_features)

    def _build_many(self, jobs: Sequence[Callable[[], List[Built]]]) -> List[Built]:
        """Run instance builders, in parallel when configured; output keeps input order."""
        workers = self.config.train.workers
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                chunks = list(executor.map(lambda job: job(), jobs))
        else:
            chunks = [job() for job in jobs]
        return [item for chunk in chunks for item in chunk]

    def wrap(self, objective: str, make: Callable[[], object]) -> List[Built]:
        try:
            made = make()
        except SkipInstance as e:
            return [(objective, e.reason)]
        items = made if isinstance(made, list) else [made]
        out: List[Built] = []
        for item in items:
            if isinstance(item, SkipInstance):
                out.append((objective, item.reason))
            else:
                out.append((objective, self.with_bias(item)))
        return out

    # Optimization

    def _run_batches(self, batches: Iterable[List[Built]], stats: EpochStats, total: int) -> None:
        """Forward/backward each instance in order, one optimizer step per batch."""
        progress = tqdm(batches, total=total, desc=f"{stats.phase} {stats.epoch}",
                        disable=not self.config.train.verbose, leave=False)
        for batch in progress:
            ready = [(objective, item) for objective, item in batch if not isinstance(item, str)]
            for objective, item in batch:
                if isinstance(item, str):
                    stats.skip(item)
            if not ready:
                continue

            stepped = False
            for objective, (instance, bias) in ready:
                try:
                    loss = instance_loss(self.params, instance, bias)
                except ContextOverflowError:
                    stats.skip("context_overflow")
                    continue
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteError(objective, what="loss")
                (loss * (1.0 / len(ready))).backward()
                stats.record(objective, value)
                stepped = True
            if stepped:
                optimizer_step(self.params, self.optimizer)

    @staticmethod
    def _batches(items: List[Built], size: int) -> List[List[Built]]:
        return [items[i:i + size] for i in range(0, len(items), size)]

    def _finish(self, stats: EpochStats, started: float) -> EpochStats:
        stats.seconds = time.time() - started
        self.history.append(stats)
        log_path = self.config.train.log_path
        if log_path:
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(stats.summary()) + "\n")
        return stats

    def _shuffled(self, items: Sequence) -> List:
        """Items in the next order drawn from the trainer's generator."""
        order = self.rng.permutation(len(items))
        return [items[i] for i in order]

    # Phases

    def stage0_text_pretrain(self, epochs: Optional[int] = None) -> List[EpochStats]:
        """
        Train the backbone as a plain causal LM over every node text.

        Raises:
            TrainingError: If the graph has no text at all
        """
        epochs = self.config.train.stage0_epochs if epochs is None else epochs
        corpus: List[Built] = []
        for k in self.g.node_ids():
            for feature in sorted(self.g.features(k)):
                try:
                    corpus.append(("text", (self.builder.build_text_prompt(k, feature), None)))
                except SkipInstance:
                    continue
        if not corpus:
            raise TrainingError("empty text corpus: no node has a feature text")

        self._set_phase("stage0")
        results = []
        for epoch in range(epochs):
            started = time.time()
            stats = EpochStats(epoch=epoch, phase="stage0")
            batches = self._batches(self._shuffled(corpus), self.config.train.batch_size)
            self._run_batches(batches, stats, len(batches))
            results.append(self._finish(stats, started))
        return results

    def warmup_epoch(self, epoch: int) -> EpochStats:
        """One warmup epoch over every node (feature + one-hop + two-hop)."""
        started = time.time()
        self._set_phase("warmup")
        stats = EpochStats(epoch=epoch, phase="warmup")

        nodes = self._shuffled(self.g.node_ids())
        jobs = [
            (lambda k=k: self.wrap("feature", lambda: self.feature_instance(k, epoch))
             + self.wrap("structure", lambda: self.structure_instances(k, epoch)))
            for k in nodes
        ]
        batches = self._batches(self._build_many(jobs), self.config.train.batch_size)
        self._run_batches(batches, stats, len(batches))
        return self._finish(stats, started)

    def task_nodes(self, task: str) -> List[int]:
        """Training nodes of a task: the node train split, or link sources with a train neighbor."""
        if task_kind(self.g, task) == "node":
            if task not in self.splits.nodes:
                raise TrainingError(f"no node split prepared for task {task!r}")
            return list(self.splits.nodes[task].train)
        rel = LINK_TASKS[task]
        return [k for k in self.g.node_ids(rel.source_type) if len(self.g.neighbors(k, rel)) >= 2]

    def interleaved_epoch(self, epoch: int, tasks: Union[str, Sequence[str], None] = None) -> EpochStats:
        """
        One interleaved epoch: feature, structural and task batches in turn.

        Raises:
            UnknownTaskError: If a task is neither a link task nor a graph label
        """
        tasks = [tasks] if isinstance(tasks, str) else list(tasks or self.config.train.tasks)
        for task in tasks:
            task_kind(self.g, task)

        started = time.time()
        self._set_phase("interleaved")
        stats = EpochStats(epoch=epoch, phase="interleaved")
        size = self.config.train.batch_size

        nodes = self._shuffled(self.g.node_ids())
        feature_items = self._build_many([
            (lambda k=k: self.wrap("feature", lambda: self.feature_instance(k, epoch))) for k in nodes
        ])
        structure_items = self._build_many([
            (lambda k=k: self.wrap("structure", lambda: self.structure_instances(k, epoch))) for k in nodes
        ])
        task_jobs = []
        for task in tasks:
            for k in self.task_nodes(task):
                task_jobs.append((task, k))
        task_items = self._build_many([
            (lambda task=task, k=k: self.wrap(f"task:{task}", lambda: self.task_instance(k, epoch, task)))
            for task, k in self._shuffled(task_jobs)
        ])

        cycled = [
            batch
            for triple in zip_longest(self._batches(feature_items, size), self._batches(structure_items, size),
                                      self._batches(task_items, size))
            for batch in triple if batch
        ]
        self._run_batches(cycled, stats, len(cycled))
        return self._finish(stats, started)

    def pretrain(self) -> List[EpochStats]:
        """Stage 0 followed by the warmup epochs."""
        train = self.config.train
        print(f"\n{'='*70}")
        print(f"Pretraining: {train.stage0_epochs} text epochs, {train.warmup_epochs} warmup epochs")
        print(f"{'='*70}")
        results = []
        if train.stage0_epochs > 0:
            for stats in self.stage0_text_pretrain():
                results.append(stats)
                self._report(stats)
        if train.freeze_backbone:
            self.params.freeze(self.params.group("backbone"))
        for epoch in range(train.warmup_epochs):
            stats = self.warmup_epoch(epoch)
            results.append(stats)
            self._report(stats)
        return results

    def finetune(self, start_epoch: int, epochs: Optional[int] = None) -> List[EpochStats]:
        """Interleaved epochs from ``start_epoch`` up to the configured total."""
        train = self.config.train
        end = train.epochs if epochs is None else start_epoch + epochs
        print(f"\n{'='*70}")
        print(f"Finetuning on {', '.join(train.tasks)}: epochs {start_epoch}..{end - 1}")
        print(f"{'='*70}")
        results = []
        for epoch in range(start_epoch, end):
            stats = self.interleaved_epoch(epoch)
            results.append(stats)
            self._report(stats)
        return results

    def _report(self, stats: EpochStats) -> None:
        if not self.config.train.verbose:
            return
        summary = stats.summary()
        losses = ", ".join(f"{name} {value:.4f}" for name, value in summary["losses"].items())
        skipped = sum(summary["skips"].values())
        print(f"✓ {stats.phase} epoch {stats.epoch}: {losses} "
              f"({skipped} skipped, {stats.seconds:.1f}s)")
