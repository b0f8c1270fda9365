"""End-to-end recovery of the planted structure on the default synthetic marketplace."""

import numpy as np
import pytest

from config import SynthConfig, build_config
from evaluation import Predictor, evaluate
from synth import generate_marketplace
from trainer import Trainer, build_model, run_splits, training_graph

pytestmark = pytest.mark.slow

# 10 warmup epochs, then interleaved epochs 10..49
SCHEDULE = {"train.warmup_epochs": 10, "train.epochs": 50, "train.verbose": False}


@pytest.fixture(scope="module")
def marketplace():
    return generate_marketplace(SynthConfig())


def train_run(g, **settings):
    config = build_config(SCHEDULE, settings)
    splits = run_splits(g, config)
    g_train = training_graph(g, splits)
    trainer = Trainer(g_train, build_model(g_train, config), config, splits)
    trainer.pretrain()
    backbone = {name: trainer.params[name].data.copy() for name in trainer.params.group("backbone")}
    trainer.finetune(config.train.warmup_epochs)
    return config, splits, g_train, trainer, backbone


def recall_at_20(g, **settings):
    config, splits, g_train, trainer, _ = train_run(g, **settings)
    return evaluate(trainer.params, g_train, splits, "jymbii", config).metrics["recall@20"]


@pytest.fixture(scope="module")
def full_run(marketplace):
    return train_run(marketplace.graph, **{"train.tasks": "jymbii,coding"})


def test_link_recall_beats_baselines(full_run):
    config, splits, g_train, trainer, _ = full_run
    report = evaluate(trainer.params, g_train, splits, "jymbii", config)
    recall = report.metrics["recall@20"]
    assert recall > 2 * report.baselines["popularity"]["recall@20"]
    assert recall > report.baselines["untrained_dot_product"]["recall@20"]


def test_planted_skill_label_recovered(full_run, marketplace):
    config, splits, g_train, trainer, _ = full_run
    assert config.synth.label_noise == 0.1
    assert tuple(config.eval.node_ratios) == (0.7, 0.15, 0.15)

    predictor = Predictor(trainer.params, g_train, config)
    clean = marketplace.clean_labels["coding"]
    test_nodes = list(splits.nodes["coding"].test)
    hits = [predictor.predict_node(k, "coding", config.eval.n_ego_samples, seed=0) == clean[k]
            for k in test_nodes]
    assert test_nodes and np.mean(hits) >= 0.85


def test_frozen_backbone_untouched_after_text_stage(full_run):
    *_, trainer, backbone = full_run
    for name, values in backbone.items():
        assert np.array_equal(trainer.params[name].data, values), name


def test_ablations_reduce_recall(marketplace):
    g = marketplace.graph
    seeds = [0, 1, 2]
    full = np.mean([recall_at_20(g, **{"train.seed": s}) for s in seeds])
    no_alignment = np.mean([recall_at_20(g, **{"train.seed": s, "model.attention_alignment": False})
                            for s in seeds])
    no_entity_positional = np.mean([recall_at_20(g, **{"train.seed": s, "model.entity_positional": False})
                                    for s in seeds])
    assert no_alignment < full
    assert no_entity_positional < full
