import json

import numpy as np
import pytest

from config import build_config
from conftest import TINY_SETTINGS
from errors import NonFiniteError, TrainingError, UnknownTaskError
from hetgraph import EntityType, HetGraph, RelationType
from plotting import loss_series, plot_losses, read_training_log
from trainer import EpochStats, Trainer, build_model, prepare_splits, run_splits, task_kind, training_graph


def make_trainer(g, splits=None, **settings):
    config = build_config(TINY_SETTINGS, settings)
    return Trainer(g, build_model(g, config), config, splits)


def snapshot(params, names):
    return {name: params[name].data.copy() for name in names}


def unchanged(params, saved):
    return all(np.array_equal(params[name].data, values) for name, values in saved.items())


def test_epoch_stats_summary():
    stats = EpochStats(epoch=3, phase="warmup")
    stats.record("feature", 2.0)
    stats.record("feature", 4.0)
    stats.skip("no_targets")
    summary = stats.summary()
    assert summary["losses"] == {"feature": 3.0}
    assert summary["counts"] == {"feature": 2}
    assert summary["skips"] == {"no_targets": 1}
    assert stats.mean_loss("structure") is None


def test_task_kind(toy_graph):
    assert task_kind(toy_graph, "jymbii") == "link"
    assert task_kind(toy_graph, "work_mode") == "node"
    with pytest.raises(UnknownTaskError):
        task_kind(toy_graph, "painting")


def test_run_splits_always_split_both_link_tasks(small_graph, tiny_config):
    splits = run_splits(small_graph, tiny_config, extra_tasks=["coding"])
    assert sorted(splits.links) == ["jymbii", "pymk"]
    assert sorted(splits.nodes) == ["coding"]

    g_train = training_graph(small_graph, splits)
    for task, rel in (("jymbii", RelationType.MEMBER_JOB), ("pymk", RelationType.MEMBER_MEMBER)):
        for k, j in splits.links[task].heldout_pairs():
            assert small_graph.has_edge(k, j, rel)
            assert not g_train.has_edge(k, j, rel)
    assert g_train.num_nodes == small_graph.num_nodes


def test_metapath_count_must_match_model(toy_graph, tiny_config):
    params = build_model(toy_graph, tiny_config)
    with pytest.raises(TrainingError):
        Trainer(toy_graph, params, build_config(TINY_SETTINGS, {"train.metapaths": "UU,UI"}))


def test_backbone_frozen_after_stage0(toy_graph):
    trainer = make_trainer(toy_graph)
    params = trainer.params
    hot = snapshot(params, ["Z", "E", "P"])
    trainer.stage0_text_pretrain(1)
    assert unchanged(params, hot)

    backbone = snapshot(params, params.group("backbone"))
    stats = trainer.warmup_epoch(0)
    assert unchanged(params, backbone)
    assert not unchanged(params, {"Z": hot["Z"]})
    assert stats.losses["feature"]


def test_backbone_trains_when_not_frozen(toy_graph):
    trainer = make_trainer(toy_graph, **{"train.freeze_backbone": False})
    backbone = snapshot(trainer.params, ["layer0.attn.w_qkv"])
    trainer.warmup_epoch(0)
    assert not unchanged(trainer.params, backbone)


def test_training_is_deterministic_across_workers(toy_graph):
    first = make_trainer(toy_graph)
    second = make_trainer(toy_graph, **{"train.workers": 3})
    for trainer in (first, second):
        trainer.warmup_epoch(0)
        trainer.interleaved_epoch(1, "jymbii")
    for name, tensor in first.params.items():
        assert np.array_equal(tensor.data, second.params[name].data), name
    assert first.history[-1].summary()["counts"] == second.history[-1].summary()["counts"]


def test_interleaved_epoch_trains_tasks(toy_graph, tiny_config):
    splits = prepare_splits(toy_graph, tiny_config, ["coding"])
    trainer = make_trainer(toy_graph, splits)
    stats = trainer.interleaved_epoch(0, ["jymbii", "coding"])
    assert stats.losses["task:jymbii"]
    assert len(stats.losses["task:coding"]) == len(splits.nodes["coding"].train)
    assert trainer.task_nodes("jymbii") == [1, 2]


def test_interleaved_epoch_rejects_unknown_tasks(toy_graph):
    trainer = make_trainer(toy_graph)
    with pytest.raises(UnknownTaskError):
        trainer.interleaved_epoch(0, "painting")
    with pytest.raises(TrainingError):
        trainer.interleaved_epoch(0, "coding")


def test_context_overflow_is_skipped(toy_graph):
    trainer = make_trainer(toy_graph, **{"model.context": 40})
    stats = trainer.warmup_epoch(0)
    assert stats.skips["context_overflow"] > 0


def test_non_finite_loss(toy_graph):
    trainer = make_trainer(toy_graph)
    trainer.params["ln_f.g"].data[...] = np.nan
    with pytest.raises(NonFiniteError):
        trainer.stage0_text_pretrain(1)


def test_empty_text_corpus():
    g = HetGraph()
    g.add_node(1, EntityType.MEMBER)
    g.add_node(2, EntityType.JOB)
    g.add_edge(1, 2, RelationType.MEMBER_JOB)
    with pytest.raises(TrainingError):
        make_trainer(g).stage0_text_pretrain(1)


def test_training_log_and_plot(tmp_path, toy_graph, capsys):
    log_path = tmp_path / "log.jsonl"
    trainer = make_trainer(toy_graph, **{"train.log_path": str(log_path), "train.verbose": True})
    trainer.pretrain()
    assert "✓ warmup epoch 0" in capsys.readouterr().out

    records = read_training_log(str(log_path))
    assert [r["phase"] for r in records] == ["stage0", "warmup"]
    assert json.loads(log_path.read_text().splitlines()[0])["epoch"] == 0
    series = loss_series(records)
    assert "stage0/text" in series and "warmup/feature" in series

    svg = tmp_path / "plots" / "loss.svg"
    assert plot_losses(str(log_path), str(svg)) == len(series)
    assert svg.read_text().lstrip().startswith("<?xml")


@pytest.mark.slow
def test_text_pretraining_reduces_loss(small_graph):
    trainer = make_trainer(small_graph, **{"train.lr": 0.01, "train.stage0_epochs": 3})
    history = trainer.stage0_text_pretrain()
    losses = [stats.mean_loss("text") for stats in history]
    assert losses[-1] < losses[0] - 0.5


def test_warmup_leaves_class_tensors_untouched(toy_graph):
    trainer = make_trainer(toy_graph, **{"model.tie_heads": False})
    params = trainer.params
    classes = snapshot(params, params.group("class"))
    assert classes
    moving = ["Z", "E", "P", "attn_bias", "head.member", "head.job"]
    before = snapshot(params, moving)

    trainer.warmup_epoch(0)
    assert all(params[name].data.tobytes() == values.tobytes() for name, values in classes.items())
    for name in moving:
        assert not np.array_equal(params[name].data, before[name]), name


@pytest.mark.slow
def test_warmup_reduces_feature_loss(small_graph):
    trainer = make_trainer(small_graph, **{"train.lr": 0.01, "train.stage0_epochs": 2,
                                            "train.warmup_epochs": 6})
    history = trainer.pretrain()
    losses = [stats.mean_loss("feature") for stats in history if stats.phase == "warmup"]
    assert len(losses) == 6
    assert losses[-1] < losses[0]
