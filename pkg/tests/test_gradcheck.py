import numpy as np
import pytest

from conftest import TINY_SETTINGS
from config import build_config
from ego_graph import EgoGraph, sample_ego_graph
from errors import ModelError
from gradcheck import gradient_check, relative_error, tied_head_coords
from metapath import parse_metapath
from trainer import Trainer, build_model
from transformer import instance_loss


def center_only(k):
    return EgoGraph(center=k, nodes=((k, 0),), edges=(), depth=2)


def tiny_trainer(g, precision=64, tie_heads=False):
    config = build_config(TINY_SETTINGS, {"model.precision": precision, "model.tie_heads": tie_heads})
    params = build_model(g, config)
    params.set_trainable(params.names())
    return Trainer(g, params, config)


def instances_for(trainer, g):
    builder = trainer.builder
    ego = sample_ego_graph(g, 1, depth=2, fanout=3, seed=0)
    built = [
        builder.build_feature_prompt(ego, 1, "headline"),
        builder.build_first_order_prompt(center_only(1), 1, parse_metapath("UI"), n_end=2, seed=0),
        builder.build_higher_order_prompt(center_only(1), 1, parse_metapath("UIU"), n_mid=2, n_end=2, seed=0),
        builder.build_node_task_prompt(ego, 1, "work_mode"),
        trainer.task_instance(1, 0, "jymbii"),
    ]
    return [trainer.with_bias(instance) for instance in built]


def summed_loss(params, instances):
    def loss_fn():
        total = instance_loss(params, *instances[0])
        for instance, bias in instances[1:]:
            total = total + instance_loss(params, instance, bias)
        return total
    return loss_fn


def test_relative_error():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 3.0) == pytest.approx(0.5)
    assert relative_error(0.0, 1e-7) == pytest.approx(1e-2)


def test_tiny_model_gradients(toy_graph):
    trainer = tiny_trainer(toy_graph)
    params = trainer.params
    rng = np.random.default_rng(0)
    params["attn_bias"].data[...] = rng.normal(0.0, 0.5, size=params["attn_bias"].shape)
    instances = instances_for(trainer, toy_graph)

    report = gradient_check(params, summed_loss(params, instances), n_coords=4, seed=0)
    assert report.passed(1e-4), report.worst()
    checked = {entry.name for entry in report.entries if entry.n_checked > 0}
    for name in ("Z", "E", "P", "attn_bias", "class.work_mode", "head.job",
                 "layer0.attn.w_qkv", "layer1.mlp.w_out", "text_embed", "ln_f.g"):
        assert name in checked


def test_frozen_tensors_are_listed_not_perturbed(toy_graph):
    trainer = tiny_trainer(toy_graph)
    params = trainer.params
    params.freeze(params.group("backbone"))
    instances = instances_for(trainer, toy_graph)[:2]
    before = params["layer0.attn.w_o"].data.copy()

    report = gradient_check(params, summed_loss(params, instances), n_coords=2, seed=1,
                            names=["Z", "layer0.attn.w_o"])
    entries = {entry.name: entry for entry in report.entries}
    assert entries["layer0.attn.w_o"].frozen and entries["layer0.attn.w_o"].n_checked == 0
    assert entries["Z"].n_checked == 2
    assert np.array_equal(params["layer0.attn.w_o"].data, before)
    assert report.passed(1e-4)


def test_requires_double_precision(toy_graph):
    trainer = tiny_trainer(toy_graph, precision=32)
    instances = instances_for(trainer, toy_graph)[:1]
    with pytest.raises(ModelError):
        gradient_check(trainer.params, summed_loss(trainer.params, instances))


def test_tied_heads_accumulate_both_paths(toy_graph):
    trainer = tiny_trainer(toy_graph, tie_heads=True)
    params = trainer.params
    assert "head.job" not in params.names() and "head.member" not in params.names()
    rng = np.random.default_rng(0)
    params["attn_bias"].data[...] = rng.normal(0.0, 0.5, size=params["attn_bias"].shape)
    instances = instances_for(trainer, toy_graph)

    coords = tied_head_coords(params, instances, n_coords=4, seed=0)
    assert coords["Z"]
    report = gradient_check(params, summed_loss(params, instances), coords=coords)
    assert [entry.name for entry in report.entries] == ["Z"]
    assert report.entries[0].n_checked == len(coords["Z"])
    assert report.passed(1e-4), report.worst()


def test_untied_heads_have_no_shared_rows(toy_graph):
    trainer = tiny_trainer(toy_graph)
    assert tied_head_coords(trainer.params, instances_for(trainer, toy_graph)) == {}
