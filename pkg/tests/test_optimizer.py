import numpy as np
import pytest

from autodiff import Tensor
from ego_graph import sample_ego_graph
from errors import NonFiniteError
from optimizer import Adam, optimizer_step
from prompts import PromptBuilder
from trainer import build_model
from transformer import lm_loss


def param(values, grad=None, name="w"):
    tensor = Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)
    if grad is not None:
        tensor.grad = np.array(grad, dtype=np.float64)
    return tensor


def test_first_step_moves_by_learning_rate():
    w = param([1.0, -2.0, 0.5], grad=[0.3, -4.0, 0.0])
    Adam(lr=0.1, grad_clip=None).step([("w", w)])
    assert np.allclose(w.data, [0.9, -1.9, 0.5])
    assert w.grad is None


def test_clipping_scales_moments():
    w = param([0.0, 0.0], grad=[3.0, 4.0])
    opt = Adam(lr=0.1, grad_clip=1.0)
    norm = opt.step([("w", w)])
    assert norm == pytest.approx(5.0)
    assert np.allclose(opt.m["w"], 0.1 * np.array([0.6, 0.8]))


def test_skips_tensors_without_gradients():
    w = param([1.0], grad=[1.0])
    idle = param([2.0], name="idle")
    opt = Adam(lr=0.1)
    opt.step([("w", w), ("idle", idle)])
    assert idle.data[0] == 2.0
    assert "idle" not in opt.steps
    assert opt.steps == {"w": 1}


def test_rejects_non_finite_gradients():
    w = param([1.0, 1.0], grad=[np.nan, 0.0])
    with pytest.raises(NonFiniteError):
        Adam().step([("w", w)])
    assert np.array_equal(w.data, [1.0, 1.0])


def test_restored_state_continues_identically():
    a = param([1.0, 2.0])
    b = param([1.0, 2.0])
    opt_a = Adam(lr=0.05)
    for grad in ([0.5, -1.0], [0.2, 0.1]):
        a.grad = np.array(grad)
        opt_a.step([("w", a)])
    b.data[...] = a.data
    opt_b = Adam(lr=0.05)
    opt_b.load_state(opt_a.state_arrays(), opt_a.steps)

    a.grad = np.array([1.0, 1.0])
    b.grad = np.array([1.0, 1.0])
    opt_a.step([("w", a)])
    opt_b.step([("w", b)])
    assert np.array_equal(a.data, b.data)


def test_optimizer_step_leaves_frozen_tensors(toy_graph, tiny_config):
    params = build_model(toy_graph, tiny_config)
    params.freeze(params.group("backbone"))
    builder = PromptBuilder(toy_graph, params.layout, max_feature_bytes=16)
    instance = builder.build_feature_prompt(sample_ego_graph(toy_graph, 2, seed=0), 2, "headline")
    backbone = {name: params[name].data.copy() for name in params.group("backbone")}
    z = params["Z"].data.copy()

    lm_loss(params, instance).backward()
    optimizer_step(params, Adam(lr=0.01))
    for name, values in backbone.items():
        assert np.array_equal(params[name].data, values)
    assert not np.array_equal(params["Z"].data, z)
    assert all(tensor.grad is None for _, tensor in params.items())
