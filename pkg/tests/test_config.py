import pytest

from config import RunConfig, build_config, config_hash, derive_seed, flatten_config, load_config, make_rng
from errors import ConfigError


def test_defaults():
    config = build_config()
    assert config.train.metapaths == ["UU", "UI", "IU", "UIU", "UUI", "IUI"]
    assert config.eval.recall_at == [20, 40]
    assert config.model.precision == 32


def test_later_layers_win():
    config = build_config({"train.seed": 1, "model.d_model": 32}, {"train.seed": "7"})
    assert config.train.seed == 7
    assert config.model.d_model == 32


def test_strings_are_coerced():
    config = build_config({"train.tasks": "jymbii, coding", "model.tie_heads": "false",
                           "train.log_path": "none"})
    assert config.train.tasks == ["jymbii", "coding"]
    assert config.model.tie_heads is False
    assert config.train.log_path is None


def test_unknown_key():
    with pytest.raises(ConfigError):
        build_config({"train.learning_rate": 0.1})
    with pytest.raises(ConfigError):
        build_config({"optim.lr": 0.1})


@pytest.mark.parametrize("overrides", [
    {"model.d_model": 30, "model.heads": 4},
    {"model.precision": 16},
    {"train.warmup_epochs": 20, "train.epochs": 5},
    {"train.metapaths": "UIU"},
    {"train.mask_ratio": 1.0},
    {"eval.link_ratios": "0.5,0.2,0.2"},
    {"synth.p_in": 0.01, "synth.p_out": 0.02},
])
def test_invalid_values(overrides):
    with pytest.raises(ConfigError):
        build_config(overrides)


def test_load_config_layers(tmp_path, monkeypatch):
    path = tmp_path / "run.toml"
    path.write_text("train.seed = 3\ntrain.epochs = 40\nmodel.layers = 3\n")
    monkeypatch.setenv("MLM_TRAIN__EPOCHS", "30")
    config = load_config(str(path), overrides={"model.layers": 4},
                         base={"train.seed": 1, "train.lr": 0.01})
    assert config.train.seed == 3
    assert config.train.epochs == 30
    assert config.model.layers == 4
    assert config.train.lr == 0.01


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "absent.toml"))


def test_flatten_roundtrip_preserves_hash():
    config = build_config({"train.seed": 5, "eval.sweep_ng": "1,2"})
    rebuilt = build_config(flatten_config(config))
    assert rebuilt == config
    assert config_hash(rebuilt) == config_hash(config)
    assert config_hash(config) != config_hash(RunConfig())


def test_with_overrides():
    config = build_config().with_overrides({"train.batch_size": 2})
    assert config.train.batch_size == 2


def test_derive_seed_is_stable():
    assert derive_seed(0, "ego", 3, 12) == derive_seed(0, "ego", 3, 12)
    assert derive_seed(0, "ego", 3, 12) != derive_seed(1, "ego", 3, 12)
    assert 0 <= derive_seed("x") < 2 ** 64
    assert make_rng(4, "a").integers(1 << 30) == make_rng(4, "a").integers(1 << 30)
