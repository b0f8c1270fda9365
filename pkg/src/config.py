"""
Configuration Module

Run configuration for data generation, the model, training and evaluation.
Config files are flat ``key = value`` files (``section.field = value``) read
with python-dotenv; environment variables prefixed ``MLM_`` and command-line
overrides are layered on top, and pydantic validates and coerces the result.
"""

import hashlib
import json
import os
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Tuple

import numpy as np
from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from errors import ConfigError


ENV_PREFIX = "MLM_"

# Six metapaths trained by default; UUU and IUU are buildable but opt-in
DEFAULT_METAPATHS = ["UU", "UI", "IU", "UIU", "UUI", "IUI"]


def _split_list(value):
    """Accept comma-separated strings wherever a list is expected."""
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SynthConfig(_Section):
    """Parameters of the planted-cluster marketplace generator."""

    n_members: int = 300
    n_jobs: int = 200
    n_clusters: int = 5
    p_in: float = 0.05
    p_out: float = 0.005
    p_uu: float = 0.05
    words_per_cluster: int = 8
    words_per_text: int = 5
    label_noise: float = 0.1
    seed: int = 0

    @field_validator("p_in", "p_out", "p_uu", "label_noise")
    @classmethod
    def check_probability(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"probability {value} outside [0, 1]")
        return value

    @model_validator(mode="after")
    def check_consistency(self):
        if self.p_in <= self.p_out:
            raise ValueError("p_in must be greater than p_out")
        if self.n_clusters < 2:
            raise ValueError("n_clusters must be at least 2")
        if self.n_members < 0 or self.n_jobs < 0:
            raise ValueError("node counts must be non-negative")
        return self


class ModelConfig(_Section):
    """Transformer shape plus the graph-specific embedding and bias options."""

    layers: int = 2
    heads: int = 2
    d_model: int = 64
    d_ff: int = 256
    context: int = 256
    precision: int = 32
    init_std: float = 0.02
    tie_heads: bool = True
    bias_scope: Literal["layer", "global"] = "layer"
    attention_alignment: bool = True
    entity_positional: bool = True
    bias_completion_keys: bool = True

    @model_validator(mode="after")
    def check_consistency(self):
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        return self


class TrainConfig(_Section):
    """Schedule, sampling and optimizer settings."""

    seed: int = 0
    stage0_epochs: int = 3
    warmup_epochs: int = 10
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 8
    grad_clip: float = 1.0
    metapaths: List[str] = DEFAULT_METAPATHS
    metapath_policy: Literal["random", "all"] = "random"
    freeze_backbone: bool = True
    tasks: List[str] = ["jymbii"]
    depth: int = 2
    fanout: int = 5
    n_end: int = 3
    n_mid: int = 3
    mask_ratio: float = 0.5
    max_feature_bytes: int = 96
    node_task_features: List[str] = ["biography"]
    workers: int = 1
    log_path: Optional[str] = None
    verbose: bool = True

    @field_validator("metapaths", "tasks", "node_task_features", mode="before")
    @classmethod
    def split_lists(cls, value):
        return _split_list(value)

    @model_validator(mode="after")
    def check_consistency(self):
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs must not exceed epochs")
        if not self.metapaths:
            raise ValueError("metapath set must not be empty")
        if not any(len(name) == 2 for name in self.metapaths):
            raise ValueError("metapath set needs at least one one-hop metapath")
        if self.depth < 1 or self.fanout < 1:
            raise ValueError("depth and fanout must be at least 1")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in [0, 1)")
        return self


class EvalConfig(_Section):
    """Splits, N_g averaging and metric cut-offs."""

    n_ego_samples: int = 4
    n_ego_samples_valid: int = 4
    sweep_ng: List[int] = []
    recall_at: List[int] = [20, 40]
    ndcg_at: List[int] = [100]
    min_degree: int = 5
    link_ratios: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    node_ratios: Tuple[float, float, float] = (0.7, 0.15, 0.15)
    split: Literal["valid", "test"] = "test"
    baselines: bool = True

    @field_validator("sweep_ng", "recall_at", "ndcg_at", "link_ratios", "node_ratios", mode="before")
    @classmethod
    def split_lists(cls, value):
        return _split_list(value)

    @field_validator("link_ratios", "node_ratios")
    @classmethod
    def check_ratios(cls, value):
        if abs(sum(value) - 1.0) > 1e-9:
            raise ValueError(f"split ratios {value} must sum to 1")
        return value


class RunConfig(_Section):
    """Everything a run needs; one flat file maps onto these four sections."""

    synth: SynthConfig = SynthConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()

    def with_overrides(self, overrides: Mapping[str, object]) -> "RunConfig":
        """Return a copy with dotted-key overrides applied and re-validated."""
        return build_config(flatten_config(self), overrides)


SECTIONS = {"synth": SynthConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}


def flatten_config(config: RunConfig) -> Dict[str, object]:
    """Flatten a RunConfig into ``section.field`` keys."""
    flat = {}
    for section, values in config.model_dump(mode="json").items():
        for key, value in values.items():
            flat[f"{section}.{key}"] = value
    return flat


def build_config(*layers: Mapping[str, object]) -> RunConfig:
    """
    Merge flat ``section.field`` layers (later wins) into a validated RunConfig.

    Args:
        *layers: Mappings of dotted keys to raw (possibly string) values

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: On unknown keys or values that fail validation
    """
    sections: Dict[str, Dict[str, object]] = {name: {} for name in SECTIONS}
    for layer in layers:
        for key, value in layer.items():
            if value is None:
                continue
            section, _, field = key.partition(".")
            if section not in SECTIONS or field not in SECTIONS[section].model_fields:
                raise ConfigError(f"unknown config key: {key}")
            if isinstance(value, str) and value.strip().lower() in ("none", "null"):
                value = None
            sections[section][field] = value

    try:
        return RunConfig(**{name: SECTIONS[name](**values) for name, values in sections.items()})
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def _environment_overrides() -> Dict[str, str]:
    """Collect MLM_SECTION__FIELD environment variables as dotted keys."""
    load_dotenv()
    overrides = {}
    for name, value in os.environ.items():
        if name.startswith(ENV_PREFIX) and "__" in name:
            section, field = name[len(ENV_PREFIX):].lower().split("__", 1)
            overrides[f"{section}.{field}"] = value
    return overrides


def load_config(path: Optional[str] = None,
                overrides: Optional[Mapping[str, object]] = None,
                base: Optional[Mapping[str, object]] = None) -> RunConfig:
    """
    Load a run configuration.

    Precedence (lowest to highest): model defaults, ``base``, config file, ``MLM_*``
    environment variables, explicit overrides.

    Args:
        path: Optional flat key/value config file
        overrides: Optional dotted-key overrides (from CLI flags)
        base: Optional dotted-key values below the file layer (e.g. saved in a checkpoint)

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: If the file is missing or any value is invalid
    """
    file_values: Dict[str, object] = {}
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file not found: {path}")
        file_values = dict(dotenv_values(path))

    return build_config(base or {}, file_values, _environment_overrides(), overrides or {})


def config_hash(config: RunConfig) -> str:
    """MD5 of the canonical JSON dump of a configuration."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.md5(canonical.encode()).hexdigest()


def derive_seed(*parts) -> int:
    """
    Derive a 64-bit seed from a run seed and any identifying parts.

    Used as ``derive_seed(run_seed, node_id, epoch, "purpose")`` so every
    stochastic step is reproducible independently of iteration order.
    """
    identifier = "|".join(str(part) for part in parts)
    return int.from_bytes(hashlib.md5(identifier.encode()).digest()[:8], "little")


def make_rng(*parts) -> np.random.Generator:
    """Seeded numpy generator for a derived seed."""
    return np.random.default_rng(derive_seed(*parts))
