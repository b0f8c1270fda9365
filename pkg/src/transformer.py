"""
Transformer Module

Decoder-only causal transformer over the unified vocabulary, with:

- node-token input embeddings composed from feature, entity-type and
  hop-distance tables
- an additive attention bias ψᵀb between generating completion positions
  and node tokens (one b per layer, or one shared b)
- restricted-softmax language-model losses over text, member or job tokens
- class-token heads for node tasks and a multinomial head for link tasks

Pre-layer-norm residual blocks with GELU feed-forward layers.
"""

import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np

from autodiff import Tensor, concat, layer_norm, no_grad
from errors import ContextOverflowError, ModelError, ShapeError, UnknownTaskError
from hetgraph import EntityType
from prompts import BiasMatrix, LossSpace, PromptInstance, PromptKind
from vocab import ENTITY_INDEX, EmbeddingTables, VocabLayout


MASK_VALUE = -1e9

HOT_TENSORS = ("Z", "E", "P")
BIAS_TENSOR = "attn_bias"
UNTIED_HEADS = ("head.member", "head.job")


@dataclass(frozen=True)
class TransformerConfig:
    """Shape and options of the model."""

    layers: int
    heads: int
    d_model: int
    d_ff: int
    context: int
    v_total: int
    n_metapaths: int
    depth: int = 2
    precision: int = 32
    init_std: float = 0.02
    tie_heads: bool = True
    bias_scope: str = "layer"
    attention_alignment: bool = True
    entity_positional: bool = True

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ModelError(f"d_model {self.d_model} is not divisible by {self.heads} heads")
        if self.precision not in (32, 64):
            raise ModelError(f"precision must be 32 or 64, got {self.precision}")
        if self.bias_scope not in ("layer", "global"):
            raise ModelError(f"bias_scope must be 'layer' or 'global', got {self.bias_scope!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    @classmethod
    def from_settings(cls, model, layout: VocabLayout, n_metapaths: int, depth: int,
                      precision: Optional[int] = None) -> "TransformerConfig":
        """Build from a ModelConfig section, a vocabulary layout and |Φ|."""
        return cls(
            layers=model.layers,
            heads=model.heads,
            d_model=model.d_model,
            d_ff=model.d_ff,
            context=model.context,
            v_total=layout.v_total,
            n_metapaths=n_metapaths,
            depth=depth,
            precision=precision or model.precision,
            init_std=model.init_std,
            tie_heads=model.tie_heads,
            bias_scope=model.bias_scope,
            attention_alignment=model.attention_alignment,
            entity_positional=model.entity_positional,
        )


class ParameterStore:
    """
    Named parameter tensors with a freeze mask.

    Groups:
        backbone: text/position embeddings, attention, feed-forward, layer norms
        hot: Z (node features), E (entity types), P (hop distances)
        bias: attention-alignment vectors b
        class: one class-token table per node task
        head: untied member/job prediction heads (untied mode only)

    In tied mode the member and job heads are views of the member and job
    rows of Z. Tensors switched off by an ablation are held at zero and stay
    frozen regardless of training phase.
    """

    def __init__(self, config: TransformerConfig, layout: VocabLayout):
        if layout.v_total != config.v_total:
            raise ShapeError(f"layout has {layout.v_total} tokens, config expects {config.v_total}")
        self.config = config
        self.layout = layout
        self.tensors: Dict[str, Tensor] = {}
        self.frozen: Set[str] = set()
        self.fixed: Set[str] = set()

    @classmethod
    def initialize(cls, config: TransformerConfig, layout: VocabLayout, seed: int) -> "ParameterStore":
        """Gaussian-initialized store (std ``init_std``); norms start at identity, biases at zero."""
        store = cls(config, layout)
        rng = np.random.default_rng(seed)
        d, dtype = config.d_model, config.dtype

        def gaussian(name: str, *shape: int) -> None:
            store._add(name, rng.normal(0.0, config.init_std, size=shape).astype(dtype))

        def constant(name: str, value: float, *shape: int) -> None:
            store._add(name, np.full(shape, value, dtype=dtype))

        gaussian("text_embed", layout.v_text, d)
        gaussian("pos_embed", config.context, d)
        for l in range(config.layers):
            prefix = f"layer{l}"
            constant(f"{prefix}.ln1.g", 1.0, d)
            constant(f"{prefix}.ln1.b", 0.0, d)
            gaussian(f"{prefix}.attn.w_qkv", d, 3 * d)
            constant(f"{prefix}.attn.b_qkv", 0.0, 3 * d)
            gaussian(f"{prefix}.attn.w_o", d, d)
            constant(f"{prefix}.attn.b_o", 0.0, d)
            constant(f"{prefix}.ln2.g", 1.0, d)
            constant(f"{prefix}.ln2.b", 0.0, d)
            gaussian(f"{prefix}.mlp.w_in", d, config.d_ff)
            constant(f"{prefix}.mlp.b_in", 0.0, config.d_ff)
            gaussian(f"{prefix}.mlp.w_out", config.d_ff, d)
            constant(f"{prefix}.mlp.b_out", 0.0, d)
        constant("ln_f.g", 1.0, d)
        constant("ln_f.b", 0.0, d)

        gaussian("Z", layout.n_nodes, d)
        gaussian("E", len(ENTITY_INDEX), d)
        gaussian("P", config.depth + 1, d)
        bias_rows = config.layers if config.bias_scope == "layer" else 1
        constant(BIAS_TENSOR, 0.0, bias_rows, config.n_metapaths)

        for task, count in layout.class_counts:
            gaussian(f"class.{task}", count, d)
        if not config.tie_heads:
            gaussian("head.member", layout.n_members, d)
            gaussian("head.job", layout.n_jobs, d)

        if not config.entity_positional:
            store._fix_at_zero("E", "P")
        if not config.attention_alignment:
            store._fix_at_zero(BIAS_TENSOR)
        return store

    @classmethod
    def from_arrays(cls, config: TransformerConfig, layout: VocabLayout, arrays: Dict[str, np.ndarray],
                    frozen: Sequence[str] = (), fixed: Sequence[str] = ()) -> "ParameterStore":
        """Rebuild a store from saved arrays (in saved order) and freeze sets."""
        store = cls(config, layout)
        for name, values in arrays.items():
            store._add(name, np.array(values, dtype=config.dtype))
        store.fixed = set(fixed)
        store.freeze(sorted(set(frozen) | store.fixed))
        return store

    def _add(self, name: str, values: np.ndarray) -> None:
        self.tensors[name] = Tensor(values, requires_grad=True, name=name)

    def _fix_at_zero(self, *names: str) -> None:
        for name in names:
            self.tensors[name].data[...] = 0
            self.fixed.add(name)
        self.freeze(names)

    # Access

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> List[str]:
        return list(self.tensors)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def group(self, group: str) -> List[str]:
        """Names belonging to a parameter group."""
        if group == "hot":
            return [n for n in HOT_TENSORS if n in self.tensors]
        if group == "bias":
            return [BIAS_TENSOR]
        if group == "class":
            return [n for n in self.tensors if n.startswith("class.")]
        if group == "head":
            return [n for n in UNTIED_HEADS if n in self.tensors]
        if group == "backbone":
            others = set(HOT_TENSORS) | {BIAS_TENSOR} | set(UNTIED_HEADS)
            return [n for n in self.tensors if n not in others and not n.startswith("class.")]
        raise KeyError(f"unknown parameter group {group!r}")

    # Freeze mask

    def freeze(self, names: Sequence[str]) -> None:
        for name in names:
            self.frozen.add(name)
            self.tensors[name].requires_grad = False
            self.tensors[name].grad = None

    def set_trainable(self, names: Sequence[str]) -> None:
        """Make exactly ``names`` trainable (ablation-fixed tensors stay frozen)."""
        wanted = set(names) - self.fixed
        for name, tensor in self.tensors.items():
            if name in wanted:
                self.frozen.discard(name)
                tensor.requires_grad = True
            else:
                self.frozen.add(name)
                tensor.requires_grad = False
                tensor.grad = None

    def trainable(self) -> List[Tuple[str, Tensor]]:
        return [(n, t) for n, t in self.tensors.items() if n not in self.frozen]

    def zero_grad(self) -> None:
        for tensor in self.tensors.values():
            tensor.grad = None

    # Views

    def member_head(self) -> Tensor:
        if self.config.tie_heads:
            return self.tensors["Z"][:self.layout.n_members]
        return self.tensors["head.member"]

    def job_head(self) -> Tensor:
        if self.config.tie_heads:
            return self.tensors["Z"][self.layout.n_members:]
        return self.tensors["head.job"]

    def entity_head(self, entity_type: EntityType) -> Tensor:
        return self.member_head() if entity_type is EntityType.MEMBER else self.job_head()

    def class_head(self, task: str) -> Tensor:
        name = f"class.{task}"
        if name not in self.tensors:
            raise UnknownTaskError(f"no class head for task {task!r}")
        return self.tensors[name]

    def bias_row(self, layer: int) -> Tensor:
        return self.tensors[BIAS_TENSOR][layer if self.config.bias_scope == "layer" else 0]

    def embedding_tables(self) -> EmbeddingTables:
        return EmbeddingTables(
            text_embed=self.tensors["text_embed"],
            Z=self.tensors["Z"],
            E=self.tensors["E"],
            P=self.tensors["P"],
        )

    # State

    def state(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data for name, tensor in self.tensors.items()}

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        """
        Copy arrays into the store.

        Raises:
            ShapeError: On a missing tensor or a shape mismatch
        """
        for name, tensor in self.tensors.items():
            if name not in arrays:
                raise ShapeError(f"missing tensor {name}")
            if arrays[name].shape != tensor.shape:
                raise ShapeError(f"tensor {name} has shape {arrays[name].shape}, expected {tensor.shape}")
            tensor.data[...] = arrays[name]


@dataclass
class ForwardOutput:
    hidden: Tensor
    logits: Optional[Tensor] = None


def embed_tokens(params: ParameterStore, instance: PromptInstance) -> Tensor:
    """
    Input embeddings (T, d): text rows, or z + e_type + p_hop for node tokens,
    plus the learned absolute position row.

    Raises:
        ContextOverflowError: If the sequence is longer than the context
        ShapeError: If a token is a class token or outside the vocabulary
    """
    layout = params.layout
    tokens = np.asarray(instance.tokens, dtype=np.int64)
    length = len(tokens)
    if length > params.config.context:
        raise ContextOverflowError(length, params.config.context)
    if length == 0:
        raise ShapeError("empty token sequence")
    if tokens.max() >= layout.node_range[1] or tokens.min() < 0:
        raise ShapeError("input tokens must be text or node tokens")

    # Node token ids continue right after the text ids, so one gather covers both
    rows = concat([params["text_embed"], params["Z"]], axis=0).take(tokens)

    is_node = np.asarray(instance.is_node, dtype=bool)
    if is_node.any():
        entity = np.zeros(length, dtype=np.int64)
        for t in np.flatnonzero(is_node):
            entity[t] = ENTITY_INDEX[layout.entity_of(int(tokens[t]))]
        hops = np.asarray(instance.hops, dtype=np.int64)
        mask = is_node.astype(params.config.dtype)[:, None]
        rows = rows + (params["E"].take(entity) + params["P"].take(hops)) * mask

    return rows + params["pos_embed"].take(np.arange(length))


def biased_attention(q: Tensor, k: Tensor, v: Tensor, psi: Optional[np.ndarray] = None,
                     b_layer: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """
    Causal multi-head attention with an additive proximity bias.

    score(t, t') = q_t·k_t' / sqrt(d_head) + ψ(t, t')ᵀ b, then the causal
    mask, then a row softmax.

    Args:
        q, k, v: (heads, T, d_head) tensors
        psi: Optional (T, T, |Φ|) proximity array
        b_layer: Bias vector of length |Φ| (required with psi)

    Returns:
        (output (heads, T, d_head), pre-mask scores (heads, T, T))

    Raises:
        ShapeError: On inconsistent shapes
    """
    if q.ndim != 3 or k.shape != q.shape or v.shape != q.shape:
        raise ShapeError(f"q, k, v must share a (heads, T, d_head) shape: {q.shape}, {k.shape}, {v.shape}")
    _, length, d_head = q.shape

    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(d_head))
    if psi is not None and b_layer is not None:
        if psi.shape[:2] != (length, length) or psi.shape[2] != b_layer.shape[0]:
            raise ShapeError(f"bias shape {psi.shape} does not match T={length}, |b|={b_layer.shape[0]}")
        flat = Tensor(psi.reshape(-1, psi.shape[2]).astype(q.dtype))
        scores = scores + (flat @ b_layer).reshape(length, length)

    mask = np.triu(np.full((length, length), MASK_VALUE, dtype=q.dtype), k=1)
    weights = (scores + mask).softmax(axis=-1)
    return weights @ v, scores


def _block(params: ParameterStore, layer: int, x: Tensor, psi: Optional[np.ndarray]) -> Tensor:
    config = params.config
    prefix = f"layer{layer}"
    p = lambda name: params[f"{prefix}.{name}"]
    length, d, heads = x.shape[0], config.d_model, config.heads

    h = layer_norm(x, p("ln1.g"), p("ln1.b"))
    qkv = h @ p("attn.w_qkv") + p("attn.b_qkv")

    def split(index: int) -> Tensor:
        part = qkv[:, index * d:(index + 1) * d]
        return part.reshape(length, heads, config.d_head).transpose(1, 0, 2)

    b_layer = params.bias_row(layer) if psi is not None else None
    attended, _ = biased_attention(split(0), split(1), split(2), psi, b_layer)
    attended = attended.transpose(1, 0, 2).reshape(length, d)
    x = x + (attended @ p("attn.w_o") + p("attn.b_o"))

    h = layer_norm(x, p("ln2.g"), p("ln2.b"))
    hidden = (h @ p("mlp.w_in") + p("mlp.b_in")).gelu()
    return x + (hidden @ p("mlp.w_out") + p("mlp.b_out"))


def full_logits(params: ParameterStore, hidden: Tensor) -> Tensor:
    """Logits over the whole vocabulary: text, members, jobs, then class tokens."""
    tables = [params["text_embed"], params.member_head(), params.job_head()]
    tables += [params.class_head(task) for task, _ in params.layout.class_counts]
    return hidden @ concat(tables, axis=0).T


def forward(params: ParameterStore, instance: PromptInstance, bias: Optional[BiasMatrix] = None,
            with_logits: bool = True) -> ForwardOutput:
    """
    Run the decoder over one instance.

    Args:
        params: Parameters
        instance: Prompt instance (prompt plus completion)
        bias: Optional attention-bias matrix; ignored when alignment is off
        with_logits: Also compute logits over the full vocabulary

    Returns:
        ForwardOutput with final-norm hidden states (T, d) and optional logits

    Raises:
        ContextOverflowError: If the instance does not fit the context
    """
    x = embed_tokens(params, instance)
    psi = None
    if bias is not None and params.config.attention_alignment and not bias.is_empty:
        psi = bias.dense(len(instance))

    for layer in range(params.config.layers):
        x = _block(params, layer, x, psi)
    hidden = layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    return ForwardOutput(hidden=hidden, logits=full_logits(params, hidden) if with_logits else None)


def restricted_log_softmax(logits: Tensor, allowed: Tuple[int, int]) -> Tensor:
    """
    Log-probabilities normalized over a contiguous token range only.

    Args:
        logits: (..., V_total) logits
        allowed: [start, stop) token range

    Returns:
        (..., stop - start) log-probabilities; tokens outside the range have
        probability zero by construction

    Raises:
        ModelError: If the range is empty or out of bounds
    """
    start, stop = allowed
    if stop <= start:
        raise ModelError(f"empty allowed token range [{start}, {stop})")
    if start < 0 or stop > logits.shape[-1]:
        raise ModelError(f"allowed range [{start}, {stop}) outside {logits.shape[-1]} logits")
    return logits[..., start:stop].log_softmax(axis=-1)


def restricted_probabilities(logits: np.ndarray, allowed: Tuple[int, int]) -> np.ndarray:
    """Full-vocabulary probability vector with exact zeros outside ``allowed``."""
    start, stop = allowed
    if stop <= start:
        raise ModelError(f"empty allowed token range [{start}, {stop})")
    window = logits[..., start:stop]
    shifted = np.exp(window - window.max(axis=-1, keepdims=True))
    probs = np.zeros_like(logits, dtype=np.float64)
    probs[..., start:stop] = shifted / shifted.sum(axis=-1, keepdims=True)
    return probs


def _loss_table(params: ParameterStore, space: LossSpace) -> Tuple[Tensor, int]:
    """Output table for a loss space and the token id of its first row."""
    layout = params.layout
    if space is LossSpace.TEXT_ONLY:
        return params["text_embed"], 0
    if space is LossSpace.MEMBER_ONLY:
        return params.member_head(), layout.member_range[0]
    return params.job_head(), layout.job_range[0]


def lm_loss(params: ParameterStore, instance: PromptInstance,
            bias: Optional[BiasMatrix] = None) -> Tensor:
    """
    Mean negative restricted log-likelihood of the completion tokens.

    Position t predicts token t+1; only completion tokens contribute, each
    normalized over its loss space (text, member or job tokens).

    Raises:
        ModelError: If the instance has no targets or a target lies outside
            its loss space
    """
    if instance.n_targets == 0 or instance.loss_space is None:
        raise ModelError(f"{instance.kind.value} instance has no completion targets")
    table, offset = _loss_table(params, instance.loss_space)
    targets = np.asarray(instance.targets, dtype=np.int64) - offset
    if targets.min() < 0 or targets.max() >= table.shape[0]:
        raise ModelError(f"completion targets fall outside the {instance.loss_space.value} token range")

    out = forward(params, instance, bias, with_logits=False)
    start = instance.prompt_length
    predicting = out.hidden.take(np.arange(start - 1, len(instance) - 1))
    log_probs = (predicting @ table.T).log_softmax(axis=-1)
    picked = log_probs[np.arange(len(targets)), targets]
    return -picked.mean()


def last_hidden(params: ParameterStore, instance: PromptInstance,
                bias: Optional[BiasMatrix] = None) -> Tensor:
    """Final-layer hidden state at the last position."""
    out = forward(params, instance, bias, with_logits=False)
    return out.hidden[len(instance) - 1]


def node_class_logits(params: ParameterStore, h_last: Tensor, task: str) -> Tensor:
    """Class scores C^n · h for a node task."""
    return params.class_head(task) @ h_last


def link_multinomial_logits(params: ParameterStore, h_last: Tensor, target_entity: EntityType) -> Tensor:
    """Scores over all members (or all jobs) from the structural prediction head."""
    return params.entity_head(target_entity) @ h_last


def node_task_loss(params: ParameterStore, instance: PromptInstance,
                   bias: Optional[BiasMatrix] = None) -> Tensor:
    """
    Negative log-probability of the true class.

    Raises:
        ModelError: If the instance carries no label
    """
    if instance.label is None:
        raise ModelError(f"node {instance.center} has no label for {instance.name}")
    scores = node_class_logits(params, last_hidden(params, instance, bias), instance.name)
    if not 0 <= instance.label < scores.shape[0]:
        raise ModelError(f"label {instance.label} outside {scores.shape[0]} classes of {instance.name}")
    return -scores.log_softmax(axis=-1)[instance.label]


def _entity_of_space(space: LossSpace) -> EntityType:
    if space is LossSpace.MEMBER_ONLY:
        return EntityType.MEMBER
    if space is LossSpace.JOB_ONLY:
        return EntityType.JOB
    raise ModelError("link targets must be members or jobs")


def entity_rows(layout: VocabLayout, node_ids, entity_type: EntityType) -> np.ndarray:
    """Row indices of nodes inside the member (or job) head."""
    offset = 1 if entity_type is EntityType.MEMBER else layout.n_members + 1
    return np.asarray(sorted(node_ids), dtype=np.int64) - offset


def link_task_loss(params: ParameterStore, instance: PromptInstance,
                   bias: Optional[BiasMatrix] = None) -> Tensor:
    """
    Mean negative log-softmax score over the held-out neighbors.

    Raises:
        ModelError: If nothing is held out
    """
    if not instance.heldout:
        raise ModelError(f"link instance for node {instance.center} has no held-out neighbors")
    entity = _entity_of_space(instance.loss_space)
    scores = link_multinomial_logits(params, last_hidden(params, instance, bias), entity)
    rows = entity_rows(params.layout, instance.heldout, entity)
    return -scores.log_softmax(axis=-1)[rows].mean()


def instance_loss(params: ParameterStore, instance: PromptInstance,
                  bias: Optional[BiasMatrix] = None) -> Tensor:
    """Loss for any prompt kind."""
    if instance.kind in (PromptKind.FEATURE, PromptKind.STRUCTURE):
        return lm_loss(params, instance, bias)
    if instance.kind is PromptKind.NODE_TASK:
        return node_task_loss(params, instance, bias)
    return link_task_loss(params, instance, bias)


def predict_class_probabilities(params: ParameterStore, instance: PromptInstance,
                                bias: Optional[BiasMatrix] = None) -> np.ndarray:
    """Softmax over class tokens for a node-task prompt (no tape)."""
    with no_grad():
        scores = node_class_logits(params, last_hidden(params, instance, bias), instance.name)
        return scores.softmax(axis=-1).data.astype(np.float64)


def predict_link_probabilities(params: ParameterStore, instance: PromptInstance,
                               bias: Optional[BiasMatrix] = None) -> np.ndarray:
    """Softmax over all members or all jobs for a link-task prompt (no tape)."""
    with no_grad():
        entity = _entity_of_space(instance.loss_space)
        scores = link_multinomial_logits(params, last_hidden(params, instance, bias), entity)
        return scores.softmax(axis=-1).data.astype(np.float64)
