"""Dense LLaMA-style decoder: grouped-query attention + SwiGLU MLP.

Pre-norm residual stack, rotary positions, no biases, no dropout.
Forward code accepts token batches [B, T] or single sequences [T]; all
per-head work runs as batched numpy matmuls.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import numpy as np

from . import container
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .tensor import (
    Tensor,
    concat,
    cross_entropy,
    embedding,
    matmul,
    no_grad,
    narrow,
    permute,
    repeat,
    reshape,
    rms_norm,
    rope,
    silu,
    softmax,
)

INIT_STD = 0.02


@dataclass
class ModelConfig:
    """Shape parameters of the dense model.

    ``d_k`` is the total query/output projection width and must equal
    ``d_h``; key/value projections are ``h_kv * head_dim`` wide.
    """

    d_h: int
    d_k: int
    h: int
    h_kv: int
    n: int
    l: int
    vocab: int
    max_seq: int
    rope_base: float = 10000.0
    norm_eps: float = 1e-5

    @property
    def head_dim(self) -> int:
        return self.d_k // self.h

    @property
    def group_size(self) -> int:
        """Query heads per key/value head."""
        return self.h // self.h_kv

    def validate(self) -> None:
        for name in ("d_h", "d_k", "h", "h_kv", "n", "l", "vocab", "max_seq"):
            if getattr(self, name) < (0 if name == "l" else 1):
                raise ConfigError(f"config field {name} must be >= 1, got {getattr(self, name)}")
        if self.h % self.h_kv != 0:
            raise ConfigError(f"h={self.h} must be divisible by h_kv={self.h_kv}")
        if self.d_k % self.h != 0:
            raise ConfigError(f"d_k={self.d_k} must be divisible by h={self.h}")
        if self.d_k != self.d_h:
            raise ConfigError(f"d_k={self.d_k} must equal d_h={self.d_h}")
        if self.norm_eps <= 0:
            raise ConfigError(f"norm_eps must be > 0, got {self.norm_eps}")

    def to_json(self) -> str:
        return json.dumps({f.name: getattr(self, f.name) for f in fields(self)}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
        if not isinstance(raw, dict):
            raise ConfigError("config JSON must be an object")
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        missing = sorted(names - set(raw))
        if missing:
            raise ConfigError(f"missing config keys: {', '.join(missing)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def desk_default(cls) -> "ModelConfig":
        """Small configuration every test can run on a laptop CPU."""
        return cls(d_h=64, d_k=64, h=8, h_kv=2, n=128, l=4, vocab=256, max_seq=256)


@dataclass
class LayerWeights:
    """One decoder layer's parameter tensors."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w_up: Tensor
    w_gate: Tensor
    w_down: Tensor
    attn_norm: Tensor
    mlp_norm: Tensor


@dataclass
class DenseWeights:
    embed: Tensor
    layers: list[LayerWeights]
    final_norm: Tensor
    head: Tensor


@dataclass
class AttentionTrace:
    """Per-head internals captured on request: lists indexed by head."""

    q: list[np.ndarray]
    k: list[np.ndarray]
    v: list[np.ndarray]
    head_out: list[np.ndarray]


@dataclass
class ForwardTrace:
    """Intermediate tensors captured during a forward pass."""

    capture_attention: bool = False
    mlp_inputs: list[Tensor] = field(default_factory=list)
    mlp_activations: list[Tensor] = field(default_factory=list)
    attention: list[AttentionTrace] = field(default_factory=list)


@dataclass
class FeatureBank:
    """Per-layer stacks of normalized MLP-input vectors, in corpus order."""

    layers: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.layers)


def init_dense(cfg: ModelConfig, seed: int, dtype: str = "f32") -> DenseWeights:
    """Seeded normal(0, 0.02) projections, unit norm weights."""
    cfg.validate()
    rng = np.random.default_rng(seed)

    def proj(rows, cols):
        return Tensor(rng.normal(0.0, INIT_STD, size=(rows, cols)), dtype=dtype, requires_grad=True)

    def ones(dim):
        return Tensor(np.ones(dim), dtype=dtype, requires_grad=True)

    kv_dim = cfg.h_kv * cfg.head_dim
    embed = proj(cfg.vocab, cfg.d_h)
    layers = []
    for _ in range(cfg.l):
        layers.append(
            LayerWeights(
                wq=proj(cfg.d_h, cfg.d_k),
                wk=proj(cfg.d_h, kv_dim),
                wv=proj(cfg.d_h, kv_dim),
                wo=proj(cfg.d_k, cfg.d_h),
                w_up=proj(cfg.d_h, cfg.n),
                w_gate=proj(cfg.d_h, cfg.n),
                w_down=proj(cfg.n, cfg.d_h),
                attn_norm=ones(cfg.d_h),
                mlp_norm=ones(cfg.d_h),
            )
        )
    return DenseWeights(embed=embed, layers=layers, final_norm=ones(cfg.d_h), head=proj(cfg.d_h, cfg.vocab))


def causal_mask(seq: int, dtype) -> Tensor:
    """Additive [T, T] mask: -inf strictly above the diagonal."""
    m = np.zeros((seq, seq), dtype=dtype)
    m[np.triu_indices(seq, k=1)] = -np.inf
    return Tensor._make(m)


def _split_heads(x: Tensor, n_heads: int, head_dim: int) -> Tensor:
    """[B, T, n*d] -> [B, n, T, d] with rotary positions applied."""
    b, t, _ = x.shape
    return permute(reshape(x, (b, t, n_heads, head_dim)), (0, 2, 1, 3))


def attention_forward(x, layer, cfg: ModelConfig, capture: bool = False):
    """Causal grouped-query attention over normalized input ``x``.

    ``x`` is [T, d_h] or [B, T, d_h]; query head i shares key/value head
    i // group_size. Returns the attention output and, when ``capture``,
    an AttentionTrace of per-head tensors.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    b, t, _ = x.shape
    if t > cfg.max_seq:
        raise ConfigError(f"sequence length {t} exceeds max_seq {cfg.max_seq}")
    hd = cfg.head_dim

    q = matmul(x, layer.wq)  # [B, T, d_k]
    k = matmul(x, layer.wk)
    v = matmul(x, layer.wv)

    q = reshape(q, (b, t, cfg.h, hd))
    k = reshape(k, (b, t, cfg.h_kv, hd))
    q = permute(rope(q, cfg.rope_base), (0, 2, 1, 3))       # [B, h, T, hd]
    k = permute(rope(k, cfg.rope_base), (0, 2, 1, 3))       # [B, h_kv, T, hd]
    v = permute(reshape(v, (b, t, cfg.h_kv, hd)), (0, 2, 1, 3))
    if cfg.group_size > 1:
        k = repeat(k, cfg.group_size, axis=1)               # [B, h, T, hd]
        v = repeat(v, cfg.group_size, axis=1)

    scores = matmul(q, permute(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
    attn = softmax(scores + causal_mask(t, x.data.dtype), axis=-1)
    heads = matmul(attn, v)                                  # [B, h, T, hd]
    merged = reshape(permute(heads, (0, 2, 1, 3)), (b, t, cfg.h * hd))
    out = matmul(merged, layer.wo)

    trace = None
    if capture:
        trace = AttentionTrace(
            q=[np.ascontiguousarray(q.data[:, i]) for i in range(cfg.h)],
            k=[np.ascontiguousarray(k.data[:, i]) for i in range(cfg.h)],
            v=[np.ascontiguousarray(v.data[:, i]) for i in range(cfg.h)],
            head_out=[np.ascontiguousarray(heads.data[:, i]) for i in range(cfg.h)],
        )
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out, trace


def mlp_forward(x, layer, act_scale: np.ndarray | None = None, return_activation: bool = False):
    """SwiGLU MLP: w_down(silu(x w_gate) * (x w_up)).

    ``act_scale`` multiplies the intermediate activation elementwise (a
    constant hook used by pruning oracles).
    """
    if x.shape[-1] != layer.w_up.shape[0]:
        raise DimensionError(
            f"mlp_forward: input width {x.shape[-1]} does not match w_up rows {layer.w_up.shape[0]}"
        )
    act = silu(matmul(x, layer.w_gate)) * matmul(x, layer.w_up)
    if act_scale is not None:
        act = act * Tensor._make(np.asarray(act_scale, dtype=x.data.dtype))
    out = matmul(act, layer.w_down)
    if return_activation:
        return out, act
    return out


def model_forward(tokens, cfg: ModelConfig, weights: DenseWeights,
                  trace: ForwardTrace | None = None,
                  act_scale: dict[int, np.ndarray] | None = None) -> Tensor:
    """Logits [.., T, vocab] for token ids [T] or [B, T]."""
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None, :]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise IndexError(f"token id out of range for vocab {cfg.vocab}")
    if tokens.shape[1] > cfg.max_seq:
        raise ConfigError(f"sequence length {tokens.shape[1]} exceeds max_seq {cfg.max_seq}")

    x = embedding(weights.embed, tokens)
    for i, layer in enumerate(weights.layers):
        attn_in = rms_norm(x, layer.attn_norm, cfg.norm_eps)
        attn_out, attn_trace = attention_forward(
            attn_in, layer, cfg, capture=trace.capture_attention if trace else False
        )
        x = x + attn_out
        mlp_in = rms_norm(x, layer.mlp_norm, cfg.norm_eps)
        scale = act_scale.get(i) if act_scale else None
        mlp_out, act = mlp_forward(mlp_in, layer, act_scale=scale, return_activation=True)
        x = x + mlp_out
        if trace is not None:
            trace.mlp_inputs.append(mlp_in)
            trace.mlp_activations.append(act)
            if trace.capture_attention:
                trace.attention.append(attn_trace)

    x = rms_norm(x, weights.final_norm, cfg.norm_eps)
    logits = matmul(x, weights.head)
    if squeeze:
        logits = reshape(logits, logits.shape[1:])
    return logits


def lm_loss(tokens, cfg: ModelConfig, weights: DenseWeights,
            trace: ForwardTrace | None = None,
            act_scale: dict[int, np.ndarray] | None = None) -> Tensor:
    """Next-token cross-entropy over one sequence, mean over positions."""
    tokens = np.asarray(tokens)
    logits = model_forward(tokens[:-1], cfg, weights, trace=trace, act_scale=act_scale)
    return cross_entropy(logits, tokens[1:], ignore_id=-1)


def collect_mlp_features(weights: DenseWeights, cfg: ModelConfig, dataset) -> FeatureBank:
    """Normalized MLP inputs for every token of every sequence, per layer.

    ``dataset`` is an iterable of token-id arrays; collection order is
    corpus order and the run is deterministic.
    """
    dataset = list(dataset)
    if not dataset:
        raise ContractError("collect_mlp_features: dataset is empty")
    per_layer: list[list[np.ndarray]] = [[] for _ in range(cfg.l)]
    with no_grad():
        for seq in dataset:
            tr = ForwardTrace()
            model_forward(np.asarray(seq), cfg, weights, trace=tr)
            for i in range(cfg.l):
                per_layer[i].append(np.array(tr.mlp_inputs[i].data, copy=True))
    return FeatureBank(layers=[np.concatenate(chunks, axis=0) for chunks in per_layer])


# -- parameter counting --------------------------------------------------------


def count_params(cfg: ModelConfig, moe_spec=None) -> tuple[int, int]:
    """(total, per-token activated) parameter counts, closed form.

    ``moe_spec`` needs ``target`` ('attention' | 'mlp'), ``n_experts``,
    ``top_k`` and ``n_shared`` attributes; None counts the dense model.
    """
    cfg.validate()
    kv_dim = cfg.h_kv * cfg.head_dim
    attn = cfg.d_h * cfg.d_k + 2 * cfg.d_h * kv_dim + cfg.d_k * cfg.d_h
    mlp = 3 * cfg.d_h * cfg.n
    norms = 2 * cfg.d_h
    dense = cfg.vocab * cfg.d_h + cfg.l * (attn + mlp + norms) + cfg.d_h + cfg.d_h * cfg.vocab
    if moe_spec is None:
        return dense, dense

    n_e, top_k, n_shared = moe_spec.n_experts, moe_spec.top_k, moe_spec.n_shared
    if not (1 <= top_k <= n_e):
        raise ConfigError(f"top_k={top_k} must be within [1, {n_e}]")
    routers = cfg.l * cfg.d_h * n_e
    total = dense + routers
    if moe_spec.target == "mlp":
        units = n_e + n_shared
        if cfg.n % units != 0:
            raise ConfigError(f"n={cfg.n} not divisible into {units} expert units")
        unit = cfg.n // units
        inactive = cfg.l * (n_e - top_k) * 3 * cfg.d_h * unit
    elif moe_spec.target == "attention":
        if cfg.h % n_e != 0:
            raise ConfigError(f"h={cfg.h} not divisible by {n_e} experts")
        heads_per = cfg.h // n_e
        inactive = cfg.l * (n_e - top_k) * 2 * cfg.d_h * heads_per * cfg.head_dim
    else:
        raise ConfigError(f"unknown moe target {moe_spec.target!r}")
    return total, total - inactive


# -- weight container ------------------------------------------------------------


_LAYER_FIELDS = ("wq", "wk", "wv", "wo", "w_up", "w_gate", "w_down", "attn_norm", "mlp_norm")


def weights_to_dict(weights: DenseWeights) -> dict[str, np.ndarray]:
    out = {"embed": weights.embed.data}
    for i, layer in enumerate(weights.layers):
        for name in _LAYER_FIELDS:
            out[f"layer{i}.{name}"] = getattr(layer, name).data
    out["final_norm"] = weights.final_norm.data
    out["head"] = weights.head.data
    return out


def save_weights(weights: DenseWeights, path) -> None:
    container.write_tensors(path, weights_to_dict(weights))


def load_weights(path) -> DenseWeights:
    tensors = container.read_tensors(path)
    return weights_from_dict(tensors)


def weights_from_dict(tensors: dict[str, np.ndarray]) -> DenseWeights:
    def grab(name):
        if name not in tensors:
            raise FormatError(f"weight container is missing tensor {name!r}")
        return Tensor(tensors[name], requires_grad=True)

    n_layers = 0
    while f"layer{n_layers}.wq" in tensors:
        n_layers += 1
    layers = []
    for i in range(n_layers):
        layers.append(LayerWeights(**{name: grab(f"layer{i}.{name}") for name in _LAYER_FIELDS}))
    return DenseWeights(
        embed=grab("embed"),
        layers=layers,
        final_norm=grab("final_norm"),
        head=grab("head"),
    )


def named_parameters(weights: DenseWeights) -> list[tuple[str, Tensor]]:
    params = [("embed", weights.embed)]
    for i, layer in enumerate(weights.layers):
        for name in _LAYER_FIELDS:
            params.append((f"layer{i}.{name}", getattr(layer, name)))
    params.append(("final_norm", weights.final_norm))
    params.append(("head", weights.head))
    return params


class DenseModel:
    """Config + weights bundle with the forward interface the trainer uses."""

    def __init__(self, cfg: ModelConfig, weights: DenseWeights):
        self.cfg = cfg
        self.weights = weights

    def forward(self, tokens, token_mask=None, unit_gates=False):
        logits = model_forward(tokens, self.cfg, self.weights)
        return logits, []

    def named_parameters(self):
        return named_parameters(self.weights)

    @property
    def moe_layer_count(self) -> int:
        return 0
