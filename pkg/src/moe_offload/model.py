"""Minimal deterministic MoE transformer built on a residual stream.

Layer structure: pre-norm multi-head causal attention with a KV cache, a
stream normalization, then a top-k gated expert block. The gate, the experts,
and the residual base of the MoE block are one and the same vector (the
post-attention normalized stream), so a MoE block computes exactly

    out = h + sum_i weight_i * SwiGLU_expert_i(h)

and the hidden state feeding layer ``l``'s gate is (up to the next stream
normalization) the vector the next layer's gate sees when layer ``l``'s
experts and layer ``l+1``'s attention contribute nothing. That residual
property is what makes gate-based speculative expert prediction work at all.

All math is float32 and every operation is a pure function of (parameters,
inputs, seed); expert contributions are accumulated in descending gate-weight
order so results are bit-reproducible regardless of where the weights were
resident.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .store import ExpertKey

STAGE_PRE_ATTENTION = "pre_attention"
STAGE_PRE_MOE = "pre_moe"
STAGE_POST_MOE = "post_moe"

_LN_EPS = 1e-5


class NonFiniteError(ValueError):
    """A hidden state, logit, or loss stopped being finite."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ffn: int
    n_experts: int
    top_k_gate: int = 2
    seed: int = 0
    max_seq_len: int = 256

    def __post_init__(self):
        counts = (self.vocab_size, self.d_model, self.n_layers, self.n_heads,
                  self.d_ffn, self.n_experts, self.top_k_gate, self.max_seq_len)
        if any(c < 1 for c in counts):
            raise ValueError("all model dimensions must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.top_k_gate > self.n_experts:
            raise ValueError("top_k_gate cannot exceed n_experts")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "d_model": self.d_model,
            "n_layers": self.n_layers, "n_heads": self.n_heads,
            "d_ffn": self.d_ffn, "n_experts": self.n_experts,
            "top_k_gate": self.top_k_gate, "seed": self.seed,
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def toy_config(**overrides) -> ModelConfig:
    """Default desk-scale configuration: small enough for CPU property tests
    in seconds, structurally a midget of the usual 8-expert top-2 layout."""
    base = dict(vocab_size=64, d_model=64, n_layers=6, n_heads=4,
                d_ffn=128, n_experts=8, top_k_gate=2, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass(frozen=True)
class HiddenState:
    token_pos: int
    layer: int
    stage: str
    values: np.ndarray

    def __post_init__(self):
        if self.stage not in (STAGE_PRE_ATTENTION, STAGE_PRE_MOE, STAGE_POST_MOE):
            raise ValueError(f"unknown stage {self.stage!r}")


@dataclass(frozen=True)
class GateOutcome:
    """Top-k routing decision for one token at one layer."""

    layer: int
    token_pos: int
    experts: tuple[ExpertKey, ...]
    weights: np.ndarray   # descending, sums to 1
    logits: np.ndarray    # full length-E vector


@dataclass(frozen=True)
class ExpertWeights:
    """SwiGLU feed-forward triple for one expert."""

    key: ExpertKey
    w_gate_proj: np.ndarray  # (d_model, d_ffn)
    w_up_proj: np.ndarray    # (d_model, d_ffn)
    w_down_proj: np.ndarray  # (d_ffn, d_model)


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def expert_weights(self, layer: int, expert: int) -> ExpertWeights:
        base = f"layers.{layer}.experts.{expert}"
        return ExpertWeights(
            key=ExpertKey(layer, expert),
            w_gate_proj=self.params[f"{base}.w_gate_proj"],
            w_up_proj=self.params[f"{base}.w_up_proj"],
            w_down_proj=self.params[f"{base}.w_down_proj"],
        )

    def expert_keys(self):
        cfg = self.config
        return [ExpertKey(ell, e) for ell in range(cfg.n_layers)
                for e in range(cfg.n_experts)]

    def gate_matrix(self, layer: int) -> np.ndarray:
        return self.params[f"layers.{layer}.gate"]


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    """Seeded initialization; bit-identical for identical (config, seed)."""
    rng = np.random.default_rng(config.seed)
    d, f, v = config.d_model, config.d_ffn, config.vocab_size

    def normal(*shape, std):
        return (rng.standard_normal(shape) * std).astype(np.float32)

    p: dict[str, np.ndarray] = {
        "wte": normal(v, d, std=0.02),
        "wpe": normal(config.max_seq_len, d, std=0.02),
        "lm_head": normal(d, v, std=0.02),
        "ln_f.gamma": np.ones(d, dtype=np.float32),
        "ln_f.beta": np.zeros(d, dtype=np.float32),
    }
    proj_std = 1.0 / np.sqrt(d)
    for ell in range(config.n_layers):
        base = f"layers.{ell}"
        p[f"{base}.ln1.gamma"] = np.ones(d, dtype=np.float32)
        p[f"{base}.ln1.beta"] = np.zeros(d, dtype=np.float32)
        p[f"{base}.ln2.gamma"] = np.ones(d, dtype=np.float32)
        p[f"{base}.ln2.beta"] = np.zeros(d, dtype=np.float32)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{base}.attn.{name}"] = normal(d, d, std=proj_std)
        p[f"{base}.gate"] = normal(d, config.n_experts, std=proj_std)
        for e in range(config.n_experts):
            eb = f"{base}.experts.{e}"
            p[f"{eb}.w_gate_proj"] = normal(d, f, std=proj_std)
            p[f"{eb}.w_up_proj"] = normal(d, f, std=proj_std)
            p[f"{eb}.w_down_proj"] = normal(f, d, std=1.0 / np.sqrt(f))
    return p


def build_model(config: ModelConfig) -> Model:
    return Model(config=config, params=init_params(config))


# --------------------------------------------------------------------------
# Pure math
# --------------------------------------------------------------------------

def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + _LN_EPS) * gamma + beta


def top_k_select(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest logits, descending; ties go to the lower index."""
    order = np.argsort(-logits, kind="stable")
    return order[:k]


def gate(model: Model, layer: int, h, token_pos: int = 0) -> GateOutcome:
    """Linear token-level gate: top-k experts with softmax over the selected
    logits only (renormalized top-k)."""
    if isinstance(h, HiddenState):
        token_pos = h.token_pos
        h = h.values
    h = np.asarray(h)
    if not np.all(np.isfinite(h)):
        raise NonFiniteError(
            f"gate input at layer {layer}, position {token_pos} is not finite")
    if not 0 <= layer < model.config.n_layers:
        raise ValueError(f"layer {layer} out of range")
    logits = h @ model.gate_matrix(layer)
    idx = top_k_select(logits, model.config.top_k_gate)
    z = logits[idx]
    z = z - z.max()
    w = np.exp(z)
    w = w / w.sum()
    return GateOutcome(
        layer=layer, token_pos=token_pos,
        experts=tuple(ExpertKey(layer, int(e)) for e in idx),
        weights=w.astype(np.float32), logits=logits,
    )


def swiglu(ew: ExpertWeights, x: np.ndarray) -> np.ndarray:
    a = x @ ew.w_gate_proj
    b = x @ ew.w_up_proj
    return (a * _sigmoid(a) * b) @ ew.w_down_proj


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def moe_forward(h: np.ndarray, outcome: GateOutcome,
                experts: list[ExpertWeights]) -> np.ndarray:
    """Residual expert mixture: h + sum_i w_i * SwiGLU_i(h).

    ``experts`` must resolve ``outcome.experts`` exactly and in order; the
    accumulation order (descending gate weight) is part of the contract so
    that results never depend on where the weights were resident.
    """
    if len(experts) != len(outcome.experts):
        raise ValueError("resolved expert list does not match gate outcome")
    for ew, key in zip(experts, outcome.experts):
        if ew is None or ew.key != key:
            raise ValueError(f"expert weights for {key} were not resolved")
    out = h
    for w, ew in zip(outcome.weights, experts):
        out = out + w * swiglu(ew, h)
    return out


class KVCache:
    """Per-layer growable key/value store for batch-1 causal attention."""

    def __init__(self, config: ModelConfig):
        shape = (config.max_seq_len, config.n_heads, config.head_dim)
        self._k = [np.zeros(shape, dtype=np.float32) for _ in range(config.n_layers)]
        self._v = [np.zeros(shape, dtype=np.float32) for _ in range(config.n_layers)]
        self.lengths = [0] * config.n_layers
        self.max_seq_len = config.max_seq_len

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        t = self.lengths[layer]
        if t >= self.max_seq_len:
            raise ValueError(f"sequence exceeds max_seq_len={self.max_seq_len}")
        self._k[layer][t] = k
        self._v[layer][t] = v
        self.lengths[layer] += 1

    def view(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        t = self.lengths[layer]
        return self._k[layer][:t], self._v[layer][:t]


def attention_step(model: Model, layer: int, x: np.ndarray,
                   kv: KVCache, pos: int) -> np.ndarray:
    """One token of pre-norm causal attention followed by the stream
    normalization; appends this position's KV. The returned vector is the
    layer's pre-MoE hidden state."""
    cfg = model.config
    p = model.params
    base = f"layers.{layer}"
    normed = layer_norm(x, p[f"{base}.ln1.gamma"], p[f"{base}.ln1.beta"])
    hd = cfg.head_dim
    q = (normed @ p[f"{base}.attn.wq"]).reshape(cfg.n_heads, hd)
    k = (normed @ p[f"{base}.attn.wk"]).reshape(cfg.n_heads, hd)
    v = (normed @ p[f"{base}.attn.wv"]).reshape(cfg.n_heads, hd)
    kv.append(layer, k, v)
    keys, values = kv.view(layer)  # (t, H, hd), all positions <= pos
    scores = np.einsum("hd,thd->ht", q, keys) / np.float32(np.sqrt(hd))
    scores = scores - scores.max(axis=1, keepdims=True)
    alpha = np.exp(scores)
    alpha = alpha / alpha.sum(axis=1, keepdims=True)
    ctx = np.einsum("ht,thd->hd", alpha, values).reshape(cfg.d_model)
    resid = x + ctx @ p[f"{base}.attn.wo"]
    return layer_norm(resid, p[f"{base}.ln2.gamma"], p[f"{base}.ln2.beta"])


def output_logits(model: Model, x: np.ndarray) -> np.ndarray:
    p = model.params
    normed = layer_norm(x, p["ln_f.gamma"], p["ln_f.beta"])
    logits = normed @ p["lm_head"]
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("output logits are not finite")
    return logits


def embed(model: Model, token: int, pos: int) -> np.ndarray:
    cfg = model.config
    if not 0 <= token < cfg.vocab_size:
        raise ValueError(f"token id {token} outside vocabulary of {cfg.vocab_size}")
    if pos >= cfg.max_seq_len:
        raise ValueError(f"position {pos} exceeds max_seq_len={cfg.max_seq_len}")
    return model.params["wte"][token] + model.params["wpe"][pos]


def forward_token(model: Model, token: int, pos: int, kv: KVCache,
                  resolve_experts, on_gate=None) -> np.ndarray:
    """Run one token through every layer and return its output logits.

    ``resolve_experts(layer, outcome, h_pre_moe)`` must return the
    ExpertWeights for ``outcome.experts`` in order; injecting the resolver is
    what lets the offloaded engine and the dense in-memory path share this
    exact arithmetic. ``on_gate(layer, outcome, h_pre_moe)`` is called after
    gating and before any expert is resolved.
    """
    x = embed(model, token, pos)
    for layer in range(model.config.n_layers):
        x = attention_step(model, layer, x, kv, pos)
        outcome = gate(model, layer, x, pos)
        if on_gate is not None:
            on_gate(layer, outcome, x)
        experts = resolve_experts(layer, outcome, x)
        x = moe_forward(x, outcome, experts)
    return output_logits(model, x)


def prefill_pass(model: Model, tokens: list[int], kv: KVCache,
                 resolve_layer, on_gate=None) -> np.ndarray:
    """Encode a prompt layer-by-layer; returns logits for every position.

    ``resolve_layer(layer, outcomes)`` receives all gate outcomes of the
    layer at once and returns a key -> ExpertWeights table, so each distinct
    expert can be fetched once per layer for the whole prompt. Per-token
    arithmetic is identical to :func:`forward_token`.
    """
    if len(tokens) == 0:
        raise ValueError("prompt must contain at least one token")
    xs = [embed(model, t, p) for p, t in enumerate(tokens)]
    n = len(tokens)
    for layer in range(model.config.n_layers):
        for p in range(n):
            xs[p] = attention_step(model, layer, xs[p], kv, p)
        outcomes = [gate(model, layer, xs[p], p) for p in range(n)]
        if on_gate is not None:
            for p in range(n):
                on_gate(layer, outcomes[p], xs[p])
        table = resolve_layer(layer, outcomes)
        for p in range(n):
            experts = [table[key] for key in outcomes[p].experts]
            xs[p] = moe_forward(xs[p], outcomes[p], experts)
    return np.stack([output_logits(model, x) for x in xs])


# --------------------------------------------------------------------------
# Samplers
# --------------------------------------------------------------------------

def sample_greedy(logits: np.ndarray) -> int:
    return int(np.argmax(logits))


@dataclass
class CategoricalSampler:
    """Samples proportionally to the predicted probabilities."""

    seed: int
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)

    def __call__(self, logits: np.ndarray) -> int:
        z = logits.astype(np.float64)
        z -= z.max()
        p = np.exp(z)
        p /= p.sum()
        return int(self._rng.choice(p.size, p=p))


def make_sampler(name: str, seed: int = 0):
    if name == "greedy":
        return sample_greedy
    if name == "categorical":
        return CategoricalSampler(seed)
    raise ValueError(f"unknown sampler {name!r}")
