"""Per-token orchestration: gating, expert acquisition, speculative loading.

The offloaded engine and the dense in-memory runner share the exact same
arithmetic (they differ only in how expert weights are resolved), so enabling
offloading or speculation can never change model outputs; it only changes the
store's event log. Speculative loads are issued immediately after the current
layer's required experts are acquired and before the expert computation, so in
the event log they sit between the current layer's acquires and the next
layer's.

Speculation guesses a future layer's experts by applying that layer's gating
function to the hidden state the current layer's gate consumed. Replay drives
the same store logic from a recorded trace instead of a live model; traces
that carry hidden states embed their gate matrices, so speculative replay
reproduces a live run's event log exactly, byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    ExpertWeights,
    KVCache,
    Model,
    forward_token,
    make_sampler,
    prefill_pass,
    top_k_select,
)
from .store import (
    CacheConfig,
    ExpertKey,
    StoreEvent,
    TieredExpertStore,
    recall as event_recall,
)
from .trace import Trace, TraceFormatError, TraceRecord, config_digest


@dataclass(frozen=True)
class SpeculationConfig:
    """Speculative expert loading: fetch the top-m guesses for the layer
    ``lookahead`` steps ahead. Live prefetch uses lookahead 1; larger values
    exist for recall studies."""

    enabled: bool = False
    m: int = 2
    lookahead: int = 1

    def __post_init__(self):
        if self.m < 0:
            raise ValueError("m must be >= 0")
        if self.lookahead < 1:
            raise ValueError("lookahead must be >= 1")


def guess_experts(model: Model, h: np.ndarray, target_layer: int, m: int) -> list[ExpertKey]:
    """Top-m experts of ``target_layer``'s gate evaluated on ``h``.

    Pure function; never touches the store. Returns [] past the last layer.
    """
    if target_layer >= model.config.n_layers:
        return []
    logits = h @ model.gate_matrix(target_layer)
    return [ExpertKey(target_layer, int(e)) for e in top_k_select(logits, m)]


def materialize_expert(payload, key: ExpertKey) -> ExpertWeights:
    """Turn a store payload into compute-ready weights (dequantizing packed
    experts); raw float32 payloads pass through untouched."""
    if isinstance(payload, ExpertWeights):
        return payload
    return payload.materialize(key)


def payload_nbytes(payload) -> int:
    if isinstance(payload, ExpertWeights):
        return payload.w_gate_proj.nbytes + payload.w_up_proj.nbytes + payload.w_down_proj.nbytes
    return payload.nbytes


def model_payloads(model: Model) -> dict[ExpertKey, ExpertWeights]:
    """Host-arena view of a model's experts, keyed for the store."""
    return {key: model.expert_weights(*key) for key in model.expert_keys()}


@dataclass
class GenerationResult:
    tokens: list[int]
    final_logits: np.ndarray
    trace: Trace


class _Session:
    """Shared prefill/decode flow; subclasses provide expert resolution."""

    def __init__(self, model: Model, record_hidden: bool = True):
        self.model = model
        self.record_hidden = record_hidden
        self.reset_session()

    def reset_session(self) -> None:
        self._kv = KVCache(self.model.config)
        self._pos = 0
        self._last_logits: np.ndarray | None = None
        self._records: list[TraceRecord] = []
        self._prompt_len = 0

    # hooks -----------------------------------------------------------------

    def _resolve_token(self, layer, outcome, h):
        raise NotImplementedError

    def _resolve_prefill_layer(self, layer, outcomes):
        raise NotImplementedError

    # recording ---------------------------------------------------------------

    def _on_gate(self, layer, outcome, h) -> None:
        self._records.append(TraceRecord(
            token_pos=outcome.token_pos, layer=layer,
            experts=tuple(key.expert for key in outcome.experts),
            weights=outcome.weights.copy(),
            hidden=h.astype(np.float32).copy() if self.record_hidden else None,
        ))

    def trace(self) -> Trace:
        cfg = self.model.config
        gates = None
        if self.record_hidden:
            gates = np.stack([self.model.gate_matrix(ell) for ell in range(cfg.n_layers)])
        trace = Trace(
            config_digest=config_digest(cfg.to_dict()),
            n_layers=cfg.n_layers, n_experts=cfg.n_experts, top_k=cfg.top_k_gate,
            records_hidden=self.record_hidden, prompt_len=self._prompt_len,
            d_model=cfg.d_model if self.record_hidden else None,
            gates=gates, records=list(self._records),
        )
        trace.sort_records()
        trace.validate()
        return trace

    # generation --------------------------------------------------------------

    def prefill(self, tokens: list[int]) -> np.ndarray:
        """Encode a prompt; returns logits for every prompt position."""
        self.reset_session()
        logits = prefill_pass(self.model, list(tokens), self._kv,
                              self._resolve_prefill_layer, on_gate=self._on_gate)
        self._pos = len(tokens)
        self._prompt_len = len(tokens)
        self._last_logits = logits[-1]
        return logits

    def run_token(self, token: int) -> np.ndarray:
        """Process one generated token through all layers; returns its logits."""
        if self._last_logits is None:
            raise RuntimeError("prefill must run before decoding")
        logits = forward_token(self.model, token, self._pos, self._kv,
                               self._resolve_token, on_gate=self._on_gate)
        self._pos += 1
        self._last_logits = logits
        return logits

    def decode(self, n_tokens: int, sampler="greedy", sampler_seed: int = 0) -> GenerationResult:
        """Generate autoregressively at batch size 1."""
        if n_tokens < 1:
            raise ValueError("n_tokens must be >= 1")
        if isinstance(sampler, str):
            sampler = make_sampler(sampler, sampler_seed)
        tokens = []
        logits = self._last_logits
        if logits is None:
            raise RuntimeError("prefill must run before decoding")
        for _ in range(n_tokens):
            t = sampler(logits)
            tokens.append(t)
            logits = self.run_token(t)
        return GenerationResult(tokens=tokens, final_logits=logits, trace=self.trace())


class DenseRunner(_Session):
    """In-memory reference path: every expert resolved directly, no store."""

    def _resolve_token(self, layer, outcome, h):
        return [self.model.expert_weights(*key) for key in outcome.experts]

    def _resolve_prefill_layer(self, layer, outcomes):
        table = {}
        for outcome in outcomes:
            for key in outcome.experts:
                if key not in table:
                    table[key] = self.model.expert_weights(*key)
        return table


class OffloadEngine(_Session):
    """Generation with the tiered store: per-layer LRU caching plus optional
    speculative prefetch of next-layer experts into staging buffers."""

    def __init__(self, model: Model, cache: CacheConfig | None = None,
                 speculation: SpeculationConfig = SpeculationConfig(),
                 payloads: dict[ExpertKey, object] | None = None,
                 record_hidden: bool = True):
        if payloads is None:
            payloads = model_payloads(model)
        expert_bytes = payload_nbytes(next(iter(payloads.values())))
        if cache is None:
            cache = CacheConfig(k=2, b=4, expert_bytes=expert_bytes)
        elif cache.expert_bytes == 1:  # geometry given without a byte size
            cache = CacheConfig(k=cache.k, b=cache.b, expert_bytes=expert_bytes)
        if speculation.enabled and speculation.m > cache.b:
            raise ValueError(f"m={speculation.m} exceeds b={cache.b} staging buffers")
        self.speculation = speculation
        self.store = TieredExpertStore(payloads, model.config.n_layers,
                                       model.config.n_experts, cache)
        super().__init__(model, record_hidden=record_hidden)

    def _resolve_token(self, layer, outcome, h):
        payloads = [self.store.acquire(key, outcome.token_pos)[0]
                    for key in outcome.experts]
        spec = self.speculation
        if spec.enabled and spec.m > 0:
            guesses = guess_experts(self.model, h, layer + spec.lookahead, spec.m)
            if guesses:
                self.store.speculative_load(guesses, outcome.token_pos,
                                            current_layer=layer)
        return [materialize_expert(p, key) for p, key in zip(payloads, outcome.experts)]

    def _resolve_prefill_layer(self, layer, outcomes):
        table = {}
        for outcome in outcomes:
            for key in outcome.experts:
                if key not in table:
                    payload, _ = self.store.acquire(key, outcome.token_pos)
                    table[key] = materialize_expert(payload, key)
        return table

    @property
    def events(self) -> list[StoreEvent]:
        return self.store.events

    def recall(self, definition: str = "device_or_staging") -> float:
        return event_recall(self.store.events, definition)


# --------------------------------------------------------------------------
# Trace replay
# --------------------------------------------------------------------------

@dataclass
class ReplayResult:
    events: list[StoreEvent]
    recall: float

    def recall_as(self, definition: str) -> float:
        return event_recall(self.events, definition)


def replay(trace: Trace, cache: CacheConfig,
           speculation: SpeculationConfig = SpeculationConfig(),
           recall_definition: str = "device_or_staging") -> ReplayResult:
    """Drive acquire/speculative_load from a recorded trace exactly as the
    live engine would: prompt positions batched layer-by-layer (each distinct
    expert fetched once per layer), generated positions token-by-token with
    speculative guesses re-evaluated from recorded hidden states.
    """
    trace.validate()
    if speculation.enabled and speculation.m > 0:
        if not trace.records_hidden:
            raise TraceFormatError(
                "speculative replay requires a trace with recorded hidden states")
        if speculation.m > cache.b:
            raise ValueError(f"m={speculation.m} exceeds b={cache.b} staging buffers")

    payloads = {ExpertKey(ell, e): () for ell in range(trace.n_layers)
                for e in range(trace.n_experts)}
    store = TieredExpertStore(payloads, trace.n_layers, trace.n_experts, cache)

    by_token: dict[int, list[TraceRecord]] = {}
    for rec in trace.records:
        by_token.setdefault(rec.token_pos, []).append(rec)

    prompt = [t for t in sorted(by_token) if t < trace.prompt_len]
    generated = [t for t in sorted(by_token) if t >= trace.prompt_len]

    for ell in range(trace.n_layers):
        seen: set[ExpertKey] = set()
        for t in prompt:
            rec = next(r for r in by_token[t] if r.layer == ell)
            for e in rec.experts:
                key = ExpertKey(ell, e)
                if key not in seen:
                    store.acquire(key, t)
                    seen.add(key)

    for t in generated:
        for rec in sorted(by_token[t], key=lambda r: r.layer):
            for e in rec.experts:
                store.acquire(ExpertKey(rec.layer, e), t)
            if speculation.enabled and speculation.m > 0:
                target = rec.layer + speculation.lookahead
                if target < trace.n_layers:
                    logits = trace.gate_logits(target, rec.hidden)
                    guesses = [ExpertKey(target, int(e))
                               for e in top_k_select(logits, speculation.m)]
                    store.speculative_load(guesses, t, current_layer=rec.layer)

    return ReplayResult(events=store.events,
                        recall=event_recall(store.events, recall_definition))


def guess_recall(trace: Trace, lookahead: int, m: int) -> float:
    """Fraction of experts actually used ``lookahead`` layers later that the
    gate-based guess would have fetched; 1.0 means every active expert of the
    target layer was covered."""
    trace.validate()
    if not trace.records_hidden:
        raise TraceFormatError("guess recall requires recorded hidden states")
    if m < 1:
        raise ValueError("m must be >= 1")
    index = {(r.token_pos, r.layer): r for r in trace.records}
    hits = total = 0
    for rec in trace.records:
        target = rec.layer + lookahead
        actual = index.get((rec.token_pos, target))
        if actual is None:
            continue
        logits = trace.gate_logits(target, rec.hidden)
        guessed = set(int(e) for e in top_k_select(logits, m))
        hits += len(guessed.intersection(actual.experts))
        total += trace.top_k
    if total == 0:
        raise ValueError(f"trace has no layer pairs at lookahead {lookahead}")
    return hits / total
