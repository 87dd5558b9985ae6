"""Two-tier expert weight store with per-layer LRU caching and staging buffers.

Every expert has exactly one canonical residence (host or device); loading an
expert to a full device set evicts that layer's least recently used expert
back to the host, preserving memory parity. A small pool of ``b`` staging
buffers, shared across layers, holds speculative copies without displacing
cached experts; a staged expert that is actually used is promoted into its
layer's LRU set. Every transfer is logged as a :class:`StoreEvent` with a
monotone sequence number, so event logs have a total order even though a
background transfer agent may issue the speculative copies.

The store supports one mutating acquirer at a time; payloads are immutable
and safe to read from anywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Iterable, NamedTuple

HIT = "hit"
STAGING_HIT = "staging_hit"
MISS_LOAD = "miss_load"
EVICT_TO_HOST = "evict_to_host"
SPECULATIVE_LOAD = "speculative_load"
PROMOTE_FROM_STAGING = "promote_from_staging"

EVENT_KINDS = (HIT, STAGING_HIT, MISS_LOAD, EVICT_TO_HOST, SPECULATIVE_LOAD,
               PROMOTE_FROM_STAGING)
ACQUIRE_KINDS = (HIT, STAGING_HIT, MISS_LOAD)
LOAD_KINDS = (MISS_LOAD, SPECULATIVE_LOAD)


class ExpertKey(NamedTuple):
    """Identity of one expert's weight block."""

    layer: int
    expert: int


class UnknownExpertError(KeyError):
    """Requested key is outside the store's expert table."""


@dataclass(frozen=True)
class CacheConfig:
    """Device-tier geometry: k cached experts per layer, b shared staging slots."""

    k: int
    b: int = 4
    expert_bytes: int = 1

    def __post_init__(self):
        if self.k < 0 or self.b < 0 or self.expert_bytes <= 0:
            raise ValueError("k and b must be >= 0 and expert_bytes positive")


@dataclass(frozen=True)
class StoreEvent:
    seq: int
    kind: str
    key: ExpertKey
    token_pos: int
    bytes_moved: int

    @property
    def layer(self) -> int:
        return self.key.layer

    @property
    def expert(self) -> int:
        return self.key.expert


class TieredExpertStore:
    """Host tier holding all experts plus a per-layer LRU device tier.

    ``payloads`` maps every ExpertKey to its (immutable) weight payload; the
    host arena is the canonical source and ``acquire`` always returns data
    byte-identical to it. With ``k=0`` acquires stream through a transient
    scratch buffer: the miss is logged but nothing is retained on device.
    """

    def __init__(self, payloads: dict[ExpertKey, Any], n_layers: int,
                 n_experts: int, config: CacheConfig):
        if config.k > n_experts:
            raise ValueError(f"k={config.k} exceeds experts per layer ({n_experts})")
        self._payloads = dict(payloads)
        for key in self._payloads:
            if not (0 <= key.layer < n_layers and 0 <= key.expert < n_experts):
                raise ValueError(f"payload key {key} outside model dimensions")
        self.n_layers = n_layers
        self.n_experts = n_experts
        self.config = config
        # Most-recent-first per layer; invariant: len <= k after every op.
        self._device: list[list[ExpertKey]] = [[] for _ in range(n_layers)]
        self._staging: list[tuple[ExpertKey, int] | None] = [None] * config.b
        self._stage_stamp = 0
        self._seq = 0
        self.events: list[StoreEvent] = []

    # -- introspection ------------------------------------------------------

    def device_resident(self, layer: int) -> tuple[ExpertKey, ...]:
        return tuple(self._device[layer])

    def device_state(self) -> dict[int, tuple[ExpertKey, ...]]:
        return {ell: tuple(keys) for ell, keys in enumerate(self._device)}

    def staged_keys(self) -> tuple[ExpertKey, ...]:
        return tuple(slot[0] for slot in self._staging if slot is not None)

    def audit(self) -> None:
        """Assert memory parity and capacity invariants."""
        seen: set[ExpertKey] = set()
        for ell, keys in enumerate(self._device):
            if len(keys) > self.config.k:
                raise AssertionError(f"layer {ell} holds {len(keys)} > k experts")
            for key in keys:
                if key.layer != ell or key in seen:
                    raise AssertionError(f"duplicate or misfiled resident {key}")
                seen.add(key)
        if sum(1 for s in self._staging if s is not None) > self.config.b:
            raise AssertionError("staging overflow")

    # -- event plumbing -----------------------------------------------------

    def _emit(self, kind: str, key: ExpertKey, token_pos: int, moved: bool) -> StoreEvent:
        ev = StoreEvent(self._seq, kind, key, token_pos,
                        self.config.expert_bytes if moved else 0)
        self._seq += 1
        self.events.append(ev)
        return ev

    def _check_key(self, key: ExpertKey) -> ExpertKey:
        key = ExpertKey(*key)
        if key not in self._payloads:
            raise UnknownExpertError(f"no such expert: layer={key.layer} expert={key.expert}")
        return key

    def _staging_index(self, key: ExpertKey) -> int | None:
        for i, slot in enumerate(self._staging):
            if slot is not None and slot[0] == key:
                return i
        return None

    def _insert_resident(self, key: ExpertKey, token_pos: int) -> None:
        lru = self._device[key.layer]
        lru.insert(0, key)
        if len(lru) > self.config.k:
            evicted = lru.pop()
            self._emit(EVICT_TO_HOST, evicted, token_pos, moved=True)

    # -- operations ---------------------------------------------------------

    def acquire(self, key: ExpertKey, token_pos: int) -> tuple[Any, StoreEvent]:
        """Fetch one expert for computation, logging how it was satisfied.

        Device-resident keys are hits and move to most-recent position.
        Staged keys are promoted into the layer's LRU set (evicting the least
        recently used resident if the set is full). Anything else is a miss
        loaded from host, with the same eviction rule.
        """
        key = self._check_key(key)
        lru = self._device[key.layer]

        if key in lru:
            lru.remove(key)
            lru.insert(0, key)
            outcome = self._emit(HIT, key, token_pos, moved=False)
            return self._payloads[key], outcome

        slot = self._staging_index(key)
        if slot is not None:
            outcome = self._emit(STAGING_HIT, key, token_pos, moved=False)
            self._staging[slot] = None
            if self.config.k > 0:
                self._emit(PROMOTE_FROM_STAGING, key, token_pos, moved=False)
                self._insert_resident(key, token_pos)
            return self._payloads[key], outcome

        outcome = self._emit(MISS_LOAD, key, token_pos, moved=True)
        if self.config.k > 0:
            self._insert_resident(key, token_pos)
        return self._payloads[key], outcome

    def speculative_load(self, keys: Iterable[ExpertKey], token_pos: int,
                         current_layer: int | None = None) -> list[StoreEvent]:
        """Best-effort copy of guessed experts into free staging buffers.

        Keys already device-resident or staged produce no transfer. When no
        buffer is free, the oldest staged entry not belonging to
        ``current_layer`` is overwritten; if every slot is protected the key
        is skipped. LRU sets are never touched.
        """
        keys = [self._check_key(k) for k in keys]
        if len(keys) > self.config.b:
            raise ValueError(f"{len(keys)} speculative keys exceed b={self.config.b} buffers")
        if len({k.layer for k in keys}) > 1:
            raise ValueError("speculative keys must target a single layer")

        out: list[StoreEvent] = []
        for key in keys:
            if key in self._device[key.layer] or self._staging_index(key) is not None:
                continue
            idx = next((i for i, s in enumerate(self._staging) if s is None), None)
            if idx is None:
                evictable = [
                    (stamp, i) for i, s in enumerate(self._staging)
                    if s is not None and (current_layer is None or s[0].layer != current_layer)
                    for stamp in (s[1],)
                ]
                if not evictable:
                    continue
                idx = min(evictable)[1]
            self._staging[idx] = (key, self._stage_stamp)
            self._stage_stamp += 1
            out.append(self._emit(SPECULATIVE_LOAD, key, token_pos, moved=True))
        return out


def recall(events: Iterable[StoreEvent], definition: str = "device_or_staging") -> float:
    """Fraction of acquires already satisfied on the fast tier.

    Each acquire counts individually, so a token-layer step that found both
    of its experts resident contributes two hits.
    """
    if definition not in ("device_only", "device_or_staging"):
        raise ValueError(f"unknown recall definition {definition!r}")
    total = hits = 0
    for ev in events:
        if ev.kind not in ACQUIRE_KINDS:
            continue
        total += 1
        if ev.kind == HIT or (ev.kind == STAGING_HIT and definition == "device_or_staging"):
            hits += 1
    if total == 0:
        raise ValueError("no acquire events in log")
    return hits / total


def events_to_jsonl(events: Iterable[StoreEvent]) -> str:
    lines = []
    for ev in events:
        lines.append(json.dumps(
            {"seq": ev.seq, "kind": ev.kind, "layer": ev.key.layer,
             "expert": ev.key.expert, "token_pos": ev.token_pos,
             "bytes_moved": ev.bytes_moved},
            sort_keys=True, separators=(",", ":")))
    return "\n".join(lines) + ("\n" if lines else "")


def events_from_jsonl(text: str) -> list[StoreEvent]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["kind"] not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {rec['kind']!r}")
        out.append(StoreEvent(rec["seq"], rec["kind"],
                              ExpertKey(rec["layer"], rec["expert"]),
                              rec["token_pos"], rec["bytes_moved"]))
    return out
