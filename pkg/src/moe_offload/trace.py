"""Canonical trace format: per-token, per-layer gate outcomes for replay.

A trace records which experts each (token, layer) step selected, with what
gate weights, and optionally the hidden state the gate consumed. Traces with
hidden states also embed the per-layer gate matrices, which makes speculative
replay self-contained: the replay can re-evaluate any layer's gate on any
recorded hidden state without the model. ``prompt_len`` marks where the
parallel prompt encoding ends and sequential generation begins, because the
two phases drive the expert store differently.

Two encodings share one logical schema: JSONL (header line then one record
per line) and a packed little-endian binary variant (magic ``MOET1``).
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

BINARY_MAGIC = b"MOET1"
_VERSION = 1


class TraceFormatError(ValueError):
    """Raised on malformed or internally inconsistent trace data."""


def config_digest(config_dict: dict) -> str:
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TraceRecord:
    token_pos: int
    layer: int
    experts: tuple[int, ...]       # descending gate weight
    weights: np.ndarray            # float32, same order
    hidden: np.ndarray | None = None

    def __eq__(self, other):
        return (self.token_pos == other.token_pos and self.layer == other.layer
                and self.experts == other.experts
                and np.array_equal(self.weights, other.weights)
                and ((self.hidden is None) == (other.hidden is None))
                and (self.hidden is None or np.array_equal(self.hidden, other.hidden)))


@dataclass
class Trace:
    config_digest: str
    n_layers: int
    n_experts: int
    top_k: int
    records_hidden: bool
    prompt_len: int = 0
    d_model: int | None = None
    gates: np.ndarray | None = None     # (n_layers, d_model, n_experts)
    records: list[TraceRecord] = field(default_factory=list)

    def validate(self) -> None:
        keys = [(r.token_pos, r.layer) for r in self.records]
        if keys != sorted(keys):
            raise TraceFormatError("records must be sorted by (token_pos, layer)")
        if len(set(keys)) != len(keys):
            raise TraceFormatError("duplicate (token_pos, layer) record")
        for r in self.records:
            if len(r.experts) != self.top_k or len(set(r.experts)) != self.top_k:
                raise TraceFormatError(f"record {keys[0]} must select {self.top_k} distinct experts")
            if any(not 0 <= e < self.n_experts for e in r.experts):
                raise TraceFormatError("expert index out of range")
            if r.layer >= self.n_layers:
                raise TraceFormatError("layer index out of range")
            if self.records_hidden and r.hidden is None:
                raise TraceFormatError("records_hidden is set but a record has no hidden state")
        if self.records_hidden:
            if self.gates is None or self.d_model is None:
                raise TraceFormatError("hidden-recording traces must embed gate matrices")
            if self.gates.shape != (self.n_layers, self.d_model, self.n_experts):
                raise TraceFormatError("gate matrix shape mismatch")

    def sort_records(self) -> None:
        self.records.sort(key=lambda r: (r.token_pos, r.layer))

    @property
    def n_tokens(self) -> int:
        return len({r.token_pos for r in self.records})

    def gate_logits(self, layer: int, hidden: np.ndarray) -> np.ndarray:
        """Apply a recorded gate to a hidden state (replay-side gating)."""
        if self.gates is None:
            raise TraceFormatError("trace has no gate matrices")
        return hidden @ self.gates[layer]


# --------------------------------------------------------------------------
# Synthetic traces
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticTraceSpec:
    """Model-free trace generator with a first-order expert reuse knob.

    ``locality`` is the probability that a token keeps the previous token's
    expert set in a layer: 0 gives i.i.d. uniform draws, 1 a constant
    per-layer working set.
    """

    n_tokens: int
    n_layers: int
    n_experts: int
    top_k: int = 2
    locality: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.locality <= 1.0:
            raise ValueError("locality must lie in [0, 1]")
        if self.top_k > self.n_experts:
            raise ValueError("top_k cannot exceed n_experts")

    def to_dict(self) -> dict:
        return {"n_tokens": self.n_tokens, "n_layers": self.n_layers,
                "n_experts": self.n_experts, "top_k": self.top_k,
                "locality": self.locality, "seed": self.seed}


def synth(spec: SyntheticTraceSpec) -> Trace:
    """Deterministic synthetic trace; ordered expert draws are uniform over
    arrangements at locality 0."""
    rng = np.random.default_rng(spec.seed)
    prev: list[tuple[int, ...] | None] = [None] * spec.n_layers
    records = []
    for t in range(spec.n_tokens):
        for ell in range(spec.n_layers):
            if prev[ell] is not None and rng.random() < spec.locality:
                experts = prev[ell]
            else:
                experts = tuple(int(e) for e in rng.permutation(spec.n_experts)[:spec.top_k])
            prev[ell] = experts
            w = rng.random(spec.top_k)
            w = np.sort(w / w.sum())[::-1].astype(np.float32)
            records.append(TraceRecord(t, ell, experts, w))
    trace = Trace(
        config_digest=config_digest(spec.to_dict()),
        n_layers=spec.n_layers, n_experts=spec.n_experts, top_k=spec.top_k,
        records_hidden=False, prompt_len=0, records=records,
    )
    trace.validate()
    return trace


# --------------------------------------------------------------------------
# JSONL encoding
# --------------------------------------------------------------------------

def _header_dict(trace: Trace, include_gates: bool) -> dict:
    h = {
        "format": "moe-trace", "version": _VERSION,
        "config_digest": trace.config_digest,
        "n_layers": trace.n_layers, "n_experts": trace.n_experts,
        "top_k": trace.top_k, "records_hidden": trace.records_hidden,
        "prompt_len": trace.prompt_len, "d_model": trace.d_model,
    }
    if include_gates and trace.gates is not None:
        h["gates"] = [[[float(x) for x in row] for row in layer] for layer in trace.gates]
    return h


def to_jsonl(trace: Trace) -> str:
    trace.validate()
    out = [json.dumps(_header_dict(trace, include_gates=True),
                      sort_keys=True, separators=(",", ":"))]
    for r in trace.records:
        rec = {"t": r.token_pos, "l": r.layer, "e": list(r.experts),
               "w": [float(x) for x in r.weights]}
        if r.hidden is not None:
            rec["h"] = [float(x) for x in r.hidden]
        out.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    return "\n".join(out) + "\n"


def from_jsonl(text: str) -> Trace:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise TraceFormatError("empty trace file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"bad trace header: {exc}") from exc
    if header.get("format") != "moe-trace":
        raise TraceFormatError("not a trace file (missing format marker)")
    gates = header.get("gates")
    trace = Trace(
        config_digest=header["config_digest"],
        n_layers=header["n_layers"], n_experts=header["n_experts"],
        top_k=header["top_k"], records_hidden=header["records_hidden"],
        prompt_len=header.get("prompt_len", 0), d_model=header.get("d_model"),
        gates=np.asarray(gates, dtype=np.float32) if gates is not None else None,
    )
    for ln in lines[1:]:
        rec = json.loads(ln)
        hidden = rec.get("h")
        trace.records.append(TraceRecord(
            rec["t"], rec["l"], tuple(rec["e"]),
            np.asarray(rec["w"], dtype=np.float32),
            np.asarray(hidden, dtype=np.float32) if hidden is not None else None,
        ))
    trace.validate()
    return trace


# --------------------------------------------------------------------------
# Packed binary encoding (magic MOET1, little-endian)
# --------------------------------------------------------------------------

def to_binary(trace: Trace) -> bytes:
    trace.validate()
    header = json.dumps(_header_dict(trace, include_gates=False),
                        sort_keys=True, separators=(",", ":")).encode()
    out = io.BytesIO()
    out.write(BINARY_MAGIC)
    out.write(struct.pack("<BI", _VERSION, len(header)))
    out.write(header)
    if trace.gates is not None:
        out.write(np.ascontiguousarray(trace.gates, dtype="<f4").tobytes())
    out.write(struct.pack("<I", len(trace.records)))
    for r in trace.records:
        out.write(struct.pack("<II", r.token_pos, r.layer))
        out.write(np.asarray(r.experts, dtype="<u2").tobytes())
        out.write(np.asarray(r.weights, dtype="<f4").tobytes())
        if trace.records_hidden:
            out.write(np.asarray(r.hidden, dtype="<f4").tobytes())
    return out.getvalue()


def from_binary(buf: bytes) -> Trace:
    if buf[:5] != BINARY_MAGIC:
        raise TraceFormatError("bad magic; not a binary trace")
    version, hlen = struct.unpack_from("<BI", buf, 5)
    if version != _VERSION:
        raise TraceFormatError(f"unsupported trace version {version}")
    off = 5 + struct.calcsize("<BI")
    header = json.loads(buf[off:off + hlen].decode())
    off += hlen
    trace = Trace(
        config_digest=header["config_digest"],
        n_layers=header["n_layers"], n_experts=header["n_experts"],
        top_k=header["top_k"], records_hidden=header["records_hidden"],
        prompt_len=header.get("prompt_len", 0), d_model=header.get("d_model"),
    )
    if trace.records_hidden:
        n = trace.n_layers * trace.d_model * trace.n_experts
        trace.gates = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(
            trace.n_layers, trace.d_model, trace.n_experts).copy()
        off += 4 * n
    (n_records,) = struct.unpack_from("<I", buf, off)
    off += 4
    k = trace.top_k
    for _ in range(n_records):
        t, ell = struct.unpack_from("<II", buf, off)
        off += 8
        experts = tuple(int(e) for e in np.frombuffer(buf, dtype="<u2", count=k, offset=off))
        off += 2 * k
        weights = np.frombuffer(buf, dtype="<f4", count=k, offset=off).copy()
        off += 4 * k
        hidden = None
        if trace.records_hidden:
            hidden = np.frombuffer(buf, dtype="<f4", count=trace.d_model, offset=off).copy()
            off += 4 * trace.d_model
        trace.records.append(TraceRecord(t, ell, experts, weights, hidden))
    if off != len(buf):
        raise TraceFormatError("trailing bytes after final record")
    trace.validate()
    return trace


def save(trace: Trace, path: str, binary: bool = False) -> None:
    if binary:
        with open(path, "wb") as fh:
            fh.write(to_binary(trace))
    else:
        with open(path, "w") as fh:
            fh.write(to_jsonl(trace))


def load(path: str) -> Trace:
    with open(path, "rb") as fh:
        head = fh.read(5)
        rest = fh.read()
    if head == BINARY_MAGIC:
        return from_binary(head + rest)
    return from_jsonl((head + rest).decode())
