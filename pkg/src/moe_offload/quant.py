"""Affine group quantization with packed n-bit storage and exact size accounting.

Weights are quantized in two grouping levels:

* per group of ``group_size`` weights: a zero-point (the group minimum),
  itself quantized to ``meta_bits`` and dequantized through per-meta-group
  affine parameters;
* per scale group of ``scale_group_size`` weights: one stored float16 scale
  (the largest per-group scale inside the scale group, so every member
  group's codes stay in range).

Codes are computed against the exact (unquantized) group minimum, which makes
quantize -> dequantize -> quantize a fixed point on the packed bytes.
The serialized layout is bit-exact and byte-countable, so average
bits-per-parameter is an exact accounting quantity, not an estimate.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

_ALLOWED_BITS = (2, 3, 4, 16)
_BLOCK_VERSION = 1


class QuantFormatError(ValueError):
    """Raised when a serialized block is corrupted or internally inconsistent."""


@dataclass(frozen=True)
class QuantScheme:
    """Storage recipe: code width plus the two-level metadata grouping."""

    bits: int
    group_size: int = 16
    scale_group_size: int = 128
    meta_bits: int = 8
    scale_storage_bits: int = 16

    def __post_init__(self):
        if self.bits not in _ALLOWED_BITS:
            raise ValueError(f"bits must be one of {_ALLOWED_BITS}, got {self.bits}")
        if self.bits == 16:
            return  # passthrough, grouping fields unused
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.scale_group_size % self.group_size != 0:
            raise ValueError(
                "scale_group_size must be a multiple of group_size "
                f"({self.scale_group_size} % {self.group_size} != 0)"
            )
        if not 2 <= self.meta_bits <= 8:
            raise ValueError("meta_bits must be in [2, 8]")
        if self.scale_storage_bits != 16:
            raise ValueError("only 16-bit scale storage is supported")

    @property
    def is_passthrough(self) -> bool:
        return self.bits == 16


# The quantization recipes benchmarked for expert/attention weights:
# 16-bit passthrough, 4-bit/g64/sg256, 3-bit/g64/sg128, 2-bit/g16/sg128.
SCHEME_FP16 = QuantScheme(bits=16)
SCHEME_4BIT = QuantScheme(bits=4, group_size=64, scale_group_size=256)
SCHEME_3BIT = QuantScheme(bits=3, group_size=64, scale_group_size=128)
SCHEME_2BIT = QuantScheme(bits=2, group_size=16, scale_group_size=128)

PRESET_SCHEMES = {16: SCHEME_FP16, 4: SCHEME_4BIT, 3: SCHEME_3BIT, 2: SCHEME_2BIT}


@dataclass
class QuantizedBlock:
    """One quantized tensor: packed codes plus group metadata.

    ``zeros`` holds the per-group zero-point codes (unsigned, ``meta_bits``
    wide); ``zero_scales``/``zero_offsets`` are the per-meta-group affine
    parameters that dequantize them. ``scales`` is one float16 per scale
    group. Passthrough blocks keep the raw float16 payload in
    ``packed_codes`` and leave all metadata arrays empty.
    """

    scheme: QuantScheme
    packed_codes: bytes
    zeros: np.ndarray          # uint8 codes, one per group
    zero_scales: np.ndarray    # float16, one per meta group
    zero_offsets: np.ndarray   # float16, one per meta group
    scales: np.ndarray         # float16, one per scale group
    original_shape: tuple[int, ...]
    pad_count: int = 0

    @property
    def num_weights(self) -> int:
        return int(np.prod(self.original_shape))

    @property
    def padded_count(self) -> int:
        return self.num_weights + self.pad_count


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack unsigned ``bits``-wide codes LSB-first into little-endian bytes."""
    codes = np.ascontiguousarray(codes, dtype=np.uint8)
    if np.any(codes >> bits):
        raise ValueError(f"code out of range for {bits}-bit packing")
    if bits == 8:
        return codes.tobytes()
    bit_planes = np.unpackbits(codes[:, None], axis=1, bitorder="little", count=bits)
    return np.packbits(bit_planes.reshape(-1), bitorder="little").tobytes()


def unpack_codes(buf: bytes, bits: int, count: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; returns ``count`` uint8 codes."""
    raw = np.frombuffer(buf, dtype=np.uint8)
    if bits == 8:
        if raw.size < count:
            raise QuantFormatError("packed buffer shorter than declared code count")
        return raw[:count].copy()
    if raw.size * 8 < count * bits:
        raise QuantFormatError("packed buffer shorter than declared code count")
    bit_arr = np.unpackbits(raw, bitorder="little", count=count * bits)
    planes = bit_arr.reshape(count, bits).astype(np.uint16)
    weights = np.uint16(1) << np.arange(bits, dtype=np.uint16)
    return (planes @ weights).astype(np.uint8)


def _pad_rows(w: np.ndarray, g: int) -> tuple[np.ndarray, int]:
    """Pad each row with its last value to a multiple of g; return flat array."""
    if w.ndim == 1:
        w = w[None, :]
    rows, cols = w.shape
    rem = (-cols) % g
    if rem:
        w = np.concatenate([w, np.repeat(w[:, -1:], rem, axis=1)], axis=1)
    return np.ascontiguousarray(w, dtype=np.float32).reshape(-1), rows * rem


def _group_minmax(flat: np.ndarray, g: int) -> tuple[np.ndarray, np.ndarray]:
    grouped = flat.reshape(-1, g)
    return grouped.min(axis=1), grouped.max(axis=1)


def _affine_meta(values: np.ndarray, run: int, levels: int):
    """Quantize a float32 array in runs of ``run`` elements to ``levels`` codes.

    Returns (codes, scales_f16, offsets_f16). Codes are computed against the
    exact run minimum so a run of already-dequantized values re-quantizes to
    the identical codes.
    """
    n = values.size
    n_runs = -(-n // run)
    codes = np.empty(n, dtype=np.uint8)
    scales = np.empty(n_runs, dtype=np.float16)
    offsets = np.empty(n_runs, dtype=np.float16)
    for i in range(n_runs):
        chunk = values[i * run:(i + 1) * run]
        lo = float(chunk.min())
        spread = float(chunk.max()) - lo
        s = spread / (levels - 1) if spread > 0.0 else 1.0
        s16 = np.float16(s)
        c = np.rint((chunk - np.float32(lo)) / np.float32(s16))
        codes[i * run:(i + 1) * run] = np.clip(c, 0, levels - 1).astype(np.uint8)
        scales[i] = s16
        offsets[i] = np.float16(lo)
    return codes, scales, offsets


def _dequant_meta(codes, scales, offsets, run: int) -> np.ndarray:
    n = codes.size
    out = np.empty(n, dtype=np.float32)
    for i in range(scales.size):
        sl = slice(i * run, min((i + 1) * run, n))
        out[sl] = codes[sl].astype(np.float32) * np.float32(scales[i]) + np.float32(offsets[i])
    return out


def quantize(w: np.ndarray, scheme: QuantScheme) -> QuantizedBlock:
    """Quantize a matrix to packed codes under ``scheme``.

    Per group of ``group_size`` weights the zero-point is the group minimum
    and the group scale is (max - min) / (2^bits - 1); the stored scale of a
    scale group is the maximum member-group scale (1.0 if all groups are
    constant), so codes never exceed the code range.
    """
    w = np.asarray(w, dtype=np.float32)
    if not np.all(np.isfinite(w)):
        raise ValueError("cannot quantize non-finite values")
    if scheme.is_passthrough:
        raise ValueError("bits=16 is passthrough; use passthrough_block()")

    g, sg = scheme.group_size, scheme.scale_group_size
    levels = (1 << scheme.bits) - 1
    shape = tuple(w.shape)
    flat, pad_count = _pad_rows(w, g)

    zmin, zmax = _group_minmax(flat, g)
    group_scales = (zmax - zmin) / np.float32(levels)

    groups_per_sg = sg // g
    n_groups = zmin.size
    n_sgroups = -(-n_groups // groups_per_sg)
    scales = np.empty(n_sgroups, dtype=np.float16)
    for i in range(n_sgroups):
        m = float(group_scales[i * groups_per_sg:(i + 1) * groups_per_sg].max())
        scales[i] = np.float16(m if m > 0.0 else 1.0)

    # Expand stored metadata back over weights and code against the true mins.
    scale_per_group = np.repeat(scales.astype(np.float32), groups_per_sg)[:n_groups]
    codes = np.rint(
        (flat.reshape(-1, g) - zmin[:, None]) / scale_per_group[:, None]
    )
    codes = np.clip(codes, 0, levels).astype(np.uint8).reshape(-1)

    zcodes, zscales, zoffsets = _affine_meta(zmin, sg, 1 << scheme.meta_bits)

    return QuantizedBlock(
        scheme=scheme,
        packed_codes=pack_codes(codes, scheme.bits),
        zeros=zcodes,
        zero_scales=zscales,
        zero_offsets=zoffsets,
        scales=scales,
        original_shape=shape,
        pad_count=pad_count,
    )


def passthrough_block(w: np.ndarray, scheme: QuantScheme = SCHEME_FP16) -> QuantizedBlock:
    """Store a tensor as raw float16 (the 16-bit 'no quantization' scheme)."""
    if not scheme.is_passthrough:
        raise ValueError("passthrough_block requires a 16-bit scheme")
    w = np.asarray(w, dtype=np.float32)
    if not np.all(np.isfinite(w)):
        raise ValueError("cannot store non-finite values")
    empty8 = np.empty(0, dtype=np.uint8)
    empty16 = np.empty(0, dtype=np.float16)
    return QuantizedBlock(
        scheme=scheme,
        packed_codes=w.astype(np.float16).tobytes(),
        zeros=empty8,
        zero_scales=empty16,
        zero_offsets=empty16,
        scales=empty16,
        original_shape=tuple(w.shape),
        pad_count=0,
    )


def encode_tensor(w: np.ndarray, scheme: QuantScheme) -> QuantizedBlock:
    """Quantize or passthrough depending on the scheme."""
    if scheme.is_passthrough:
        return passthrough_block(w, scheme)
    return quantize(w, scheme)


def dequantized_zeros(block: QuantizedBlock) -> np.ndarray:
    """The reconstructed per-group zero-points (float32)."""
    return _dequant_meta(
        block.zeros, block.zero_scales, block.zero_offsets, block.scheme.scale_group_size
    )


def dequantize(block: QuantizedBlock) -> np.ndarray:
    """Reconstruct the float32 tensor; padding is stripped."""
    scheme = block.scheme
    shape = block.original_shape
    n = block.num_weights

    if scheme.is_passthrough:
        expected = n * 2
        if len(block.packed_codes) != expected:
            raise QuantFormatError(
                f"passthrough payload is {len(block.packed_codes)} bytes, expected {expected}"
            )
        vals = np.frombuffer(block.packed_codes, dtype=np.float16, count=n)
        return vals.astype(np.float32).reshape(shape)

    g, sg = scheme.group_size, scheme.scale_group_size
    padded = block.padded_count
    rows = shape[0] if len(shape) > 1 else 1
    cols = padded // rows
    if padded % g or rows * cols != padded:
        raise QuantFormatError("padded element count inconsistent with group size")
    n_groups = padded // g
    if block.zeros.size != n_groups:
        raise QuantFormatError(
            f"zeros array has {block.zeros.size} entries, expected {n_groups}"
        )
    if block.scales.size != -(-n_groups // (sg // g)):
        raise QuantFormatError("scales array length inconsistent with shape")
    if block.zero_scales.size != -(-n_groups // sg) or block.zero_scales.size != block.zero_offsets.size:
        raise QuantFormatError("zero metadata length inconsistent with shape")

    codes = unpack_codes(block.packed_codes, scheme.bits, padded).astype(np.float32)
    zhat = dequantized_zeros(block)
    scale_per_group = np.repeat(block.scales.astype(np.float32), sg // g)[:n_groups]

    flat = codes.reshape(-1, g) * scale_per_group[:, None] + zhat[:, None]
    out = flat.reshape(rows, cols)[:, : cols - (block.pad_count // rows if rows else 0)]
    return out.reshape(shape) if len(shape) > 1 else out.reshape(-1)[:n]


def bits_per_param(scheme: QuantScheme) -> float:
    """Average stored bits per weight including all metadata.

    Derived from the serialization layout (codes + per-group zero codes +
    per-scale-group scale + per-meta-group zero affine pair), so it equals
    serialized payload bytes * 8 / num_weights on group-aligned tensors.
    """
    if scheme.is_passthrough:
        return 16.0
    g, sg = scheme.group_size, scheme.scale_group_size
    ssb = scheme.scale_storage_bits
    return scheme.bits + scheme.meta_bits / g + ssb / sg + 2 * ssb / (g * sg)


# --------------------------------------------------------------------------
# Bit-exact serialization
# --------------------------------------------------------------------------

_HEADER_FMT = "<BBIIBB"  # version, bits, group_size, scale_group_size, meta_bits, ndim


def header_nbytes(block: QuantizedBlock) -> int:
    return struct.calcsize(_HEADER_FMT) + 4 * len(block.original_shape) + 4


def payload_nbytes(block: QuantizedBlock) -> int:
    """Serialized size excluding the fixed header: what bits_per_param counts."""
    if block.scheme.is_passthrough:
        return len(block.packed_codes)
    zero_bytes = -(-block.zeros.size * block.scheme.meta_bits // 8)
    return (
        len(block.packed_codes)
        + zero_bytes
        + 2 * block.zero_scales.size
        + 2 * block.zero_offsets.size
        + 2 * block.scales.size
    )


def serialize_block(block: QuantizedBlock) -> bytes:
    """Header {version, bits, group sizes, meta_bits, shape, pad_count}, then
    packed codes, then the zeros section, then the scales array."""
    s = block.scheme
    out = io.BytesIO()
    out.write(struct.pack(_HEADER_FMT, _BLOCK_VERSION, s.bits,
                          0 if s.is_passthrough else s.group_size,
                          0 if s.is_passthrough else s.scale_group_size,
                          0 if s.is_passthrough else s.meta_bits,
                          len(block.original_shape)))
    for d in block.original_shape:
        out.write(struct.pack("<I", d))
    out.write(struct.pack("<I", block.pad_count))
    out.write(block.packed_codes)
    if not s.is_passthrough:
        out.write(pack_codes(block.zeros, s.meta_bits))
        out.write(block.zero_scales.astype("<f2").tobytes())
        out.write(block.zero_offsets.astype("<f2").tobytes())
        out.write(block.scales.astype("<f2").tobytes())
    return out.getvalue()


def deserialize_block(buf: bytes) -> QuantizedBlock:
    base = struct.calcsize(_HEADER_FMT)
    if len(buf) < base:
        raise QuantFormatError("buffer shorter than block header")
    version, bits, g, sg, meta_bits, ndim = struct.unpack_from(_HEADER_FMT, buf, 0)
    if version != _BLOCK_VERSION:
        raise QuantFormatError(f"unsupported block version {version}")
    if bits not in _ALLOWED_BITS:
        raise QuantFormatError(f"unsupported code width {bits}")
    off = base
    if len(buf) < off + 4 * ndim + 4:
        raise QuantFormatError("buffer shorter than declared shape")
    shape = tuple(struct.unpack_from(f"<{ndim}I", buf, off)) if ndim else ()
    off += 4 * ndim
    pad_count = struct.unpack_from("<I", buf, off)[0]
    off += 4

    n = int(np.prod(shape)) if shape else 0
    if bits == 16:
        scheme = QuantScheme(bits=16)
        payload = buf[off:off + 2 * n]
        if len(payload) != 2 * n:
            raise QuantFormatError("truncated passthrough payload")
        return QuantizedBlock(scheme, payload, np.empty(0, np.uint8),
                              np.empty(0, np.float16), np.empty(0, np.float16),
                              np.empty(0, np.float16), shape, 0)

    scheme = QuantScheme(bits=bits, group_size=g, scale_group_size=sg, meta_bits=meta_bits)
    padded = n + pad_count
    if g == 0 or padded % g:
        raise QuantFormatError("pad_count inconsistent with group size")
    n_groups = padded // g
    n_sgroups = -(-n_groups // (sg // g))
    n_zgroups = -(-n_groups // sg)

    code_bytes = -(-padded * bits // 8)
    zero_bytes = -(-n_groups * meta_bits // 8)
    need = code_bytes + zero_bytes + 2 * (2 * n_zgroups) + 2 * n_sgroups
    if len(buf) - off != need:
        raise QuantFormatError(
            f"payload is {len(buf) - off} bytes, layout requires {need}"
        )

    packed = buf[off:off + code_bytes]
    off += code_bytes
    zeros = unpack_codes(buf[off:off + zero_bytes], meta_bits, n_groups)
    off += zero_bytes
    zscales = np.frombuffer(buf, dtype="<f2", count=n_zgroups, offset=off).copy()
    off += 2 * n_zgroups
    zoffsets = np.frombuffer(buf, dtype="<f2", count=n_zgroups, offset=off).copy()
    off += 2 * n_zgroups
    scales = np.frombuffer(buf, dtype="<f2", count=n_sgroups, offset=off).copy()

    return QuantizedBlock(scheme, packed, zeros, zscales, zoffsets, scales, shape, pad_count)


# --------------------------------------------------------------------------
# Architecture size accounting
# --------------------------------------------------------------------------

REQUIRED_FP16_ROLES = frozenset({"embeddings", "lm_head", "moe_gates", "layer_norms"})


@dataclass(frozen=True)
class ArchSpec:
    """Exact parameter counts per component of a target architecture."""

    name: str
    experts_params: int
    attention_params: int
    embedding_params: int
    gate_params: int
    norm_params: int

    @property
    def total_params(self) -> int:
        return (self.experts_params + self.attention_params + self.embedding_params
                + self.gate_params + self.norm_params)

    @property
    def experts_fraction(self) -> float:
        return self.experts_params / self.total_params if self.total_params else 0.0


def _mixtral_arch() -> ArchSpec:
    vocab, d, layers = 32000, 4096, 32
    d_ffn, n_experts = 14336, 8
    kv_dim = 8 * 128  # 8 KV heads of width 128 (grouped-query attention)
    experts = layers * n_experts * 3 * d * d_ffn
    attention = layers * (2 * d * d + 2 * d * kv_dim)
    embedding = 2 * vocab * d  # token embedding + untied output head
    gates = layers * n_experts * d
    norms = layers * 2 * d + d
    return ArchSpec("mixtral8x7b", experts, attention, embedding, gates, norms)


MIXTRAL_8X7B = _mixtral_arch()

BUNDLED_ARCHS = {"mixtral8x7b": MIXTRAL_8X7B}


@dataclass(frozen=True)
class MixedQuantConfig:
    """Which scheme each component gets; small layers stay at 16-bit."""

    attn_scheme: QuantScheme
    expert_scheme: QuantScheme
    fp16_layers: frozenset[str] = REQUIRED_FP16_ROLES

    def __post_init__(self):
        missing = REQUIRED_FP16_ROLES - self.fp16_layers
        if missing:
            raise ValueError(f"fp16_layers must include {sorted(missing)}")


@dataclass
class SizeReport:
    """Per-component sizes in GiB under a mixed quantization config."""

    arch: ArchSpec
    config: MixedQuantConfig
    rows: list[tuple[str, int, float, float]] = field(default_factory=list)

    @property
    def total_gib(self) -> float:
        return sum(r[3] for r in self.rows)

    @property
    def experts_fraction(self) -> float:
        return self.arch.experts_fraction


def model_size_report(arch: ArchSpec, config: MixedQuantConfig) -> SizeReport:
    """Total GiB = sum over components of params * bits_per_param / 8 / 2^30."""
    components = [
        ("experts", arch.experts_params, bits_per_param(config.expert_scheme)),
        ("attention", arch.attention_params, bits_per_param(config.attn_scheme)),
        ("embeddings", arch.embedding_params, 16.0),
        ("moe_gates", arch.gate_params, 16.0),
        ("layer_norms", arch.norm_params, 16.0),
    ]
    report = SizeReport(arch=arch, config=config)
    for name, params, bpp in components:
        report.rows.append((name, params, bpp, params * bpp / 8 / 2**30))
    return report


def scheme_label(scheme: QuantScheme) -> str:
    return "FP16" if scheme.is_passthrough else f"{scheme.bits}-bit"
