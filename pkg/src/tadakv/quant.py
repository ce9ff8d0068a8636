"""Group-wise asymmetric integer quantization with sub-byte bit packing.

A deviation tensor of shape ``(tokens, heads, head_dim)`` is quantized one
group per (token, head) row of length ``head_dim``.  Each group stores packed
unsigned codes plus one float32 (scale, min) pair, so the metadata overhead is
exactly 2 floats per ``head_dim`` elements.  Width 16 is a diagnostic
pass-through that keeps the raw float32 payload instead of integer codes.

Packing layout: codes fill each byte from the low-order bits up, lowest code
first, and every group is padded to a byte boundary, so serialized caches are
bit-exact across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError, ShapeError
from .tensor import F32, as_f32

PACKED_WIDTHS = (2, 4, 8)
PASSTHROUGH_WIDTH = 16
ALLOWED_WIDTHS = PACKED_WIDTHS + (PASSTHROUGH_WIDTH,)


def validate_bits(bits: int) -> int:
    if bits not in ALLOWED_WIDTHS:
        raise ConfigError(f"bit width must be one of {ALLOWED_WIDTHS}, got {bits}")
    return bits


def bytes_per_group(group_size: int, bits: int) -> int:
    """Packed byte length of one group, including byte-boundary padding."""
    if bits == PASSTHROUGH_WIDTH:
        return group_size * 4  # raw float32 payload
    return (group_size * bits + 7) // 8


@dataclass
class QuantizedDeviation:
    """Packed deviation codes plus per-group (scale, min) metadata.

    ``codes`` holds ``num_tokens * num_heads`` groups in row-major
    (token, head) order.  For the 16-bit pass-through, ``codes`` is the raw
    little-endian float32 payload and ``scales``/``mins`` are unused zeros.
    """

    bits: int
    num_tokens: int
    num_heads: int
    group_size: int
    codes: bytes
    scales: np.ndarray = field(repr=False)
    mins: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        validate_bits(self.bits)
        expected = self.num_groups * bytes_per_group(self.group_size, self.bits)
        if len(self.codes) != expected:
            raise FormatError(
                f"packed codes length mismatch: have {len(self.codes)} bytes, expected {expected}"
            )
        if self.scales.shape != (self.num_groups,) or self.mins.shape != (self.num_groups,):
            raise FormatError(
                f"metadata length mismatch: {self.scales.shape}/{self.mins.shape} "
                f"for {self.num_groups} groups"
            )

    @property
    def num_groups(self) -> int:
        return self.num_tokens * self.num_heads

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.num_tokens, self.num_heads, self.group_size)


def empty_deviation(bits: int, num_heads: int, group_size: int) -> QuantizedDeviation:
    """A zero-token deviation record, the seed for incremental appends."""
    return QuantizedDeviation(
        bits=validate_bits(bits),
        num_tokens=0,
        num_heads=num_heads,
        group_size=group_size,
        codes=b"",
        scales=np.empty(0, dtype=F32),
        mins=np.empty(0, dtype=F32),
    )


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack a (groups, group_size) array of codes in [0, 2^bits) into bytes."""
    if bits not in PACKED_WIDTHS:
        raise ConfigError(f"packing supports widths {PACKED_WIDTHS}, got {bits}")
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ShapeError(f"expected (groups, group_size) codes, got shape {codes.shape}")
    num_groups, group_size = codes.shape
    per_byte = 8 // bits
    pad = (-group_size) % per_byte
    if pad:
        padded = np.zeros((num_groups, group_size + pad), dtype=np.uint8)
        padded[:, :group_size] = codes
    else:
        padded = codes.astype(np.uint8, copy=False)
    chunks = padded.reshape(num_groups, -1, per_byte).astype(np.uint16)
    shifts = bits * np.arange(per_byte, dtype=np.uint16)
    packed = np.bitwise_or.reduce(chunks << shifts, axis=2).astype(np.uint8)
    return packed.tobytes()


def unpack_codes(
    data: bytes,
    bits: int,
    num_groups: int,
    group_size: int,
    groups: np.ndarray | None = None,
) -> np.ndarray:
    """Recover (groups, group_size) uint8 codes from the packed byte stream.

    ``groups`` optionally selects a subset of group indices, letting callers
    unpack a tile without touching the rest of the stream.
    """
    if bits not in PACKED_WIDTHS:
        raise ConfigError(f"unpacking supports widths {PACKED_WIDTHS}, got {bits}")
    bpg = bytes_per_group(group_size, bits)
    if len(data) != num_groups * bpg:
        raise FormatError(
            f"packed codes length mismatch: have {len(data)} bytes, expected {num_groups * bpg}"
        )
    mat = np.frombuffer(data, dtype=np.uint8).reshape(num_groups, bpg)
    if groups is not None:
        mat = mat[np.asarray(groups, dtype=np.int64)]
    per_byte = 8 // bits
    shifts = bits * np.arange(per_byte, dtype=np.uint8)
    mask = np.uint8((1 << bits) - 1)
    expanded = (mat[:, :, None] >> shifts) & mask
    return expanded.reshape(mat.shape[0], bpg * per_byte)[:, :group_size]


def _quantize_rows(rows: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quantize each row of a (groups, group_size) float32 array independently.

    Returns integer codes plus float32 per-row scales and minima.  The scale
    starts from (max - min) / (2^bits - 1) and is then refined to a fixed
    point of the float32 reconstruction map, which makes a second
    quantize/dequantize pass reproduce the first one bit-exactly.
    """
    if not np.isfinite(rows).all():
        raise DataError("cannot quantize non-finite values")
    cmax = float(2**bits - 1)
    mins = rows.min(axis=1)
    maxs = rows.max(axis=1)
    mins64 = mins.astype(np.float64)
    scale = ((maxs.astype(np.float64) - mins64) / cmax).astype(F32)
    scale = np.where(maxs == mins, F32(0), scale)
    # Fixed point of s -> f32((f32(min + cmax*s) - min) / cmax); the map is
    # monotone under single-rounded float64 arithmetic, so this converges.
    for _ in range(8):
        top = (mins64 + cmax * scale.astype(np.float64)).astype(F32)
        refined = ((top.astype(np.float64) - mins64) / cmax).astype(F32)
        refined = np.where(scale == 0, F32(0), refined)
        if np.array_equal(refined.view(np.uint32), scale.view(np.uint32)):
            break
        scale = refined

    safe = np.where(scale > 0, scale, F32(1)).astype(np.float64)
    # Half-away-from-zero rounding; the numerators are non-negative.
    codes = np.floor((rows.astype(np.float64) - mins64[:, None]) / safe[:, None] + 0.5)
    codes = np.clip(codes, 0, int(cmax)).astype(np.int64)
    codes[scale == 0] = 0
    return codes, scale.astype(F32), mins.astype(F32)


def _dequantize_rows(codes: np.ndarray, scales: np.ndarray, mins: np.ndarray) -> np.ndarray:
    """Reconstruct min + code * scale per row, single-rounded to float32."""
    out = mins[:, None].astype(np.float64) + codes.astype(np.float64) * scales[:, None].astype(np.float64)
    return out.astype(F32)


def quantize_group(values, bits: int) -> tuple[np.ndarray, float, float]:
    """Quantize one group of finite values to (codes, scale, min).

    The reconstruction ``min + code * scale`` differs from each input by at
    most ``scale / 2`` plus float32 rounding.  A constant group stores
    scale 0 and all-zero codes so dequantization returns the constant exactly.
    """
    validate_bits(bits)
    if bits == PASSTHROUGH_WIDTH:
        raise ConfigError("width 16 is a pass-through and bypasses group quantization")
    vals = as_f32(values)
    if vals.ndim != 1 or vals.size == 0:
        raise ShapeError(f"expected a non-empty 1-D group, got shape {vals.shape}")
    codes, scales, mins = _quantize_rows(vals[None, :], bits)
    return codes[0], float(scales[0]), float(mins[0])


def quantize_tensor(dev: np.ndarray, bits: int) -> QuantizedDeviation:
    """Quantize a (tokens, heads, head_dim) tensor, one group per (token, head)."""
    validate_bits(bits)
    dev = as_f32(dev)
    if dev.ndim != 3:
        raise ShapeError(f"expected (tokens, heads, head_dim) input, got shape {dev.shape}")
    tokens, heads, group_size = dev.shape
    rows = dev.reshape(tokens * heads, group_size)
    if bits == PASSTHROUGH_WIDTH:
        if not np.isfinite(rows).all():
            raise DataError("cannot store non-finite values")
        return QuantizedDeviation(
            bits=bits,
            num_tokens=tokens,
            num_heads=heads,
            group_size=group_size,
            codes=rows.astype("<f4").tobytes(),
            scales=np.zeros(tokens * heads, dtype=F32),
            mins=np.zeros(tokens * heads, dtype=F32),
        )
    codes, scales, mins = _quantize_rows(rows, bits)
    return QuantizedDeviation(
        bits=bits,
        num_tokens=tokens,
        num_heads=heads,
        group_size=group_size,
        codes=pack_codes(codes, bits),
        scales=scales,
        mins=mins,
    )


def dequantize_groups(q: QuantizedDeviation, groups: np.ndarray) -> np.ndarray:
    """Reconstruct only the selected groups as a (len(groups), group_size) tensor."""
    idx = np.asarray(groups, dtype=np.int64)
    if q.bits == PASSTHROUGH_WIDTH:
        raw = np.frombuffer(q.codes, dtype="<f4").reshape(q.num_groups, q.group_size)
        return raw[idx].astype(F32)
    codes = unpack_codes(q.codes, q.bits, q.num_groups, q.group_size, groups=idx)
    return _dequantize_rows(codes, q.scales[idx], q.mins[idx])


def dequantize_tensor(q: QuantizedDeviation) -> np.ndarray:
    """Reconstruct the full (tokens, heads, head_dim) tensor."""
    full = dequantize_groups(q, np.arange(q.num_groups))
    return full.reshape(q.shape)


def direct_quantize_baseline(x: np.ndarray, bits: int) -> np.ndarray:
    """Group-quantize raw activations (no mean-centering) and reconstruct.

    The analysis suite uses this as the comparator that must cope with
    activation outliers on its own.
    """
    return dequantize_tensor(quantize_tensor(x, bits))


def concat_deviations(a: QuantizedDeviation, b: QuantizedDeviation) -> QuantizedDeviation:
    """Append the groups of ``b`` after those of ``a`` (same layout required)."""
    if (a.bits, a.num_heads, a.group_size) != (b.bits, b.num_heads, b.group_size):
        raise ShapeError(
            f"cannot concatenate deviations with layouts {(a.bits, a.num_heads, a.group_size)} "
            f"and {(b.bits, b.num_heads, b.group_size)}"
        )
    return QuantizedDeviation(
        bits=a.bits,
        num_tokens=a.num_tokens + b.num_tokens,
        num_heads=a.num_heads,
        group_size=a.group_size,
        codes=a.codes + b.codes,
        scales=np.concatenate([a.scales, b.scales]),
        mins=np.concatenate([a.mins, b.mins]),
    )
