"""Compressed KV store: cross-head means, packed deviations, residual buffer.

Each layer keeps three regions per side (K and V):

* a growing compressed region of per-token cross-head means plus quantized
  per-head deviations,
* a residual buffer of up to ``residual_length`` recent tokens kept verbatim
  in float32,
* the invariant that compressed tokens + residual tokens equals every token
  ever appended, in chronological order.

Keys enter the cache already rotated: position information is baked in at
write time, so reconstruction never needs positions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .quant import (
    ALLOWED_WIDTHS,
    QuantizedDeviation,
    concat_deviations,
    dequantize_groups,
    empty_deviation,
    quantize_tensor,
    validate_bits,
)
from .tensor import F32, RopeParams, as_f32

CACHE_MAGIC = b"TADAKV1"


@dataclass(frozen=True)
class PrecisionPlan:
    """Per-layer deviation bit widths, applied to both K and V of a layer."""

    bits_per_layer: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.bits_per_layer:
            raise ConfigError("a precision plan needs at least one layer")
        for bits in self.bits_per_layer:
            validate_bits(bits)
        object.__setattr__(self, "bits_per_layer", tuple(int(b) for b in self.bits_per_layer))

    @classmethod
    def uniform(cls, bits: int, num_layers: int) -> "PrecisionPlan":
        return cls(tuple([bits] * num_layers))

    def __len__(self) -> int:
        return len(self.bits_per_layer)

    def __getitem__(self, layer_idx: int) -> int:
        return self.bits_per_layer[layer_idx]

    @property
    def mean_bits(self) -> float:
        return sum(self.bits_per_layer) / len(self.bits_per_layer)


@dataclass(frozen=True)
class ModelConfig:
    """Layer/head/dimension geometry plus cache policy for one model."""

    num_layers: int
    num_q_heads: int
    num_kv_heads: int
    head_dim: int
    residual_length: int
    rope: RopeParams
    plan: PrecisionPlan

    def __post_init__(self) -> None:
        if min(self.num_layers, self.num_q_heads, self.num_kv_heads, self.head_dim) <= 0:
            raise ConfigError("layer/head/dimension counts must be positive")
        if self.residual_length < 0:
            raise ConfigError(f"residual_length must be non-negative, got {self.residual_length}")
        if self.num_q_heads % self.num_kv_heads != 0:
            raise ConfigError(
                f"num_q_heads ({self.num_q_heads}) must be a multiple of "
                f"num_kv_heads ({self.num_kv_heads})"
            )
        if len(self.plan) != self.num_layers:
            raise ConfigError(
                f"plan covers {len(self.plan)} layers but the model has {self.num_layers}"
            )
        if self.rope.head_dim != self.head_dim:
            raise ConfigError(
                f"rotary head_dim {self.rope.head_dim} does not match head_dim {self.head_dim}"
            )


def mean_center(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split (tokens, heads, head_dim) activations into cross-head mean and deviations.

    Returns ``(mean, dev)`` with ``dev[t, i] = mean[t] - x[t, i]``, so the
    original activation is recovered as ``mean - dev``.  The mean is
    accumulated in float64 and stored in float32; deviations across heads sum
    to zero up to rounding.
    """
    x = as_f32(x)
    if x.ndim != 3:
        raise ShapeError(f"expected (tokens, heads, head_dim) input, got shape {x.shape}")
    mean = x.mean(axis=1, dtype=np.float64).astype(F32)
    dev = mean[:, None, :] - x
    return mean, dev


class CompressedLayerCache:
    """One layer's compressed KV state: means, packed deviations, residual buffer.

    Single-writer: the decode loop appends; reconstruction reads may run
    concurrently with each other but not with an append.
    """

    def __init__(self, num_kv_heads: int, head_dim: int, bits: int, residual_length: int):
        if num_kv_heads <= 0 or head_dim <= 0:
            raise ConfigError("num_kv_heads and head_dim must be positive")
        if residual_length < 0:
            raise ConfigError("residual_length must be non-negative")
        self.num_kv_heads = num_kv_heads
        self.head_dim = head_dim
        self.bits = validate_bits(bits)
        self.residual_length = residual_length
        self.k_mean = np.empty((0, head_dim), dtype=F32)
        self.v_mean = np.empty((0, head_dim), dtype=F32)
        self.k_dev = empty_deviation(bits, num_kv_heads, head_dim)
        self.v_dev = empty_deviation(bits, num_kv_heads, head_dim)
        self.residual_k = np.empty((0, num_kv_heads, head_dim), dtype=F32)
        self.residual_v = np.empty((0, num_kv_heads, head_dim), dtype=F32)

    @classmethod
    def for_layer(cls, cfg: ModelConfig, layer_idx: int) -> "CompressedLayerCache":
        return cls(cfg.num_kv_heads, cfg.head_dim, cfg.plan[layer_idx], cfg.residual_length)

    @property
    def r(self) -> int:
        """Current residual token count."""
        return self.residual_k.shape[0]

    @property
    def compressed_tokens(self) -> int:
        return self.k_mean.shape[0]

    @property
    def total_tokens(self) -> int:
        return self.compressed_tokens + self.r

    def append_tokens(self, k_new: np.ndarray, v_new: np.ndarray) -> None:
        """Append already-rotated keys and values for one or more tokens.

        New tokens enter the residual buffer; whenever the buffer fills to
        ``residual_length`` it is flushed as one block (mean-center, quantize,
        extend the compressed region).  ``residual_length`` 0 compresses
        immediately.
        """
        k_new = as_f32(k_new)
        v_new = as_f32(v_new)
        expected = (self.num_kv_heads, self.head_dim)
        if k_new.ndim != 3 or k_new.shape[1:] != expected:
            raise ShapeError(f"keys must be (tokens, {expected[0]}, {expected[1]}), got {k_new.shape}")
        if v_new.shape != k_new.shape:
            raise ShapeError(f"values shape {v_new.shape} does not match keys shape {k_new.shape}")
        if k_new.shape[0] == 0:
            return
        if self.residual_length == 0:
            self._compress_block(k_new, v_new)
            return
        self.residual_k = np.concatenate([self.residual_k, k_new])
        self.residual_v = np.concatenate([self.residual_v, v_new])
        while self.r >= self.residual_length:
            n = self.residual_length
            self._compress_block(self.residual_k[:n], self.residual_v[:n])
            self.residual_k = self.residual_k[n:]
            self.residual_v = self.residual_v[n:]

    def _compress_block(self, k_block: np.ndarray, v_block: np.ndarray) -> None:
        k_mean, k_dev = mean_center(k_block)
        v_mean, v_dev = mean_center(v_block)
        self.k_mean = np.concatenate([self.k_mean, k_mean])
        self.v_mean = np.concatenate([self.v_mean, v_mean])
        self.k_dev = concat_deviations(self.k_dev, quantize_tensor(k_dev, self.bits))
        self.v_dev = concat_deviations(self.v_dev, quantize_tensor(v_dev, self.bits))

    def _head_groups(self, head_idx: int, start: int, stop: int) -> np.ndarray:
        return np.arange(start, stop, dtype=np.int64) * self.num_kv_heads + head_idx

    def reconstruct_slice(
        self, head_idx: int, start: int, stop: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """Reconstruct compressed tokens [start, stop) for one KV head."""
        groups = self._head_groups(head_idx, start, stop)
        k_hat = self.k_mean[start:stop] - dequantize_groups(self.k_dev, groups)
        v_hat = self.v_mean[start:stop] - dequantize_groups(self.v_dev, groups)
        return k_hat, v_hat

    def reconstruct(self, head_idx: int) -> tuple[np.ndarray, np.ndarray]:
        """Full (tokens, head_dim) K̂/V̂ view for one KV head, oldest first.

        Compressed tokens are reconstructed as mean - dequantized deviation;
        residual tokens are copied verbatim after them.
        """
        if not 0 <= head_idx < self.num_kv_heads:
            raise ShapeError(f"head index {head_idx} out of range for {self.num_kv_heads} heads")
        k_comp, v_comp = self.reconstruct_slice(head_idx, 0, self.compressed_tokens)
        k_hat = np.concatenate([k_comp, self.residual_k[:, head_idx, :]])
        v_hat = np.concatenate([v_comp, self.residual_v[:, head_idx, :]])
        return k_hat, v_hat


def memory_ratio(cfg: ModelConfig, tokens_per_layer: int, include_residual: bool = False) -> float:
    """Cache bytes relative to a 16-bit uncompressed baseline, averaged over layers.

    A compressed token costs ``1/H + bits/16 + 2/head_dim`` of the baseline
    (one shared mean row, packed deviation codes, and a 16-bit-accounted
    (scale, min) pair per group).  With ``include_residual`` the residual
    tokens left by the flush policy are charged at full ratio 1.0, weighted
    by their share of the token count.  An empty cache reports 0.
    """
    if tokens_per_layer < 0:
        raise ConfigError(f"tokens_per_layer must be non-negative, got {tokens_per_layer}")
    if tokens_per_layer == 0:
        return 0.0
    heads = cfg.num_kv_heads
    total = 0.0
    for bits in cfg.plan.bits_per_layer:
        compressed = 1.0 / heads + bits / 16.0 + 2.0 / cfg.head_dim
        if include_residual:
            r = tokens_per_layer % cfg.residual_length if cfg.residual_length > 0 else 0
            n_compressed = tokens_per_layer - r
            total += (n_compressed * compressed + r * 1.0) / tokens_per_layer
        else:
            total += compressed
    return total / cfg.num_layers


class _Writer:
    def __init__(self) -> None:
        self.parts: list[bytes] = []

    def raw(self, data: bytes) -> None:
        self.parts.append(data)

    def pack(self, fmt: str, *values) -> None:
        self.parts.append(struct.pack("<" + fmt, *values))

    def array(self, arr: np.ndarray) -> None:
        self.parts.append(np.ascontiguousarray(arr).astype("<f4").tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated cache stream")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.raw(struct.calcsize(fmt)))

    def array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.raw(count * 4), dtype="<f4").astype(F32)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes after cache payload")


def _write_deviation(w: _Writer, dev: QuantizedDeviation) -> None:
    w.pack("BQII", dev.bits, dev.num_tokens, dev.num_heads, dev.group_size)
    w.pack("Q", len(dev.codes))
    w.raw(dev.codes)
    w.array(dev.scales)
    w.array(dev.mins)


def _read_deviation(r: _Reader) -> QuantizedDeviation:
    bits, num_tokens, num_heads, group_size = r.unpack("BQII")
    if bits not in ALLOWED_WIDTHS:
        raise FormatError(f"unsupported bit width {bits} in cache stream")
    (codes_len,) = r.unpack("Q")
    codes = r.raw(codes_len)
    num_groups = num_tokens * num_heads
    scales = r.array(num_groups)
    mins = r.array(num_groups)
    return QuantizedDeviation(
        bits=bits,
        num_tokens=num_tokens,
        num_heads=num_heads,
        group_size=group_size,
        codes=codes,
        scales=scales,
        mins=mins,
    )


def serialize_cache(layer: CompressedLayerCache) -> bytes:
    """Serialize one layer cache to the TADAKV1 byte format (bit-exact round trip)."""
    w = _Writer()
    w.raw(CACHE_MAGIC)
    w.pack(
        "IIBIQQ",
        layer.num_kv_heads,
        layer.head_dim,
        layer.bits,
        layer.residual_length,
        layer.compressed_tokens,
        layer.r,
    )
    w.array(layer.k_mean)
    w.array(layer.v_mean)
    _write_deviation(w, layer.k_dev)
    _write_deviation(w, layer.v_dev)
    w.array(layer.residual_k)
    w.array(layer.residual_v)
    return w.getvalue()


def deserialize_cache(data: bytes) -> CompressedLayerCache:
    """Parse a TADAKV1 stream; raises FormatError without any partial state."""
    r = _Reader(data)
    magic = r.raw(len(CACHE_MAGIC))
    if magic[:6] != CACHE_MAGIC[:6]:
        raise FormatError(f"bad cache magic {magic!r}")
    if magic != CACHE_MAGIC:
        raise FormatError(f"unsupported cache version {magic!r}")
    heads, head_dim, bits, residual_length, n_compressed, r_count = r.unpack("IIBIQQ")
    if bits not in ALLOWED_WIDTHS:
        raise FormatError(f"unsupported bit width {bits} in cache stream")
    k_mean = r.array(n_compressed * head_dim).reshape(n_compressed, head_dim)
    v_mean = r.array(n_compressed * head_dim).reshape(n_compressed, head_dim)
    k_dev = _read_deviation(r)
    v_dev = _read_deviation(r)
    residual_k = r.array(r_count * heads * head_dim).reshape(r_count, heads, head_dim)
    residual_v = r.array(r_count * heads * head_dim).reshape(r_count, heads, head_dim)
    r.done()

    for name, dev in (("key", k_dev), ("value", v_dev)):
        if (dev.bits, dev.num_tokens, dev.num_heads, dev.group_size) != (
            bits,
            n_compressed,
            heads,
            head_dim,
        ):
            raise FormatError(f"{name} deviation header disagrees with cache header")

    cache = CompressedLayerCache(heads, head_dim, bits, residual_length)
    cache.k_mean = k_mean
    cache.v_mean = v_mean
    cache.k_dev = k_dev
    cache.v_dev = v_dev
    cache.residual_k = residual_k
    cache.residual_v = residual_v
    return cache
