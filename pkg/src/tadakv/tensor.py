"""Dense float32 primitives: matmul, stable row softmax, rotary embedding.

All operations work on C-contiguous ``numpy.float32`` arrays and are pure
functions; callers may share inputs across threads freely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError

F32 = np.float32


def as_f32(x) -> np.ndarray:
    """Coerce to a C-contiguous float32 array."""
    return np.ascontiguousarray(x, dtype=F32)


def require_finite(x: np.ndarray, what: str = "input") -> None:
    if not np.isfinite(x).all():
        raise DataError(f"{what} contains non-finite values")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard float32 matrix product of two 2-D tensors."""
    a = as_f32(a)
    b = as_f32(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for overflow safety."""
    a = as_f32(a)
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got {a.ndim}-D")
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class RopeParams:
    """Rotary embedding geometry: even head dimension and frequency base."""

    head_dim: int
    base: float = 10000.0

    def __post_init__(self) -> None:
        if self.head_dim <= 0 or self.head_dim % 2 != 0:
            raise ConfigError(f"rotary head_dim must be a positive even integer, got {self.head_dim}")
        if self.base <= 0:
            raise ConfigError(f"rotary base must be positive, got {self.base}")


def apply_rope(x: np.ndarray, positions, params: RopeParams) -> np.ndarray:
    """Rotate each adjacent (2j, 2j+1) pair of ``x`` by position * base^(-2j/head_dim).

    Args:
        x: (tokens, head_dim) tensor.
        positions: one non-negative integer position per row.
        params: rotation geometry; ``params.head_dim`` must match ``x``.

    Returns:
        Rotated tensor of the same shape; row L2 norms are preserved.
    """
    x = as_f32(x)
    if x.ndim != 2 or x.shape[1] != params.head_dim:
        raise ShapeError(f"expected (tokens, {params.head_dim}) input, got {x.shape}")
    pos = np.asarray(positions)
    if pos.ndim != 1 or pos.shape[0] != x.shape[0]:
        raise ShapeError(f"need one position per token row, got {pos.shape} for {x.shape[0]} rows")
    if not np.issubdtype(pos.dtype, np.integer) or (pos < 0).any():
        raise DataError("positions must be non-negative integers")

    half = params.head_dim // 2
    inv_freq = params.base ** (-2.0 * np.arange(half, dtype=np.float64) / params.head_dim)
    angles = pos[:, None].astype(np.float64) * inv_freq[None, :]
    cos = np.cos(angles).astype(F32)
    sin = np.sin(angles).astype(F32)

    even = x[:, 0::2]
    odd = x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


def rotate_heads(x: np.ndarray, positions, params: RopeParams) -> np.ndarray:
    """Apply :func:`apply_rope` to every head of a (tokens, heads, head_dim) tensor."""
    x = as_f32(x)
    if x.ndim != 3 or x.shape[2] != params.head_dim:
        raise ShapeError(f"expected (tokens, heads, {params.head_dim}) input, got {x.shape}")
    out = np.empty_like(x)
    for h in range(x.shape[1]):
        out[:, h, :] = apply_rope(x[:, h, :], positions, params)
    return out
