"""Attention over the compressed cache.

Two decode paths compute the same thing:

* :func:`attend_naive` fully reconstructs K̂/V̂ per KV head and applies plain
  scaled-dot-product attention — the reference.
* :func:`attend_streaming` walks the token axis in tiles with the
  online-softmax recurrence (running max, normalizer, weighted sum),
  dequantizing each tile on the fly and reading residual tokens directly, so
  the full K̂/V̂ never exists in memory.

Plus :func:`prefill_attend`, causal multi-head attention on raw activations,
used to build the prompt cache state and as the accuracy oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cache import CompressedLayerCache, ModelConfig
from .errors import ConfigError, ShapeError, StateError
from .tensor import F32, as_f32, softmax_rows


@dataclass(frozen=True)
class BlockSpec:
    """Streaming tile length along the token axis."""

    block_tokens: int = 64

    def __post_init__(self) -> None:
        if self.block_tokens < 1:
            raise ConfigError(f"block_tokens must be >= 1, got {self.block_tokens}")


@dataclass
class AttentionOutput:
    """Per-query-head attention result, with optional per-head score rows."""

    output: np.ndarray
    scores: list[np.ndarray] | None = None


def kv_head_index(q_head: int, num_q_heads: int, num_kv_heads: int) -> int:
    """KV head serving a query head under grouped-query attention."""
    return q_head * num_kv_heads // num_q_heads


def _check_query(q: np.ndarray, layer: CompressedLayerCache, cfg: ModelConfig) -> np.ndarray:
    q = as_f32(q)
    if q.shape != (cfg.num_q_heads, cfg.head_dim):
        raise ShapeError(
            f"query must be ({cfg.num_q_heads}, {cfg.head_dim}), got {q.shape}"
        )
    if (layer.num_kv_heads, layer.head_dim) != (cfg.num_kv_heads, cfg.head_dim):
        raise ShapeError(
            f"cache geometry ({layer.num_kv_heads}, {layer.head_dim}) does not match "
            f"config ({cfg.num_kv_heads}, {cfg.head_dim})"
        )
    return q


def attend_naive(
    q: np.ndarray,
    layer: CompressedLayerCache,
    cfg: ModelConfig,
    return_scores: bool = False,
) -> AttentionOutput:
    """Single-position attention over the fully reconstructed cache.

    ``q`` must already carry the rotary rotation for the current position.
    """
    q = _check_query(q, layer, cfg)
    if layer.total_tokens == 0:
        raise StateError("cannot attend over an empty cache")
    inv_sqrt_d = F32(1.0 / math.sqrt(cfg.head_dim))
    group = cfg.num_q_heads // cfg.num_kv_heads
    out = np.empty((cfg.num_q_heads, cfg.head_dim), dtype=F32)
    scores: list[np.ndarray] | None = [] if return_scores else None
    for kv in range(cfg.num_kv_heads):
        k_hat, v_hat = layer.reconstruct(kv)
        for g in range(kv * group, (kv + 1) * group):
            logits = (k_hat @ q[g]) * inv_sqrt_d
            weights = softmax_rows(logits[None, :])[0]
            out[g] = weights @ v_hat
            if scores is not None:
                scores.append(weights)
    return AttentionOutput(output=out, scores=scores)


def _token_tiles(layer: CompressedLayerCache, block_tokens: int):
    """Yield (start, stop, is_residual) tiles; residual tokens form the final tiles."""
    n = layer.compressed_tokens
    for start in range(0, n, block_tokens):
        yield start, min(start + block_tokens, n), False
    for start in range(0, layer.r, block_tokens):
        yield start, min(start + block_tokens, layer.r), True


def attend_streaming(
    q: np.ndarray,
    layer: CompressedLayerCache,
    cfg: ModelConfig,
    block: BlockSpec = BlockSpec(),
    return_scores: bool = False,
) -> AttentionOutput:
    """Tiled attention with the online-softmax recurrence.

    Matches :func:`attend_naive` within 1e-5 element-wise for every tile
    length; only one tile of K̂/V̂ is materialized at a time.
    """
    q = _check_query(q, layer, cfg)
    if layer.total_tokens == 0:
        raise StateError("cannot attend over an empty cache")
    inv_sqrt_d = F32(1.0 / math.sqrt(cfg.head_dim))
    group = cfg.num_q_heads // cfg.num_kv_heads
    out = np.empty((cfg.num_q_heads, cfg.head_dim), dtype=F32)
    all_logits: list[list[np.ndarray]] | None = (
        [[] for _ in range(cfg.num_q_heads)] if return_scores else None
    )
    for kv in range(cfg.num_kv_heads):
        q_heads = range(kv * group, (kv + 1) * group)
        run_max = {g: F32(-np.inf) for g in q_heads}
        run_norm = {g: F32(0.0) for g in q_heads}
        run_acc = {g: np.zeros(cfg.head_dim, dtype=F32) for g in q_heads}
        for start, stop, is_residual in _token_tiles(layer, block.block_tokens):
            if is_residual:
                k_tile = layer.residual_k[start:stop, kv, :]
                v_tile = layer.residual_v[start:stop, kv, :]
            else:
                k_tile, v_tile = layer.reconstruct_slice(kv, start, stop)
            for g in q_heads:
                logits = (k_tile @ q[g]) * inv_sqrt_d
                if all_logits is not None:
                    all_logits[g].append(logits)
                tile_max = logits.max()
                new_max = np.maximum(run_max[g], tile_max)
                correction = np.exp(run_max[g] - new_max)
                probs = np.exp(logits - new_max)
                run_norm[g] = run_norm[g] * correction + probs.sum(dtype=F32)
                run_acc[g] = run_acc[g] * correction + probs @ v_tile
                run_max[g] = new_max
        for g in q_heads:
            out[g] = run_acc[g] / run_norm[g]
    scores = None
    if all_logits is not None:
        scores = [softmax_rows(np.concatenate(chunks)[None, :])[0] for chunks in all_logits]
    return AttentionOutput(output=out, scores=scores)


def prefill_attend(
    q_all: np.ndarray,
    k_all: np.ndarray,
    v_all: np.ndarray,
    cfg: ModelConfig,
) -> np.ndarray:
    """Causal multi-head attention on raw (uncompressed) activations.

    Args:
        q_all: (tokens, num_q_heads, head_dim), already rotated.
        k_all: (tokens, num_kv_heads, head_dim), already rotated.
        v_all: (tokens, num_kv_heads, head_dim).

    Returns:
        (tokens, num_q_heads, head_dim) attention outputs with each position
        attending to itself and everything before it.
    """
    q_all = as_f32(q_all)
    k_all = as_f32(k_all)
    v_all = as_f32(v_all)
    tokens = q_all.shape[0]
    if q_all.shape != (tokens, cfg.num_q_heads, cfg.head_dim):
        raise ShapeError(f"queries must be (tokens, {cfg.num_q_heads}, {cfg.head_dim}), got {q_all.shape}")
    if k_all.shape != (tokens, cfg.num_kv_heads, cfg.head_dim) or v_all.shape != k_all.shape:
        raise ShapeError(
            f"keys/values must be ({tokens}, {cfg.num_kv_heads}, {cfg.head_dim}), "
            f"got {k_all.shape} and {v_all.shape}"
        )
    inv_sqrt_d = F32(1.0 / math.sqrt(cfg.head_dim))
    causal_bias = np.triu(np.full((tokens, tokens), -np.inf, dtype=F32), k=1)
    out = np.empty_like(q_all)
    for g in range(cfg.num_q_heads):
        kv = kv_head_index(g, cfg.num_q_heads, cfg.num_kv_heads)
        logits = (q_all[:, g, :] @ k_all[:, kv, :].T) * inv_sqrt_d + causal_bias
        out[:, g, :] = softmax_rows(logits) @ v_all[:, kv, :]
    return out
