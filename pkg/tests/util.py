"""Shared test helpers: independent oracles and fixture builders.

The oracles here deliberately use plain float64 loops instead of the library
paths they check.
"""

import math

import numpy as np

from tadakv.cache import CompressedLayerCache, ModelConfig, PrecisionPlan
from tadakv.tensor import RopeParams


def make_cfg(
    num_layers=1,
    num_q_heads=4,
    num_kv_heads=2,
    head_dim=16,
    residual_length=4,
    bits=4,
    plan=None,
    rope_base=10000.0,
):
    if plan is None:
        plan = PrecisionPlan.uniform(bits, num_layers)
    return ModelConfig(
        num_layers=num_layers,
        num_q_heads=num_q_heads,
        num_kv_heads=num_kv_heads,
        head_dim=head_dim,
        residual_length=residual_length,
        rope=RopeParams(head_dim=head_dim, base=rope_base),
        plan=plan,
    )


def build_cache(rng, cfg, tokens, layer_idx=0):
    """Random single-layer cache plus the raw K/V it was fed."""
    k = rng.normal(size=(tokens, cfg.num_kv_heads, cfg.head_dim)).astype(np.float32)
    v = rng.normal(size=(tokens, cfg.num_kv_heads, cfg.head_dim)).astype(np.float32)
    cache = CompressedLayerCache.for_layer(cfg, layer_idx)
    cache.append_tokens(k, v)
    return cache, k, v


def oracle_attention(q, k_raw, v_raw, num_q_heads, num_kv_heads):
    """Loop-based scaled-dot-product attention over raw per-head K/V (float64)."""
    tokens, _, head_dim = k_raw.shape
    out = np.zeros((num_q_heads, head_dim), dtype=np.float64)
    for g in range(num_q_heads):
        kv = g * num_kv_heads // num_q_heads
        scores = np.empty(tokens, dtype=np.float64)
        for t in range(tokens):
            scores[t] = float(
                np.dot(q[g].astype(np.float64), k_raw[t, kv].astype(np.float64))
            ) / math.sqrt(head_dim)
        scores -= scores.max()
        weights = np.exp(scores)
        weights /= weights.sum()
        for t in range(tokens):
            out[g] += weights[t] * v_raw[t, kv].astype(np.float64)
    return out
