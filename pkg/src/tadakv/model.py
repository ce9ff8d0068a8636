"""Toy causal decoder wired to the compressed KV cache, plus weight container I/O.

The architecture is fixed so reference oracles are unambiguous: pre-norm
blocks of grouped-query attention followed by a two-layer feed-forward with
4x expansion, RMS norms, rotary positions, and an untied output head.  During
decode, key rotation and value projection are fused with the cache write
(:func:`append_fused`); the fusion is a dataflow optimization and produces a
cache bitwise equal to composing the primitives by hand.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import BlockSpec, attend_streaming, prefill_attend
from .cache import CompressedLayerCache, ModelConfig, PrecisionPlan
from .errors import CapacityError, ConfigError, DataError, FormatError, StateError
from .tensor import F32, RopeParams, as_f32, rotate_heads

WEIGHT_MAGIC = b"TADAW1"
WEIGHT_VERSION = 1

DEFAULT_CONFIG = {
    "num_layers": 4,
    "num_q_heads": 8,
    "num_kv_heads": 2,
    "head_dim": 16,
    "model_dim": 128,
    "vocab_size": 256,
    "rope_base": 10000.0,
    "residual_length": 8,
    "plan": [4, 4, 4, 4],
    "max_seq_len": 4096,
}


def expected_weight_shapes(cfg: ModelConfig, vocab_size: int) -> dict[str, tuple[int, ...]]:
    d_model = cfg.num_q_heads * cfg.head_dim
    d_ff = 4 * d_model
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (vocab_size, d_model)}
    for i in range(cfg.num_layers):
        shapes[f"layers.{i}.attn_norm"] = (d_model,)
        shapes[f"layers.{i}.wq"] = (d_model, cfg.num_q_heads * cfg.head_dim)
        shapes[f"layers.{i}.wk"] = (d_model, cfg.num_kv_heads * cfg.head_dim)
        shapes[f"layers.{i}.wv"] = (d_model, cfg.num_kv_heads * cfg.head_dim)
        shapes[f"layers.{i}.wo"] = (cfg.num_q_heads * cfg.head_dim, d_model)
        shapes[f"layers.{i}.ffn_norm"] = (d_model,)
        shapes[f"layers.{i}.w1"] = (d_model, d_ff)
        shapes[f"layers.{i}.w2"] = (d_ff, d_model)
    shapes["final_norm"] = (d_model,)
    shapes["lm_head"] = (d_model, vocab_size)
    return shapes


@dataclass
class ToyModel:
    """Decoder weights plus the cache geometry they were built for."""

    cfg: ModelConfig
    vocab_size: int
    model_dim: int
    weights: dict[str, np.ndarray] = field(repr=False)
    max_seq_len: int = 4096

    def __post_init__(self) -> None:
        if self.model_dim != self.cfg.num_q_heads * self.cfg.head_dim:
            raise ConfigError(
                f"model_dim {self.model_dim} != num_q_heads * head_dim "
                f"({self.cfg.num_q_heads} * {self.cfg.head_dim})"
            )
        if self.vocab_size <= 0 or self.max_seq_len <= 0:
            raise ConfigError("vocab_size and max_seq_len must be positive")
        shapes = expected_weight_shapes(self.cfg, self.vocab_size)
        missing = sorted(set(shapes) - set(self.weights))
        extra = sorted(set(self.weights) - set(shapes))
        if missing or extra:
            raise ConfigError(f"weight names mismatch: missing {missing}, unexpected {extra}")
        for name, shape in shapes.items():
            w = as_f32(self.weights[name])
            if w.shape != shape:
                raise ConfigError(f"weight {name} has shape {w.shape}, expected {shape}")
            self.weights[name] = w


def random_model(
    cfg: ModelConfig,
    vocab_size: int,
    *,
    seed: int,
    max_seq_len: int = 4096,
    identical_kv_heads: bool = False,
    outlier_channels: int = 0,
    outlier_scale: float = 8.0,
    outlier_jitter: float = 0.05,
) -> ToyModel:
    """Seeded Gaussian toy model.

    ``identical_kv_heads`` tiles one head block across all KV heads, making
    the cache losslessly compressible at any width.  ``outlier_channels``
    rewrites that many key/value channels per layer with a large-magnitude
    column shared (up to ``outlier_jitter``) by every head, so raw activations
    carry cross-head outliers while deviations stay small.
    """
    rng = np.random.default_rng(seed)
    d_model = cfg.num_q_heads * cfg.head_dim
    heads = cfg.num_kv_heads
    dim = cfg.head_dim

    def gauss(shape: tuple[int, ...], std: float) -> np.ndarray:
        return (rng.normal(size=shape) * std).astype(F32)

    proj_std = 1.0 / np.sqrt(d_model)
    weights: dict[str, np.ndarray] = {"tok_emb": gauss((vocab_size, d_model), 1.0)}
    for i in range(cfg.num_layers):
        weights[f"layers.{i}.attn_norm"] = np.ones(d_model, dtype=F32)
        weights[f"layers.{i}.wq"] = gauss((d_model, cfg.num_q_heads * dim), proj_std)
        if identical_kv_heads:
            block_k = gauss((d_model, dim), proj_std)
            block_v = gauss((d_model, dim), proj_std)
            wk = np.tile(block_k, (1, heads))
            wv = np.tile(block_v, (1, heads))
        else:
            wk = gauss((d_model, heads * dim), proj_std)
            wv = gauss((d_model, heads * dim), proj_std)
        if outlier_channels > 0:
            channels = rng.choice(dim, size=min(outlier_channels, dim), replace=False)
            for w in (wk, wv):
                for j in channels:
                    shared = rng.normal(size=d_model) * (outlier_scale * proj_std)
                    for h in range(heads):
                        jitter = rng.normal(size=d_model) * (outlier_jitter * proj_std)
                        w[:, h * dim + j] = (shared + jitter).astype(F32)
        weights[f"layers.{i}.wk"] = wk
        weights[f"layers.{i}.wv"] = wv
        weights[f"layers.{i}.wo"] = gauss((cfg.num_q_heads * dim, d_model), proj_std)
        weights[f"layers.{i}.ffn_norm"] = np.ones(d_model, dtype=F32)
        weights[f"layers.{i}.w1"] = gauss((d_model, 4 * d_model), proj_std)
        weights[f"layers.{i}.w2"] = gauss((4 * d_model, d_model), 1.0 / np.sqrt(4 * d_model))
    weights["final_norm"] = np.ones(d_model, dtype=F32)
    weights["lm_head"] = gauss((d_model, vocab_size), proj_std)
    return ToyModel(
        cfg=cfg,
        vocab_size=vocab_size,
        model_dim=d_model,
        weights=weights,
        max_seq_len=max_seq_len,
    )


def _rmsnorm(x: np.ndarray, weight: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return x / np.sqrt(ms + F32(eps)) * weight


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (F32(1.0) + np.exp(-x))


def new_caches(cfg: ModelConfig) -> list[CompressedLayerCache]:
    return [CompressedLayerCache.for_layer(cfg, i) for i in range(cfg.num_layers)]


def append_fused(
    cache: CompressedLayerCache,
    k_pre_rope: np.ndarray,
    x_norm: np.ndarray,
    w_v: np.ndarray,
    positions,
    rope: RopeParams,
) -> None:
    """Rotate keys, project values, and write both into the cache in one step.

    The rotated keys and the value projection exist only inside this call;
    composing rotate_heads / matmul / append_tokens by hand must yield a
    bitwise identical cache.
    """
    k_rot = rotate_heads(k_pre_rope, positions, rope)
    v = (x_norm @ w_v).reshape(k_pre_rope.shape[0], cache.num_kv_heads, cache.head_dim)
    cache.append_tokens(k_rot, v)


def _check_token_ids(ids, vocab_size: int) -> list[int]:
    out = []
    for t in ids:
        t = int(t)
        if not 0 <= t < vocab_size:
            raise DataError(f"token id {t} outside vocabulary of size {vocab_size}")
        out.append(t)
    return out


def _forward_full(
    model: ToyModel,
    token_ids: list[int],
    caches: list[CompressedLayerCache] | None,
    cfg: ModelConfig,
    capture_kv: list[tuple[np.ndarray, np.ndarray]] | None = None,
) -> np.ndarray:
    """Full-sequence causal forward on raw activations; optionally fills caches.

    Attention here never touches the compressed representation, which makes
    this the uncompressed oracle path.  ``capture_kv`` collects the raw
    (rotated K, V) pair of every layer for the analysis suite.
    """
    w = model.weights
    n = len(token_ids)
    positions = np.arange(n)
    x = w["tok_emb"][np.asarray(token_ids)]
    for i in range(cfg.num_layers):
        h = _rmsnorm(x, w[f"layers.{i}.attn_norm"])
        q = (h @ w[f"layers.{i}.wq"]).reshape(n, cfg.num_q_heads, cfg.head_dim)
        k = (h @ w[f"layers.{i}.wk"]).reshape(n, cfg.num_kv_heads, cfg.head_dim)
        v = (h @ w[f"layers.{i}.wv"]).reshape(n, cfg.num_kv_heads, cfg.head_dim)
        q_rot = rotate_heads(q, positions, cfg.rope)
        k_rot = rotate_heads(k, positions, cfg.rope)
        if caches is not None:
            caches[i].append_tokens(k_rot, v)
        if capture_kv is not None:
            capture_kv.append((k_rot, v))
        attn = prefill_attend(q_rot, k_rot, v, cfg)
        x = x + attn.reshape(n, -1) @ w[f"layers.{i}.wo"]
        h2 = _rmsnorm(x, w[f"layers.{i}.ffn_norm"])
        x = x + _silu(h2 @ w[f"layers.{i}.w1"]) @ w[f"layers.{i}.w2"]
    return _rmsnorm(x, w["final_norm"]) @ w["lm_head"]


def forward_capture_kv(model: ToyModel, token_ids) -> list[tuple[np.ndarray, np.ndarray]]:
    """Raw post-rotation K and raw V per layer for one uncompressed forward."""
    ids = _check_token_ids(token_ids, model.vocab_size)
    if not ids:
        raise DataError("prompt must be non-empty")
    captured: list[tuple[np.ndarray, np.ndarray]] = []
    _forward_full(model, ids, None, model.cfg, capture_kv=captured)
    return captured


def prefill_forward(
    model: ToyModel,
    token_ids,
    caches: list[CompressedLayerCache],
    cfg: ModelConfig | None = None,
) -> np.ndarray:
    """Run the prompt through the model, filling the caches; returns all logits."""
    cfg = cfg or model.cfg
    ids = _check_token_ids(token_ids, model.vocab_size)
    if not ids:
        raise DataError("prompt must be non-empty")
    if len(ids) > model.max_seq_len:
        raise CapacityError(f"prompt of {len(ids)} tokens exceeds max_seq_len {model.max_seq_len}")
    return _forward_full(model, ids, caches, cfg)


def reference_forward(model: ToyModel, token_ids) -> np.ndarray:
    """Uncompressed-cache oracle: full causal forward, logits for every position."""
    ids = _check_token_ids(token_ids, model.vocab_size)
    if not ids:
        raise DataError("prompt must be non-empty")
    return _forward_full(model, ids, None, model.cfg)


def decode_step(
    model: ToyModel,
    caches: list[CompressedLayerCache],
    token_id: int,
    position: int,
    cfg: ModelConfig | None = None,
    block: BlockSpec = BlockSpec(),
) -> np.ndarray:
    """One autoregressive step: append the token's KV and return next-token logits.

    Per layer: project Q and K, rotate Q, then rotate-and-compress K while
    projecting-and-compressing V in one fused cache write, and attend over
    the updated cache with the streaming kernel.  ``position`` must equal the
    number of tokens already cached.
    """
    cfg = cfg or model.cfg
    (token_id,) = _check_token_ids([token_id], model.vocab_size)
    for i, cache in enumerate(caches):
        if cache.total_tokens != position:
            raise StateError(
                f"layer {i} cache holds {cache.total_tokens} tokens but position is {position}"
            )
    if position >= model.max_seq_len:
        raise CapacityError(f"position {position} exceeds max_seq_len {model.max_seq_len}")

    w = model.weights
    pos = np.array([position])
    x = w["tok_emb"][token_id][None, :]
    for i in range(cfg.num_layers):
        h = _rmsnorm(x, w[f"layers.{i}.attn_norm"])
        q = (h @ w[f"layers.{i}.wq"]).reshape(1, cfg.num_q_heads, cfg.head_dim)
        q_rot = rotate_heads(q, pos, cfg.rope)[0]
        k = (h @ w[f"layers.{i}.wk"]).reshape(1, cfg.num_kv_heads, cfg.head_dim)
        append_fused(caches[i], k, h, w[f"layers.{i}.wv"], pos, cfg.rope)
        attn = attend_streaming(q_rot, caches[i], cfg, block).output
        x = x + attn.reshape(1, -1) @ w[f"layers.{i}.wo"]
        h2 = _rmsnorm(x, w[f"layers.{i}.ffn_norm"])
        x = x + _silu(h2 @ w[f"layers.{i}.w1"]) @ w[f"layers.{i}.w2"]
    return (_rmsnorm(x, w["final_norm"]) @ w["lm_head"])[0]


def generate(
    model: ToyModel,
    prompt_ids,
    max_new_tokens: int,
    *,
    plan: PrecisionPlan | None = None,
    residual_length: int | None = None,
    block: BlockSpec = BlockSpec(),
) -> list[int]:
    """Greedy generation with the compressed cache; deterministic for fixed inputs."""
    ids = _check_token_ids(prompt_ids, model.vocab_size)
    if not ids:
        raise DataError("prompt must be non-empty")
    if max_new_tokens < 0:
        raise ConfigError(f"max_new_tokens must be non-negative, got {max_new_tokens}")
    cfg = model.cfg
    if plan is not None:
        cfg = replace(cfg, plan=plan)
    if residual_length is not None:
        cfg = replace(cfg, residual_length=residual_length)
    if len(ids) + max_new_tokens > model.max_seq_len:
        raise CapacityError(
            f"{len(ids)} prompt + {max_new_tokens} new tokens exceeds "
            f"max_seq_len {model.max_seq_len}"
        )
    caches = new_caches(cfg)
    logits = prefill_forward(model, ids, caches, cfg)[-1]
    out = list(ids)
    produced = 0
    while produced < max_new_tokens:
        nxt = int(np.argmax(logits))
        out.append(nxt)
        produced += 1
        if produced < max_new_tokens:
            logits = decode_step(model, caches, nxt, len(out) - 1, cfg=cfg, block=block)
    return out


def reference_generate(model: ToyModel, prompt_ids, max_new_tokens: int) -> list[int]:
    """Greedy generation recomputing the full uncompressed forward each step."""
    out = _check_token_ids(prompt_ids, model.vocab_size)
    for _ in range(max_new_tokens):
        logits = reference_forward(model, out)[-1]
        out.append(int(np.argmax(logits)))
    return out


def weights_to_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    """Serialize named float32 tensors to the TADAW1 container format."""
    names = sorted(tensors)
    manifest: dict[str, dict] = {}
    payload_parts: list[bytes] = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        blob = arr.tobytes()
        manifest[name] = {"shape": list(arr.shape), "offset": offset}
        payload_parts.append(blob)
        offset += len(blob)
    manifest_json = json.dumps({"tensors": manifest}, sort_keys=True, separators=(",", ":")).encode()
    header = WEIGHT_MAGIC + struct.pack("<HI", WEIGHT_VERSION, len(manifest_json))
    return header + manifest_json + b"".join(payload_parts)


def weights_from_bytes(data: bytes) -> dict[str, np.ndarray]:
    """Parse a TADAW1 container; rejects truncation, overlap, and bad headers."""
    head_len = len(WEIGHT_MAGIC) + struct.calcsize("<HI")
    if len(data) < head_len:
        raise FormatError("truncated weight container header")
    if data[: len(WEIGHT_MAGIC)] != WEIGHT_MAGIC:
        raise FormatError(f"bad weight magic {data[:len(WEIGHT_MAGIC)]!r}")
    version, manifest_len = struct.unpack_from("<HI", data, len(WEIGHT_MAGIC))
    if version != WEIGHT_VERSION:
        raise FormatError(f"unsupported weight container version {version}")
    if len(data) < head_len + manifest_len:
        raise FormatError("truncated weight container manifest")
    try:
        manifest = json.loads(data[head_len : head_len + manifest_len].decode())
        entries = manifest["tensors"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"unreadable weight manifest: {exc}") from None
    payload = data[head_len + manifest_len :]

    ordered = sorted(entries.items(), key=lambda kv: kv[1]["offset"])
    expected_offset = 0
    tensors: dict[str, np.ndarray] = {}
    for name, entry in ordered:
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset"])
        size = int(np.prod(shape)) * 4 if shape else 4
        if offset != expected_offset:
            raise FormatError(f"tensor {name} at offset {offset}, expected {expected_offset}")
        if offset + size > len(payload):
            raise FormatError(f"tensor {name} runs past the payload end")
        tensors[name] = (
            np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)), offset=offset)
            .reshape(shape)
            .astype(F32)
        )
        expected_offset = offset + size
    if expected_offset != len(payload):
        raise FormatError(
            f"payload has {len(payload)} bytes but manifest accounts for {expected_offset}"
        )
    return tensors


def save_weights(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(weights_to_bytes(tensors))


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return weights_from_bytes(f.read())


def parse_config(raw: dict) -> tuple[ModelConfig, int, int, int]:
    """Turn a config dict (JSON schema) into (ModelConfig, vocab_size, model_dim, max_seq_len).

    Missing keys fall back to DEFAULT_CONFIG; unknown keys are rejected.
    """
    unknown = sorted(set(raw) - set(DEFAULT_CONFIG))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    merged = {**DEFAULT_CONFIG, **raw}
    plan_spec = merged["plan"]
    if not isinstance(plan_spec, (list, tuple)):
        raise ConfigError(f"config plan must be a list of per-layer bit widths, got {plan_spec!r}")
    try:
        num_layers = int(merged["num_layers"])
        plan = PrecisionPlan(tuple(int(b) for b in plan_spec))
        if len(plan) == 1 and num_layers > 1:
            plan = PrecisionPlan.uniform(plan[0], num_layers)
        cfg = ModelConfig(
            num_layers=num_layers,
            num_q_heads=int(merged["num_q_heads"]),
            num_kv_heads=int(merged["num_kv_heads"]),
            head_dim=int(merged["head_dim"]),
            residual_length=int(merged["residual_length"]),
            rope=RopeParams(head_dim=int(merged["head_dim"]), base=float(merged["rope_base"])),
            plan=plan,
        )
        vocab_size = int(merged["vocab_size"])
        model_dim = int(merged["model_dim"])
        max_seq_len = int(merged["max_seq_len"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if model_dim != cfg.num_q_heads * cfg.head_dim:
        raise ConfigError(
            f"model_dim {model_dim} != num_q_heads * head_dim ({cfg.num_q_heads} * {cfg.head_dim})"
        )
    return cfg, vocab_size, model_dim, max_seq_len
