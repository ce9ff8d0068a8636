"""Command-line harness: generate, search, memory, ablate, selftest.

Every subcommand accepts ``--config <json>`` (schema keys: num_layers,
num_q_heads, num_kv_heads, head_dim, model_dim, vocab_size, rope_base,
residual_length, plan, max_seq_len).  Weights come from a TADAW1 container
via ``--model`` or are synthesized from ``--seed``.  Exit status: 0 success,
2 usage/config errors, 1 runtime errors (with one JSON error line on stderr).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from .analysis import ablate_frobenius, ablation_to_csv
from .attention import BlockSpec
from .cache import CompressedLayerCache, ModelConfig, PrecisionPlan, memory_ratio, serialize_cache, deserialize_cache
from .errors import ConfigError, DataError, TadaError
from .model import (
    DEFAULT_CONFIG,
    ToyModel,
    generate,
    load_weights,
    parse_config,
    random_model,
)
from .quant import dequantize_tensor, pack_codes, quantize_tensor, unpack_codes
from .search import (
    CalibrationSet,
    SearchConfig,
    random_search,
    report_to_csv,
    report_to_json,
    sensitivity_report,
)
from .tensor import apply_rope, matmul, softmax_rows, RopeParams

USAGE_EXIT = 2
FAILURE_EXIT = 1


def _load_config(path: str | None) -> dict:
    if path is None:
        return dict(DEFAULT_CONFIG)
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    return raw


def _parse_plan(spec: str, num_layers: int) -> PrecisionPlan:
    """Plan flag: ``uniform:<bits>`` or a path to a JSON array of per-layer bits."""
    if spec.startswith("uniform:"):
        try:
            bits = int(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad uniform plan spec {spec!r}") from None
        return PrecisionPlan.uniform(bits, num_layers)
    try:
        with open(spec) as f:
            data = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read plan file: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"plan file is not valid JSON: {exc}") from None
    if not isinstance(data, list):
        raise ConfigError("plan file must hold a JSON array of per-layer bit widths")
    plan = PrecisionPlan(tuple(int(b) for b in data))
    if len(plan) != num_layers:
        raise ConfigError(f"plan file covers {len(plan)} layers, config has {num_layers}")
    return plan


def _build_model(args, cfg: ModelConfig, vocab_size: int, model_dim: int, max_seq_len: int) -> ToyModel:
    if getattr(args, "model", None):
        weights = load_weights(args.model)
        return ToyModel(
            cfg=cfg,
            vocab_size=vocab_size,
            model_dim=model_dim,
            weights=weights,
            max_seq_len=max_seq_len,
        )
    return random_model(cfg, vocab_size, seed=args.seed, max_seq_len=max_seq_len)


def _load_calibration(args, vocab_size: int) -> CalibrationSet:
    if getattr(args, "calib", None):
        try:
            with open(args.calib) as f:
                return CalibrationSet.from_json(f.read())
        except OSError as exc:
            raise ConfigError(f"cannot read calibration file: {exc}") from None
    return CalibrationSet.synthetic(vocab_size, num_sequences=2, length=12, seed=args.seed)


def _cmd_memory(args) -> int:
    cfg, _, _, _ = parse_config(_load_config(args.config))
    if args.plan:
        cfg = replace(cfg, plan=_parse_plan(args.plan, cfg.num_layers))
    ratio = memory_ratio(cfg, tokens_per_layer=args.tokens, include_residual=args.include_residual)
    print(f"num_layers={cfg.num_layers} num_kv_heads={cfg.num_kv_heads} head_dim={cfg.head_dim}")
    print(f"plan={list(cfg.plan.bits_per_layer)}")
    print(f"mean_bits={cfg.plan.mean_bits!r}")
    print(f"tokens_per_layer={args.tokens} include_residual={args.include_residual}")
    print(f"memory_ratio={ratio!r}")
    return 0


def _cmd_generate(args) -> int:
    cfg, vocab_size, model_dim, max_seq_len = parse_config(_load_config(args.config))
    if args.plan:
        cfg = replace(cfg, plan=_parse_plan(args.plan, cfg.num_layers))
    if args.residual is not None:
        cfg = replace(cfg, residual_length=args.residual)
    model = _build_model(args, cfg, vocab_size, model_dim, max_seq_len)
    try:
        prompt = [int(t) for t in args.prompt_ids.split(",") if t.strip() != ""]
    except ValueError:
        raise DataError(f"prompt ids must be a comma-separated integer list, got {args.prompt_ids!r}") from None
    ids = generate(
        model,
        prompt,
        args.max_new,
        plan=cfg.plan,
        residual_length=cfg.residual_length,
        block=BlockSpec(args.block),
    )
    text = ",".join(str(t) for t in ids) + "\n"
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    return 0


def _cmd_search(args) -> int:
    cfg, vocab_size, model_dim, max_seq_len = parse_config(_load_config(args.config))
    model = _build_model(args, cfg, vocab_size, model_dim, max_seq_len)
    calib = _load_calibration(args, vocab_size)
    try:
        bit_choices = tuple(int(b) for b in args.bits.split(","))
    except ValueError:
        raise ConfigError(f"--bits must be a comma-separated width list, got {args.bits!r}") from None
    search = SearchConfig(
        num_candidates=args.candidates,
        bit_choices=bit_choices,
        memory_budget=args.budget,
        seed=args.seed,
        include_uniform_anchors=not args.no_anchors,
    )
    best_plan, report = random_search(search, calib, model, cfg=cfg)
    if args.out:
        with open(args.out, "w") as f:
            f.write(report_to_json(report))
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(report_to_csv(report))
    if args.plan_out:
        with open(args.plan_out, "w") as f:
            json.dump(list(best_plan.bits_per_layer), f)
            f.write("\n")
    best = report.best
    print(f"best_plan={list(best_plan.bits_per_layer)}")
    print(f"best_score={best.score!r}")
    print(f"best_memory_ratio={best.memory_ratio!r}")
    for row in sensitivity_report(report)[:5]:
        counts = row["counts"]
        print(
            f"candidate={row['candidate_index']} score={row['score']:.6f} "
            f"ratio={row['memory_ratio']:.6f} "
            f"bits4={counts[4]} bits2={counts[2]} bits8={counts[8]}"
        )
    return 0


def _cmd_ablate(args) -> int:
    cfg, vocab_size, model_dim, max_seq_len = parse_config(_load_config(args.config))
    model = _build_model(args, cfg, vocab_size, model_dim, max_seq_len)
    calib = _load_calibration(args, vocab_size)
    searched = _parse_plan(args.plan, cfg.num_layers) if args.plan else None
    records = ablate_frobenius(
        model,
        calib,
        searched_plan=searched,
        uniform_bits=args.bits,
        direct_bits=args.bits,
    )
    text = ablation_to_csv(records)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _selftest_checks() -> list[tuple[str, bool]]:
    rng = np.random.default_rng(12345)
    checks: list[tuple[str, bool]] = []

    a = rng.normal(size=(5, 7)).astype(np.float32)
    checks.append(("matmul_identity", bool(np.array_equal(matmul(a, np.eye(7, dtype=np.float32)), a))))

    sm = softmax_rows(rng.normal(size=(20, 9)).astype(np.float32))
    checks.append(("softmax_rows_sum_to_one", bool(np.allclose(sm.sum(axis=1), 1.0, atol=1e-6))))

    params = RopeParams(head_dim=8)
    x = rng.normal(size=(6, 8)).astype(np.float32)
    rot = apply_rope(x, np.arange(6), params)
    norms_ok = np.allclose(
        np.linalg.norm(rot, axis=1), np.linalg.norm(x, axis=1), rtol=1e-5
    )
    checks.append(("rotation_preserves_norms", bool(norms_ok)))

    dev = rng.normal(size=(40, 2, 16)).astype(np.float32)
    ok = True
    for bits in (2, 4, 8):
        q = quantize_tensor(dev, bits)
        err = np.abs(dev - dequantize_tensor(q))
        bound = q.scales.reshape(40, 2, 1) / 2 + 1e-6
        ok &= bool((err <= bound).all())
    checks.append(("quantizer_round_trip_bound", ok))

    codes = rng.integers(0, 4, size=(30, 13))
    checks.append(
        ("pack_unpack_bijective", bool(np.array_equal(unpack_codes(pack_codes(codes, 2), 2, 30, 13), codes)))
    )

    cfg = ModelConfig(
        num_layers=1,
        num_q_heads=4,
        num_kv_heads=2,
        head_dim=8,
        residual_length=3,
        rope=RopeParams(head_dim=8),
        plan=PrecisionPlan.uniform(4, 1),
    )
    cache = CompressedLayerCache.for_layer(cfg, 0)
    k = rng.normal(size=(10, 2, 8)).astype(np.float32)
    v = rng.normal(size=(10, 2, 8)).astype(np.float32)
    cache.append_tokens(k, v)
    checks.append(("token_conservation", cache.compressed_tokens + cache.r == 10))

    from .attention import attend_naive, attend_streaming

    q = rng.normal(size=(4, 8)).astype(np.float32)
    naive = attend_naive(q, cache, cfg).output
    ok = True
    for block in (1, 3, 64):
        stream = attend_streaming(q, cache, cfg, BlockSpec(block)).output
        ok &= bool(np.allclose(stream, naive, atol=1e-5))
    checks.append(("streaming_matches_naive", ok))

    blob = serialize_cache(cache)
    round_tripped = serialize_cache(deserialize_cache(blob))
    checks.append(("cache_serialization_round_trip", blob == round_tripped))

    wide_cfg = ModelConfig(
        num_layers=1,
        num_q_heads=32,
        num_kv_heads=32,
        head_dim=128,
        residual_length=0,
        rope=RopeParams(head_dim=128),
        plan=PrecisionPlan.uniform(4, 1),
    )
    checks.append(("memory_formula_value", memory_ratio(wide_cfg, 1) == 0.296875))
    return checks


def _cmd_selftest(_args) -> int:
    failures = 0
    for name, passed in _selftest_checks():
        print(f"{'PASS' if passed else 'FAIL'} {name}")
        failures += 0 if passed else 1
    return 0 if failures == 0 else FAILURE_EXIT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tadakv", description="Compressed KV-cache toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file (defaults to the built-in toy geometry)")
        p.add_argument("--seed", type=int, default=0, help="seed for synthesized weights/data")
        p.add_argument("--model", help="TADAW1 weight container (synthesized from --seed if absent)")

    p_gen = sub.add_parser("generate", help="greedy generation with the compressed cache")
    add_common(p_gen)
    p_gen.add_argument("--plan", help="uniform:<bits> or a JSON plan file")
    p_gen.add_argument("--residual", type=int, default=None, help="residual buffer length override")
    p_gen.add_argument("--max-new", type=int, default=16, dest="max_new")
    p_gen.add_argument("--block", type=int, default=64, help="streaming tile length")
    p_gen.add_argument("--prompt-ids", default="1,2,3", dest="prompt_ids", help="comma-separated token ids")
    p_gen.add_argument("--out", help="also write the generated ids to this file")
    p_gen.set_defaults(func=_cmd_generate)

    p_search = sub.add_parser("search", help="random per-layer precision search")
    add_common(p_search)
    p_search.add_argument("--candidates", type=int, default=64)
    p_search.add_argument("--bits", default="2,4,8", help="comma-separated width choices")
    p_search.add_argument("--budget", type=float, default=None, help="max allowed memory ratio")
    p_search.add_argument("--calib", help="JSON calibration file (list of token-id lists)")
    p_search.add_argument("--out", help="write the JSON report here")
    p_search.add_argument("--csv", help="write the CSV report here")
    p_search.add_argument("--plan-out", dest="plan_out", help="write the best plan as a JSON array")
    p_search.add_argument("--no-anchors", action="store_true", dest="no_anchors")
    p_search.set_defaults(func=_cmd_search)

    p_mem = sub.add_parser("memory", help="print the cache memory ratio for a config")
    add_common(p_mem)
    p_mem.add_argument("--plan", help="uniform:<bits> or a JSON plan file")
    p_mem.add_argument("--tokens", type=int, default=1024, help="tokens per layer")
    p_mem.add_argument("--include-residual", action="store_true", dest="include_residual")
    p_mem.set_defaults(func=_cmd_memory)

    p_abl = sub.add_parser("ablate", help="per-layer Frobenius reconstruction-error CSV")
    add_common(p_abl)
    p_abl.add_argument("--plan", help="searched plan to include (uniform:<bits> or JSON file)")
    p_abl.add_argument("--bits", type=int, default=4, help="width for the uniform and direct routes")
    p_abl.add_argument("--calib", help="JSON calibration file")
    p_abl.add_argument("--out", help="write CSV here instead of stdout")
    p_abl.set_defaults(func=_cmd_ablate)

    p_self = sub.add_parser("selftest", help="run the built-in invariant suite")
    add_common(p_self)
    p_self.set_defaults(func=_cmd_selftest)
    return parser


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        return USAGE_EXIT
    except TadaError as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        return FAILURE_EXIT
    except OSError as exc:
        print(json.dumps({"error": str(exc), "type": "OSError"}), file=sys.stderr)
        return FAILURE_EXIT


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
