import numpy as np
import pytest

from tadakv.attention import BlockSpec
from tadakv.cache import CompressedLayerCache, PrecisionPlan, serialize_cache
from tadakv.errors import CapacityError, ConfigError, DataError, FormatError, StateError
from tadakv.model import (
    ToyModel,
    append_fused,
    decode_step,
    expected_weight_shapes,
    generate,
    load_weights,
    new_caches,
    parse_config,
    prefill_forward,
    random_model,
    reference_forward,
    reference_generate,
    save_weights,
    weights_from_bytes,
    weights_to_bytes,
)
from tadakv.tensor import rotate_heads

from util import make_cfg


def small_model(seed=0, bits=4, residual_length=4, **kwargs):
    cfg = make_cfg(
        num_layers=2,
        num_q_heads=4,
        num_kv_heads=2,
        head_dim=16,
        residual_length=residual_length,
        plan=PrecisionPlan.uniform(bits, 2),
    )
    return random_model(cfg, vocab_size=64, seed=seed, **kwargs)


class TestFusedWrite:
    @pytest.mark.parametrize("seed", range(10))
    def test_fused_equals_unfused_bitwise(self, seed):
        cfg = make_cfg(residual_length=3)
        rng = np.random.default_rng(seed)
        tokens = int(rng.integers(1, 9))
        d_model = 32
        k_pre = rng.normal(size=(tokens, 2, 16)).astype(np.float32)
        x_norm = rng.normal(size=(tokens, d_model)).astype(np.float32)
        w_v = rng.normal(size=(d_model, 2 * 16)).astype(np.float32)
        positions = np.arange(5, 5 + tokens)

        fused = CompressedLayerCache.for_layer(cfg, 0)
        append_fused(fused, k_pre, x_norm, w_v, positions, cfg.rope)

        manual = CompressedLayerCache.for_layer(cfg, 0)
        k_rot = rotate_heads(k_pre, positions, cfg.rope)
        v = (x_norm @ w_v).reshape(tokens, 2, 16)
        manual.append_tokens(k_rot, v)

        assert serialize_cache(fused) == serialize_cache(manual)


class TestDecodeStep:
    def test_position_mismatch_rejected(self):
        model = small_model()
        caches = new_caches(model.cfg)
        with pytest.raises(StateError):
            decode_step(model, caches, 1, position=3)

    def test_bad_token_rejected(self):
        model = small_model()
        caches = new_caches(model.cfg)
        with pytest.raises(DataError):
            decode_step(model, caches, 400, position=0)

    def test_capacity_guard(self):
        model = small_model()
        model.max_seq_len = 2
        caches = new_caches(model.cfg)
        decode_step(model, caches, 1, position=0)
        decode_step(model, caches, 2, position=1)
        with pytest.raises(CapacityError):
            decode_step(model, caches, 3, position=2)

    def test_single_layer_single_head_matches_prefill(self):
        cfg = make_cfg(
            num_layers=1,
            num_q_heads=1,
            num_kv_heads=1,
            head_dim=16,
            residual_length=4,
            plan=PrecisionPlan.uniform(4, 1),
        )
        model = random_model(cfg, vocab_size=32, seed=3)
        prefill_logits = prefill_forward(model, [7], new_caches(cfg))
        decode_logits = decode_step(model, new_caches(cfg), 7, position=0)
        assert np.abs(prefill_logits[0] - decode_logits).max() < 1e-5

    def test_prefill_decode_consistency_at_passthrough(self):
        model = small_model(bits=16, residual_length=4)
        ids = [3, 14, 15, 9, 2, 6, 5, 31]
        prefill_logits = prefill_forward(model, ids, new_caches(model.cfg))
        caches = new_caches(model.cfg)
        for pos, token in enumerate(ids):
            step_logits = decode_step(model, caches, token, pos)
            assert np.abs(prefill_logits[pos] - step_logits).max() < 1e-5


class TestGenerate:
    def test_zero_new_tokens_returns_prompt(self):
        model = small_model()
        assert generate(model, [5, 6, 7], 0) == [5, 6, 7]

    def test_empty_prompt_rejected(self):
        with pytest.raises(DataError):
            generate(small_model(), [], 4)

    def test_capacity_error(self):
        model = small_model()
        model.max_seq_len = 8
        with pytest.raises(CapacityError):
            generate(model, [1, 2, 3, 4, 5], 4)

    def test_deterministic_across_runs_and_blocks(self):
        model = small_model(seed=11)
        first = generate(model, [1, 2, 3], 24)
        again = generate(model, [1, 2, 3], 24)
        assert first == again
        for block in (1, 2, 5, 64):
            assert generate(model, [1, 2, 3], 24, block=BlockSpec(block)) == first

    def test_passthrough_matches_reference_decoder(self):
        model = small_model(seed=7, bits=16, residual_length=4)
        prompt = [9, 4, 33]
        assert generate(model, prompt, 64) == reference_generate(model, prompt, 64)

    def test_all_residual_matches_passthrough_and_reference(self):
        model = small_model(seed=5, bits=2)
        prompt = [2, 8, 11]
        big_r = generate(model, prompt, 40, residual_length=256)
        reference = reference_generate(model, prompt, 40)
        passthrough = generate(
            model, prompt, 40, plan=PrecisionPlan.uniform(16, 2), residual_length=256
        )
        assert big_r == reference
        assert big_r == passthrough

    def test_identical_kv_heads_lossless_at_any_plan(self):
        model = small_model(seed=13, identical_kv_heads=True)
        prompt = [1, 30, 12]
        reference = reference_generate(model, prompt, 32)
        for bits in (2, 4, 8, 16):
            out = generate(model, prompt, 32, plan=PrecisionPlan.uniform(bits, 2))
            assert out == reference


class TestReferenceForward:
    def test_logits_shape(self):
        model = small_model()
        logits = reference_forward(model, [1, 2, 3])
        assert logits.shape == (3, 64)

    def test_prefill_matches_reference(self):
        # the prompt pass runs on raw activations regardless of the plan
        model = small_model(bits=2, residual_length=2)
        ids = [4, 9, 16, 25, 36]
        ref = reference_forward(model, ids)
        pre = prefill_forward(model, ids, new_caches(model.cfg))
        assert np.array_equal(ref, pre)


class TestWeightContainer:
    def test_round_trip_bitwise(self):
        model = small_model(seed=21)
        blob = weights_to_bytes(model.weights)
        restored = weights_from_bytes(blob)
        assert set(restored) == set(model.weights)
        for name, arr in model.weights.items():
            assert np.array_equal(restored[name], arr)
        assert weights_to_bytes(restored) == blob

    def test_file_round_trip(self, tmp_path):
        model = small_model(seed=22)
        path = tmp_path / "weights.tadaw"
        save_weights(path, model.weights)
        restored = load_weights(path)
        rebuilt = ToyModel(
            cfg=model.cfg,
            vocab_size=model.vocab_size,
            model_dim=model.model_dim,
            weights=restored,
            max_seq_len=model.max_seq_len,
        )
        assert generate(rebuilt, [1, 2], 8) == generate(model, [1, 2], 8)

    def test_truncation_rejected(self):
        blob = weights_to_bytes(small_model().weights)
        for cut in (0, 3, 7, len(blob) // 2, len(blob) - 1):
            with pytest.raises(FormatError):
                weights_from_bytes(blob[:cut])

    def test_bad_magic_rejected(self):
        blob = weights_to_bytes(small_model().weights)
        with pytest.raises(FormatError):
            weights_from_bytes(b"XXXXXX" + blob[6:])

    def test_overlapping_offsets_rejected(self):
        import json
        import struct

        tensors = {"a": np.zeros((2, 2), dtype=np.float32), "b": np.ones((2, 2), dtype=np.float32)}
        manifest = {"tensors": {"a": {"shape": [2, 2], "offset": 0}, "b": {"shape": [2, 2], "offset": 8}}}
        mjson = json.dumps(manifest).encode()
        payload = tensors["a"].tobytes() + tensors["b"].tobytes()
        blob = b"TADAW1" + struct.pack("<HI", 1, len(mjson)) + mjson + payload
        with pytest.raises(FormatError):
            weights_from_bytes(blob)


class TestModelValidation:
    def test_weight_shape_mismatch_rejected(self):
        model = small_model()
        weights = dict(model.weights)
        weights["lm_head"] = np.zeros((3, 3), dtype=np.float32)
        with pytest.raises(ConfigError):
            ToyModel(
                cfg=model.cfg,
                vocab_size=model.vocab_size,
                model_dim=model.model_dim,
                weights=weights,
            )

    def test_missing_weight_rejected(self):
        model = small_model()
        weights = dict(model.weights)
        del weights["final_norm"]
        with pytest.raises(ConfigError):
            ToyModel(
                cfg=model.cfg,
                vocab_size=model.vocab_size,
                model_dim=model.model_dim,
                weights=weights,
            )

    def test_expected_shapes_cover_random_model(self):
        model = small_model()
        shapes = expected_weight_shapes(model.cfg, model.vocab_size)
        assert set(shapes) == set(model.weights)


class TestParseConfig:
    def test_defaults(self):
        cfg, vocab, model_dim, max_seq_len = parse_config({})
        assert cfg.num_layers == 4
        assert cfg.num_q_heads == 8
        assert cfg.num_kv_heads == 2
        assert cfg.head_dim == 16
        assert vocab == 256
        assert model_dim == 128
        assert max_seq_len == 4096
        assert cfg.plan.bits_per_layer == (4, 4, 4, 4)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_config({"heads": 4})

    def test_model_dim_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            parse_config({"model_dim": 64})

    def test_single_entry_plan_broadcasts(self):
        cfg, _, _, _ = parse_config({"plan": [2]})
        assert cfg.plan.bits_per_layer == (2, 2, 2, 2)

    def test_bad_plan_type_rejected(self):
        with pytest.raises(ConfigError):
            parse_config({"plan": "uniform"})
