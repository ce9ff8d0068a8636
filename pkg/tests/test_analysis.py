import numpy as np
import pytest

from tadakv.analysis import (
    AblationRecord,
    ablate_frobenius,
    ablation_rows_from_csv,
    ablation_to_csv,
    centered_reconstruction,
    shared_outlier_activations,
)
from tadakv.cache import PrecisionPlan, memory_ratio
from tadakv.errors import ConfigError
from tadakv.model import random_model
from tadakv.quant import direct_quantize_baseline
from tadakv.search import CalibrationSet, SearchConfig, random_search

from test_search import greedy_calibration
from util import make_cfg


def outlier_model(seed, num_layers=4, jitter=0.05):
    cfg = make_cfg(
        num_layers=num_layers,
        num_q_heads=4,
        num_kv_heads=2,
        head_dim=16,
        residual_length=0,
        plan=PrecisionPlan.uniform(4, num_layers),
    )
    return random_model(
        cfg,
        vocab_size=64,
        seed=seed,
        outlier_channels=2,
        outlier_scale=8.0,
        outlier_jitter=jitter,
    )


class TestSharedOutlierActivations:
    def test_deviations_are_outlier_free(self):
        rng = np.random.default_rng(0)
        x = shared_outlier_activations(rng, tokens=32, heads=4, head_dim=16)
        raw_range = x.max(axis=(1, 2)) - x.min(axis=(1, 2))
        dev = x.mean(axis=1, keepdims=True) - x
        dev_range = dev.max(axis=(1, 2)) - dev.min(axis=(1, 2))
        # the shared outlier channels cancel in the deviations
        assert (dev_range < raw_range / 4).all()

    def test_shapes_and_dtype(self):
        rng = np.random.default_rng(1)
        x = shared_outlier_activations(rng, tokens=5, heads=3, head_dim=8)
        assert x.shape == (5, 3, 8)
        assert x.dtype == np.float32


class TestCenteredVsDirect:
    def test_centered_pipeline_wins_on_outlier_layers(self):
        wins = total = 0
        for seed in range(30):
            model = outlier_model(seed)
            calib = CalibrationSet.synthetic(64, num_sequences=1, length=16, seed=seed + 300)
            records = ablate_frobenius(model, calib, uniform_bits=4, direct_bits=4)
            by = {(r.method, r.layer_idx): r for r in records}
            for layer in range(model.cfg.num_layers):
                tada = by[("tada-uniform", layer)]
                direct = by[("direct", layer)]
                wins += tada.frobenius_k < direct.frobenius_k
                wins += tada.frobenius_v < direct.frobenius_v
                total += 2
        assert wins / total >= 0.9


class TestAblateFrobenius:
    def test_passthrough_norms_are_negligible(self):
        model = outlier_model(3)
        calib = CalibrationSet.synthetic(64, num_sequences=1, length=12, seed=7)
        records = ablate_frobenius(model, calib, uniform_bits=16, direct_bits=16)
        for rec in records:
            assert rec.frobenius_k < 1e-3
            assert rec.frobenius_v < 1e-3

    def test_method_rows_and_bits(self):
        model = outlier_model(4, num_layers=3)
        calib = CalibrationSet.synthetic(64, num_sequences=1, length=8, seed=8)
        plan = PrecisionPlan((2, 4, 8))
        records = ablate_frobenius(model, calib, searched_plan=plan, uniform_bits=4, direct_bits=4)
        assert {r.method for r in records} == {"tada", "tada-uniform", "direct"}
        tada_bits = {r.layer_idx: r.bits for r in records if r.method == "tada"}
        assert tada_bits == {0: 2, 1: 4, 2: 8}
        assert all(r.frobenius_k >= 0 and r.frobenius_v >= 0 for r in records)
        assert len(records) == 9

    def test_plan_length_checked(self):
        model = outlier_model(5, num_layers=2)
        calib = CalibrationSet.synthetic(64, num_sequences=1, length=6, seed=9)
        with pytest.raises(ConfigError):
            ablate_frobenius(model, calib, searched_plan=PrecisionPlan.uniform(4, 3))

    @pytest.mark.parametrize("seed", [0, 1])
    def test_searched_plan_never_beaten_by_its_uniform_anchor(self, seed):
        # budget pinned to the uniform-4 ratio; with a calibration set strong
        # enough to rank widths reliably, the returned plan either is the
        # anchor or genuinely beats it, so its total reconstruction error
        # cannot exceed the anchor's
        cfg = make_cfg(
            num_layers=2,
            num_q_heads=2,
            num_kv_heads=2,
            head_dim=16,
            residual_length=0,
            plan=PrecisionPlan.uniform(4, 2),
        )
        model = random_model(
            cfg, vocab_size=64, seed=seed, outlier_channels=2, outlier_scale=8.0, outlier_jitter=1.0
        )
        budget = memory_ratio(cfg, 1)
        calib = greedy_calibration(model, seed + 900, num_sequences=16, prompt_len=4, new_tokens=8)
        search = SearchConfig(num_candidates=12, memory_budget=budget, seed=seed + 40)
        best, report = random_search(search, calib, model)
        anchor = next(c for c in report.candidates if c.plan.bits_per_layer == (4, 4))
        assert report.best.score <= anchor.score
        # the premise of the error comparison: search landed at the anchor's cost
        assert report.best.memory_ratio == anchor.memory_ratio
        records = ablate_frobenius(model, calib, searched_plan=best, uniform_bits=4, direct_bits=4)
        totals = {}
        for rec in records:
            totals[rec.method] = totals.get(rec.method, 0.0) + rec.frobenius_k + rec.frobenius_v
        assert totals["tada"] <= totals["tada-uniform"] + 1e-9


class TestAblationCsv:
    def test_round_trip(self):
        records = [
            AblationRecord(layer_idx=0, frobenius_k=1.25, frobenius_v=0.5, method="direct", bits=4),
            AblationRecord(layer_idx=1, frobenius_k=0.0, frobenius_v=2.0, method="tada", bits=2),
        ]
        rows = ablation_rows_from_csv(ablation_to_csv(records))
        assert rows == [
            {"layer_idx": 0, "method": "direct", "bits": 4, "frobenius_k": 1.25, "frobenius_v": 0.5},
            {"layer_idx": 1, "method": "tada", "bits": 2, "frobenius_k": 0.0, "frobenius_v": 2.0},
        ]

    def test_centered_reconstruction_matches_manual(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(6, 2, 16)).astype(np.float32)
        rec = centered_reconstruction(x, 8)
        assert rec.shape == x.shape
        direct = direct_quantize_baseline(x, 8)
        assert rec.dtype == direct.dtype == np.float32
