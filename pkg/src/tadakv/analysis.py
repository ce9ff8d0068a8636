"""Reconstruction-error analysis: per-layer Frobenius ablation and synthetic outliers.

The ablation runs calibration sequences through the model once with raw key
and value activations retained, then measures, per layer, the Frobenius norm
of (raw - reconstructed) under three compression routes: the mean-centered
pipeline with a searched plan, the same pipeline with one uniform width, and
direct group quantization of the raw activations (no mean-centering).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .cache import PrecisionPlan, mean_center
from .errors import ConfigError
from .model import ToyModel, forward_capture_kv
from .quant import direct_quantize_baseline, dequantize_tensor, quantize_tensor
from .search import CalibrationSet
from .tensor import F32


@dataclass(frozen=True)
class AblationRecord:
    """Per-layer reconstruction error for one compression route."""

    layer_idx: int
    frobenius_k: float
    frobenius_v: float
    method: str  # "tada" | "tada-uniform" | "direct"
    bits: int


def shared_outlier_activations(
    rng: np.random.Generator,
    tokens: int,
    heads: int,
    head_dim: int,
    *,
    outlier_channels: int = 2,
    outlier_scale: float = 8.0,
    noise_scale: float = 0.1,
) -> np.ndarray:
    """Synthetic (tokens, heads, head_dim) activations with cross-head outliers.

    Every head sees the same per-token base vector, whose chosen channels are
    boosted by ``outlier_scale``, plus small i.i.d. noise.  Raw activations
    are outlier-heavy; cross-head deviations are small and outlier-free.
    """
    base = rng.normal(size=(tokens, 1, head_dim))
    channels = rng.choice(head_dim, size=min(outlier_channels, head_dim), replace=False)
    base[:, :, channels] *= outlier_scale
    noise = rng.normal(size=(tokens, heads, head_dim)) * noise_scale
    return (base + noise).astype(F32)


def centered_reconstruction(x: np.ndarray, bits: int) -> np.ndarray:
    """Mean-center, quantize the deviations, and rebuild the activations."""
    mean, dev = mean_center(x)
    return mean[:, None, :] - dequantize_tensor(quantize_tensor(dev, bits))


def ablate_frobenius(
    model: ToyModel,
    calib: CalibrationSet,
    *,
    searched_plan: PrecisionPlan | None = None,
    uniform_bits: int = 4,
    direct_bits: int = 4,
) -> list[AblationRecord]:
    """Per-layer Frobenius reconstruction error for each compression route.

    Squared errors accumulate over all calibration sequences before the final
    square root, so the norms describe the whole calibration set at once.
    """
    if searched_plan is not None and len(searched_plan) != model.cfg.num_layers:
        raise ConfigError(
            f"searched plan covers {len(searched_plan)} layers, model has {model.cfg.num_layers}"
        )
    num_layers = model.cfg.num_layers
    methods: list[tuple[str, list[int]]] = []
    if searched_plan is not None:
        methods.append(("tada", list(searched_plan.bits_per_layer)))
    methods.append(("tada-uniform", [uniform_bits] * num_layers))
    methods.append(("direct", [direct_bits] * num_layers))

    sq_err = {(m, layer): [0.0, 0.0] for m, _ in methods for layer in range(num_layers)}
    for seq in calib.sequences:
        activations = forward_capture_kv(model, list(seq))
        for layer, (k_raw, v_raw) in enumerate(activations):
            for method, bits_per_layer in methods:
                bits = bits_per_layer[layer]
                if method == "direct":
                    k_hat = direct_quantize_baseline(k_raw, bits)
                    v_hat = direct_quantize_baseline(v_raw, bits)
                else:
                    k_hat = centered_reconstruction(k_raw, bits)
                    v_hat = centered_reconstruction(v_raw, bits)
                cell = sq_err[(method, layer)]
                cell[0] += float(np.sum((k_raw.astype(np.float64) - k_hat) ** 2))
                cell[1] += float(np.sum((v_raw.astype(np.float64) - v_hat) ** 2))

    records = []
    for method, bits_per_layer in methods:
        for layer in range(num_layers):
            k_sq, v_sq = sq_err[(method, layer)]
            records.append(
                AblationRecord(
                    layer_idx=layer,
                    frobenius_k=float(np.sqrt(k_sq)),
                    frobenius_v=float(np.sqrt(v_sq)),
                    method=method,
                    bits=bits_per_layer[layer],
                )
            )
    return records


def ablation_to_csv(records: list[AblationRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer_idx", "method", "bits", "frobenius_k", "frobenius_v"])
    for rec in records:
        writer.writerow([rec.layer_idx, rec.method, rec.bits, repr(rec.frobenius_k), repr(rec.frobenius_v)])
    return buf.getvalue()


def ablation_rows_from_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    return [
        {
            "layer_idx": int(r["layer_idx"]),
            "method": r["method"],
            "bits": int(r["bits"]),
            "frobenius_k": float(r["frobenius_k"]),
            "frobenius_v": float(r["frobenius_v"]),
        }
        for r in reader
    ]
