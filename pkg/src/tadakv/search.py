"""Random search over per-layer deviation bit widths.

Candidates are sampled uniformly per layer from the allowed widths, scored by
mean next-token negative log-likelihood under compressed teacher-forced
decoding of a calibration set, filtered by an optional memory budget, and
reported with per-candidate width histograms split into lower-half and
upper-half layers.  Uniform plans are injected as anchors by default so the
search can never return something worse than the best uniform width.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace

import numpy as np

from .cache import ModelConfig, PrecisionPlan, memory_ratio
from .errors import BudgetInfeasibleError, ConfigError, DataError
from .model import ToyModel, decode_step, new_caches, reference_forward

SEARCHABLE_WIDTHS = (2, 4, 8)


@dataclass(frozen=True)
class SearchConfig:
    """Random-search knobs: pool size, width choices, budget, seed, anchors."""

    num_candidates: int = 64
    bit_choices: tuple[int, ...] = SEARCHABLE_WIDTHS
    memory_budget: float | None = None
    seed: int = 0
    include_uniform_anchors: bool = True

    def __post_init__(self) -> None:
        if self.num_candidates < 1:
            raise ConfigError(f"num_candidates must be >= 1, got {self.num_candidates}")
        if not self.bit_choices:
            raise ConfigError("bit_choices must be non-empty")
        bad = sorted(set(self.bit_choices) - set(SEARCHABLE_WIDTHS))
        if bad:
            raise ConfigError(f"bit_choices must be a subset of {SEARCHABLE_WIDTHS}, got {bad}")
        object.__setattr__(self, "bit_choices", tuple(sorted(set(int(b) for b in self.bit_choices))))


@dataclass(frozen=True)
class CalibrationSet:
    """Token-id sequences scored by next-token prediction (targets are the shifts)."""

    sequences: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if not self.sequences:
            raise ConfigError("calibration set must contain at least one sequence")
        seqs = tuple(tuple(int(t) for t in s) for s in self.sequences)
        for s in seqs:
            if len(s) < 2:
                raise ConfigError("every calibration sequence needs length >= 2")
        object.__setattr__(self, "sequences", seqs)

    @classmethod
    def synthetic(cls, vocab_size: int, num_sequences: int, length: int, seed: int) -> "CalibrationSet":
        rng = np.random.default_rng(seed)
        seqs = tuple(
            tuple(int(t) for t in rng.integers(0, vocab_size, size=length))
            for _ in range(num_sequences)
        )
        return cls(seqs)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationSet":
        try:
            data = json.loads(text)
        except ValueError as exc:
            raise DataError(f"calibration file is not valid JSON: {exc}") from None
        if not isinstance(data, list) or not all(isinstance(s, list) for s in data):
            raise DataError("calibration file must be a JSON list of token-id lists")
        return cls(tuple(tuple(s) for s in data))


@dataclass(frozen=True)
class CandidateRecord:
    index: int
    plan: PrecisionPlan
    score: float
    memory_ratio: float
    feasible: bool


@dataclass(frozen=True)
class CalibrationReport:
    """All scored candidates in generation order plus the selected index."""

    candidates: tuple[CandidateRecord, ...]
    best_index: int
    seed: int
    memory_budget: float | None

    @property
    def best(self) -> CandidateRecord:
        return self.candidates[self.best_index]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def score_plan(
    plan: PrecisionPlan,
    calib: CalibrationSet,
    model: ToyModel,
    cfg: ModelConfig | None = None,
) -> float:
    """Mean next-token NLL under compressed decoding with the given plan.

    Every position is teacher-forced through :func:`decode_step`, so each
    prediction attends over the compressed cache exactly as generation would.
    """
    cfg = replace(cfg or model.cfg, plan=plan)
    if len(plan) != cfg.num_layers:
        raise ConfigError(f"plan covers {len(plan)} layers, model has {cfg.num_layers}")
    total = 0.0
    count = 0
    for seq in calib.sequences:
        caches = new_caches(cfg)
        for pos in range(len(seq) - 1):
            logits = decode_step(model, caches, seq[pos], pos, cfg=cfg)
            total += -_log_softmax(logits)[seq[pos + 1]]
            count += 1
    return float(total / count)


def uncompressed_nll(calib: CalibrationSet, model: ToyModel) -> float:
    """Mean next-token NLL of the uncompressed oracle forward pass."""
    total = 0.0
    count = 0
    for seq in calib.sequences:
        logits = reference_forward(model, list(seq))
        for pos in range(len(seq) - 1):
            total += -_log_softmax(logits[pos])[seq[pos + 1]]
            count += 1
    return float(total / count)


def random_search(
    search: SearchConfig,
    calib: CalibrationSet,
    model: ToyModel,
    cfg: ModelConfig | None = None,
) -> tuple[PrecisionPlan, CalibrationReport]:
    """Sample, score, and filter candidate plans; return the best feasible one.

    The candidate pool is the uniform anchors (when enabled) followed by
    ``num_candidates`` seeded uniform draws per layer.  Ties are broken by
    lower memory ratio, then generation order.  Raises BudgetInfeasibleError
    when nothing fits the budget, naming the tightest candidate.
    """
    base_cfg = cfg or model.cfg
    rng = np.random.default_rng(search.seed)
    choices = search.bit_choices
    plans: list[PrecisionPlan] = []
    if search.include_uniform_anchors:
        plans.extend(PrecisionPlan.uniform(b, base_cfg.num_layers) for b in choices)
    for _ in range(search.num_candidates):
        picks = rng.integers(0, len(choices), size=base_cfg.num_layers)
        plans.append(PrecisionPlan(tuple(choices[i] for i in picks)))

    records: list[CandidateRecord] = []
    for idx, plan in enumerate(plans):
        ratio = memory_ratio(replace(base_cfg, plan=plan), tokens_per_layer=1)
        feasible = search.memory_budget is None or ratio <= search.memory_budget + 1e-12
        score = score_plan(plan, calib, model, cfg=base_cfg)
        records.append(
            CandidateRecord(index=idx, plan=plan, score=score, memory_ratio=ratio, feasible=feasible)
        )

    feasible_records = [r for r in records if r.feasible]
    if not feasible_records:
        tightest = min(records, key=lambda r: (r.memory_ratio, r.index))
        raise BudgetInfeasibleError(
            f"no candidate fits memory budget {search.memory_budget}; tightest was "
            f"candidate {tightest.index} with ratio {tightest.memory_ratio:.6f} "
            f"and plan {list(tightest.plan.bits_per_layer)}"
        )
    best = min(feasible_records, key=lambda r: (r.score, r.memory_ratio, r.index))
    report = CalibrationReport(
        candidates=tuple(records),
        best_index=best.index,
        seed=search.seed,
        memory_budget=search.memory_budget,
    )
    return best.plan, report


def _width_histogram(bits: tuple[int, ...]) -> dict[int, int]:
    return {w: sum(1 for b in bits if b == w) for w in (2, 4, 8, 16)}


def sensitivity_report(report: CalibrationReport) -> list[dict]:
    """Per-candidate width histograms sorted by score, split by layer half.

    The lower-half/upper-half breakdown makes it easy to check whether the
    search prefers wider codes in early layers and narrower ones later.
    """
    if not report.candidates:
        raise ConfigError("empty report")
    rows = []
    for rec in sorted(report.candidates, key=lambda r: (r.score, r.index)):
        bits = rec.plan.bits_per_layer
        half = len(bits) // 2
        rows.append(
            {
                "candidate_index": rec.index,
                "score": rec.score,
                "memory_ratio": rec.memory_ratio,
                "feasible": rec.feasible,
                "counts": _width_histogram(bits),
                "lower_half": _width_histogram(bits[:half]),
                "upper_half": _width_histogram(bits[half:]),
            }
        )
    return rows


def report_to_json(report: CalibrationReport) -> str:
    payload = {
        "seed": report.seed,
        "memory_budget": report.memory_budget,
        "best_index": report.best_index,
        "best_plan": list(report.best.plan.bits_per_layer),
        "candidates": [
            {
                "candidate_index": r.index,
                "score": r.score,
                "memory_ratio": r.memory_ratio,
                "feasible": r.feasible,
                "bits": list(r.plan.bits_per_layer),
            }
            for r in report.candidates
        ],
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def report_to_csv(report: CalibrationReport) -> str:
    """Candidate table with columns candidate_index, score, memory_ratio, bits_layer_*."""
    num_layers = len(report.candidates[0].plan)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["candidate_index", "score", "memory_ratio"]
        + [f"bits_layer_{i}" for i in range(num_layers)]
    )
    for r in report.candidates:
        writer.writerow([r.index, repr(float(r.score)), repr(float(r.memory_ratio))] + list(r.plan.bits_per_layer))
    return buf.getvalue()


def report_rows_from_csv(text: str) -> list[dict]:
    """Parse a report CSV back into row dicts (the documented schema)."""
    reader = csv.DictReader(io.StringIO(text))
    rows = []
    for raw in reader:
        bits = [int(v) for k, v in raw.items() if k.startswith("bits_layer_")]
        rows.append(
            {
                "candidate_index": int(raw["candidate_index"]),
                "score": float(raw["score"]),
                "memory_ratio": float(raw["memory_ratio"]),
                "bits": bits,
            }
        )
    return rows
