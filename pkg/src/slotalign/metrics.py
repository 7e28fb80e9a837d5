"""Evaluation: boundary-shift metric (AAS), real-time factor, monotonicity
violations, per-position shift curves, and the standard test-suite builder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .aligner import AlignmentResult
from .corpus import CorpusConfig, Utterance, gen_utterance, mix_long_form, prototype_vectors


class MetricError(ValueError):
    """Ill-posed metric input (empty or mismatched lists)."""


def aas(predicted: list[float], reference: list[float]) -> float:
    """Mean absolute shift over all boundary slots (starts and ends alike)."""
    if len(predicted) != len(reference):
        raise MetricError(f"length mismatch: {len(predicted)} vs {len(reference)}")
    if not predicted:
        raise MetricError("no slots")
    p = np.asarray(predicted, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    return float(np.abs(p - r).mean())


def rtf(elapsed_ms: float, audio_ms: float) -> float:
    if audio_ms <= 0:
        raise MetricError(f"non-positive audio duration: {audio_ms}")
    return elapsed_ms / audio_ms


def monotonicity_violations(result: AlignmentResult) -> tuple[int, float]:
    """Count ordering failures over (start_i <= end_i) and (end_i <= start_{i+1})
    checks, in token order. Returns (count, count/checks)."""
    if not result.entries:
        raise MetricError("empty alignment result")
    count = 0
    checks = 0
    prev_end = None
    for _, start, end in result.entries:
        checks += 1
        if end < start:
            count += 1
        if prev_end is not None:
            checks += 1
            if start < prev_end:
                count += 1
        prev_end = end
    return count, count / checks


def boundary_lists(entries, spans) -> tuple[list[int], list[int]]:
    """Flatten aligned (start, end) pairs for AAS: predicted entries vs the
    reference spans of the same token indices."""
    pred: list[int] = []
    ref: list[int] = []
    for tok_idx, start, end in entries:
        pred += [start, end]
        ref += [spans[tok_idx].start_ms, spans[tok_idx].end_ms]
    return pred, ref


@dataclass
class EvalReport:
    suite: str
    aas_ms: float
    slot_count: int
    rtf: float
    violation_count: int
    violation_rate: float
    # (ordinal bucket, mean |shift| ms, n) per bucket
    shift_curve: list[tuple[int, float, int]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "suite": self.suite,
            "aas_ms": self.aas_ms,
            "slot_count": self.slot_count,
            "rtf": self.rtf,
            "violation_count": self.violation_count,
            "violation_rate": self.violation_rate,
            "shift_curve": [list(row) for row in self.shift_curve],
        }


def shift_curve(per_utt_shifts: list[list[float]], bucket: int = 10) -> list[tuple[int, float, int]]:
    """Mean |shift| by slot ordinal bucket, pooled across utterances."""
    buckets: dict[int, list[float]] = {}
    for shifts in per_utt_shifts:
        for ordinal, s in enumerate(shifts):
            buckets.setdefault(ordinal // bucket, []).append(abs(s))
    return [(b, float(np.mean(v)), len(v)) for b, v in sorted(buckets.items())]


def curve_slope(curve: list[tuple[int, float, int]]) -> float:
    """Least-squares slope of mean shift vs bucket ordinal, in ms per bucket."""
    if len(curve) < 2:
        return 0.0
    x = np.asarray([b for b, _, _ in curve], dtype=np.float64)
    y = np.asarray([m for _, m, _ in curve], dtype=np.float64)
    return float(np.polyfit(x, y, 1)[0])


def evaluate(results: list[AlignmentResult], references: list[list],
             suite: str = "suite") -> EvalReport:
    """Pool AAS/RTF/monotonicity over a suite. `references` holds the reference
    span list (gold or pseudo) per utterance, parallel to `results`."""
    if len(results) != len(references):
        raise MetricError("results/references length mismatch")
    pred_all: list[int] = []
    ref_all: list[int] = []
    per_utt_shifts: list[list[float]] = []
    elapsed = 0.0
    audio = 0.0
    violations = 0
    checks = 0
    for res, spans in zip(results, references):
        pred, ref = boundary_lists(res.entries, spans)
        pred_all += pred
        ref_all += ref
        per_utt_shifts.append([p - r for p, r in zip(pred, ref)])
        elapsed += res.elapsed_ms
        audio += res.audio_duration_ms
        if res.entries:
            c, _ = monotonicity_violations(res)
            violations += c
            checks += 2 * len(res.entries) - 1
    if not pred_all:
        raise MetricError(f"suite {suite} produced no slots")
    return EvalReport(
        suite=suite,
        aas_ms=aas(pred_all, ref_all),
        slot_count=len(pred_all),
        rtf=rtf(elapsed, audio),
        violation_count=violations,
        violation_rate=violations / checks if checks else 0.0,
        shift_curve=shift_curve(per_utt_shifts),
    )


def write_report(path, reports: dict[str, EvalReport] | EvalReport) -> None:
    if isinstance(reports, EvalReport):
        payload = reports.to_json()
    else:
        payload = {name: r.to_json() for name, r in reports.items()}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def write_shift_curve_tsv(path, curve: list[tuple[int, float, int]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("ordinal\tmean_abs_shift_ms\tn\n")
        for b, m, n in curve:
            f.write(f"{b}\t{m:.3f}\t{n}\n")


# ---------------------------------------------------------------------------
# test-suite builder
# ---------------------------------------------------------------------------

@dataclass
class SuiteSpec:
    n_raw: int = 32
    n_mixed: int = 8
    noisy_sigma_scale: float = 4.0
    mixed_short_range_ms: tuple[int, int] = (6000, 10000)
    mixed_long_range_ms: tuple[int, int] = (20000, 28000)
    # second "language": a disjoint token-id range for crossvocab mixtures
    cross_token_range: tuple[int, int] | None = None


def build_suites(cfg: CorpusConfig, seed: int, spec: SuiteSpec | None = None
                 ) -> dict[str, list[Utterance]]:
    """Raw, noisy-raw, short/long mixtures, and cross-vocab mixtures, all from
    seeds derived from `seed`."""
    spec = spec or SuiteSpec()
    protos = prototype_vectors(cfg)
    suites: dict[str, list[Utterance]] = {}

    def fresh(name, sub_cfg, n, tag):
        rng = np.random.default_rng(np.random.SeedSequence([seed, tag]))
        return [gen_utterance(sub_cfg, rng, f"{name}{i:04d}", protos) for i in range(n)]

    suites["raw"] = fresh("raw", cfg, spec.n_raw, 1)
    noisy_cfg = replace(cfg, noise_sigma=cfg.noise_sigma * spec.noisy_sigma_scale)
    suites["raw_noisy"] = fresh("noisy", noisy_cfg, spec.n_raw, 2)

    def mixes(name, pool, rng_tag, target_range, n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, rng_tag]))
        out = []
        for i in range(n):
            target = int(rng.integers(target_range[0], target_range[1] + 1))
            out.append(mix_long_form(pool, target, rng, cfg.max_duration_ms, f"{name}{i:04d}"))
        return out

    base_pool = fresh("pool", cfg, max(spec.n_raw, 16), 3)
    suites["mixed_short"] = mixes("mixs", base_pool, 4, spec.mixed_short_range_ms, spec.n_mixed)
    suites["mixed_long"] = mixes("mixl", base_pool, 5, spec.mixed_long_range_ms, spec.n_mixed)

    if spec.cross_token_range is not None:
        other_cfg = replace(cfg, token_range=spec.cross_token_range)
        other_pool = fresh("xpool", other_cfg, max(spec.n_raw // 2, 8), 6)
        cross_pool = base_pool[: len(other_pool)] + other_pool
        suites["mixed_crossvocab"] = mixes("mixx", cross_pool, 7,
                                           spec.mixed_short_range_ms, spec.n_mixed)
    return suites
