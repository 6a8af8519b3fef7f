"""Prediction-evolution diagnostics over trace sets.

Quantifies the two failure modes of carrying computation past a correct
internal prediction: the wasteful effect (ideal exit rates and the cost
reduction a perfect exit oracle would achieve) and the destructive effect
(correct internal predictions that end as final misclassifications).
Also computes the confusion score: summed L1 distance between each
internal probability vector and the final one, z-normalized by
training-set statistics, plus its value as a misclassification indicator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError
from .exits import PredictionTrace


def _stack_predictions(traces: list[PredictionTrace]) -> np.ndarray:
    return np.stack([t.predictions for t in traces])  # (n, heads)


def _check_aligned(traces, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if len(traces) != len(labels):
        raise DataError(f"{len(traces)} traces but {len(labels)} labels")
    if not traces:
        raise DataError("empty trace set")
    return labels


def per_head_accuracy(traces: list[PredictionTrace], labels) -> list[float]:
    labels = _check_aligned(traces, labels)
    hits = _stack_predictions(traces) == labels[:, None]
    return hits.mean(axis=0).tolist()


@dataclass(frozen=True)
class HeadMilestones:
    """Which internal heads hit the reference accuracy marks (1-based)."""

    closest_80_ic: int
    closest_90_ic: int
    max_ic: int
    max_ic_accuracy: float


def head_milestones(per_head: list[float]) -> HeadMilestones:
    """Internal head closest to 80% / 90% of the final accuracy, and the most
    accurate internal head (ties go to the later head)."""
    if len(per_head) < 2:
        raise DataError("need at least one internal head plus the final head")
    internal = np.asarray(per_head[:-1])
    final = per_head[-1]

    def closest(target: float) -> int:
        return int(np.argmin(np.abs(internal - target * final))) + 1

    best = len(internal) - 1 - int(np.argmax(internal[::-1]))  # later head on ties
    return HeadMilestones(
        closest_80_ic=closest(0.8),
        closest_90_ic=closest(0.9),
        max_ic=best + 1,
        max_ic_accuracy=float(internal[best]),
    )


def cumulative_accuracy(traces: list[PredictionTrace], labels) -> float:
    """Fraction of samples some head (internal or final) classifies correctly."""
    labels = _check_aligned(traces, labels)
    hits = _stack_predictions(traces) == labels[:, None]
    return float(hits.any(axis=1).mean())


@dataclass(frozen=True)
class IdealExitAnalysis:
    """Outcome of the perfect exit oracle: each sample leaves at its first
    correct head, or at the final head if no head is ever right."""

    exit_counts: tuple[int, ...]
    avg_cost: float
    avg_cost_fraction: float
    cost_reduction: float


def ideal_exit_analysis(traces: list[PredictionTrace], labels) -> IdealExitAnalysis:
    labels = _check_aligned(traces, labels)
    hits = _stack_predictions(traces) == labels[:, None]
    num_heads = hits.shape[1]
    first = np.where(hits.any(axis=1), hits.argmax(axis=1), num_heads - 1)
    costs = np.asarray(traces[0].exit_flops, dtype=np.float64)
    counts = np.bincount(first, minlength=num_heads)
    avg = float(costs[first].mean())
    full = float(costs[-1])
    return IdealExitAnalysis(
        exit_counts=tuple(int(c) for c in counts),
        avg_cost=avg,
        avg_cost_fraction=avg / full,
        cost_reduction=1.0 - avg / full,
    )


def confusion_unbounded(trace: PredictionTrace) -> float:
    """Sum over internal heads of the L1 distance to the final vector."""
    if trace.num_heads < 2:
        raise DataError("confusion needs at least one internal head")
    return float(np.abs(trace.probs[:-1] - trace.probs[-1]).sum())


def confusion_scores(traces: list[PredictionTrace]) -> np.ndarray:
    return np.array([confusion_unbounded(t) for t in traces])


@dataclass(frozen=True)
class NormalizationStats:
    mu: float
    sigma: float  # population standard deviation


def confusion_normalize(scores, train_scores) -> tuple[np.ndarray, NormalizationStats]:
    """z-score the raw confusion values with training-set mean and population
    standard deviation."""
    train = np.asarray(train_scores, dtype=np.float64)
    mu = float(train.mean())
    sigma = float(train.std())
    if sigma == 0.0:
        raise NumericError("training confusion scores have zero variance")
    return (np.asarray(scores, dtype=np.float64) - mu) / sigma, NormalizationStats(mu, sigma)


@dataclass(frozen=True)
class IndicatorReport:
    """How well a per-sample score separates wrong from correct predictions.

    fn_rate is the fraction of misclassified samples the indicator would
    wave through: for confusion, those scoring below the correct-class
    mean.  Absent classes leave fields as None.
    """

    mean_correct: float | None
    mean_wrong: float | None
    fn_rate: float | None


def error_indicator_report(scores, correct_flags) -> IndicatorReport:
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(correct_flags, dtype=bool)
    if scores.shape != flags.shape:
        raise DataError(f"{scores.shape} scores but {flags.shape} correctness flags")
    mean_c = float(scores[flags].mean()) if flags.any() else None
    mean_w = float(scores[~flags].mean()) if (~flags).any() else None
    fn = None
    if mean_c is not None and (~flags).any():
        fn = float((scores[~flags] < mean_c).mean())
    return IndicatorReport(mean_correct=mean_c, mean_wrong=mean_w, fn_rate=fn)


def confidence_indicator_report(confidences, correct_flags) -> IndicatorReport:
    """Baseline indicator from final-head confidence.  High confidence means
    'looks correct', so a false negative is a wrong prediction whose
    confidence exceeds the correct-class mean."""
    conf = np.asarray(confidences, dtype=np.float64)
    flags = np.asarray(correct_flags, dtype=bool)
    if conf.shape != flags.shape:
        raise DataError(f"{conf.shape} confidences but {flags.shape} correctness flags")
    mean_c = float(conf[flags].mean()) if flags.any() else None
    mean_w = float(conf[~flags].mean()) if (~flags).any() else None
    fn = None
    if mean_c is not None and (~flags).any():
        fn = float((conf[~flags] > mean_c).mean())
    return IndicatorReport(mean_correct=mean_c, mean_wrong=mean_w, fn_rate=fn)


@dataclass(frozen=True)
class OverthinkingReport:
    per_head_accuracy: tuple[float, ...]
    final_accuracy: float
    cumulative_accuracy: float
    destructive_fraction: float
    destructive_share_of_errors: float
    ideal: IdealExitAnalysis
    milestones: HeadMilestones

    def to_json(self, confusion: IndicatorReport | None = None) -> dict:
        return {
            "final_accuracy": self.final_accuracy,
            "cumulative_accuracy": self.cumulative_accuracy,
            "per_head_accuracy": list(self.per_head_accuracy),
            "ideal_cost_reduction": self.ideal.cost_reduction,
            "destructive_fraction": self.destructive_fraction,
            "confusion": {
                "mean_correct": confusion.mean_correct if confusion else None,
                "mean_wrong": confusion.mean_wrong if confusion else None,
                "fn_rate": confusion.fn_rate if confusion else None,
            },
        }


def overthinking_report(traces: list[PredictionTrace], labels) -> OverthinkingReport:
    labels = _check_aligned(traces, labels)
    per_head = per_head_accuracy(traces, labels)
    final = per_head[-1]
    cumulative = cumulative_accuracy(traces, labels)
    destructive = cumulative - final
    errors = 1.0 - final
    share = destructive / errors if errors > 0 else 0.0
    return OverthinkingReport(
        per_head_accuracy=tuple(per_head),
        final_accuracy=final,
        cumulative_accuracy=cumulative,
        destructive_fraction=destructive,
        destructive_share_of_errors=share,
        ideal=ideal_exit_analysis(traces, labels),
        milestones=head_milestones(per_head),
    )


def confusion_histogram(scores, correct_flags, bins: int = 40) -> list[tuple[float, float, int, int]]:
    """Rows of (bin_low, bin_high, count_correct, count_wrong) covering every
    sample; bin edges span the observed score range."""
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(correct_flags, dtype=bool)
    lo, hi = float(scores.min()), float(scores.max())
    if lo == hi:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    c_counts, _ = np.histogram(scores[flags], bins=edges)
    w_counts, _ = np.histogram(scores[~flags], bins=edges)
    return [
        (float(edges[i]), float(edges[i + 1]), int(c_counts[i]), int(w_counts[i]))
        for i in range(bins)
    ]
