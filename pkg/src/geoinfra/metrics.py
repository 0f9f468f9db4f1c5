"""Binary-classification metrics and pooled K-fold aggregation.

All functions here are pure and safe for concurrent use. AUROC follows the
Mann-Whitney convention: ties between a positive and a negative score are
credited one half, which matches the probabilistic definition (chance that
a random positive outranks a random negative) under random tie-breaking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# column order of the serialized report rows
REPORT_HEADER = "outcome,balance,accuracy,f1,precision,recall,auroc"

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def degenerate_metrics(self) -> frozenset:
        """Names of metrics whose denominator is empty (reported as 0)."""
        out = set()
        if self.tp + self.fp == 0:
            out.add("precision")
        if self.tp + self.fn == 0:
            out.add("recall")
        if out:
            out.add("f1")
        return frozenset(out)


def confusion(scores: Sequence[float], labels: Sequence[int],
              threshold: float = DEFAULT_THRESHOLD) -> ConfusionCounts:
    """Threshold scores at >= threshold (boundary counts as positive)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    if s.size == 0:
        raise ValueError("cannot build a confusion matrix from zero examples")
    pred = s >= threshold
    pos = y == 1
    return ConfusionCounts(
        tp=int(np.count_nonzero(pred & pos)),
        fp=int(np.count_nonzero(pred & ~pos)),
        tn=int(np.count_nonzero(~pred & ~pos)),
        fn=int(np.count_nonzero(~pred & pos)),
    )


def accuracy(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total


def precision(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp
    return c.tp / denom if denom else 0.0


def recall(c: ConfusionCounts) -> float:
    denom = c.tp + c.fn
    return c.tp / denom if denom else 0.0


def f1(c: ConfusionCounts) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    p, r = precision(c), recall(c)
    return 2.0 * p * r / (p + r) if p + r else 0.0


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-based AUROC with ties credited 0.5.

    Computed from average ranks (Mann-Whitney U), which equals
    (#concordant + 0.5 #tied) / (n_pos * n_neg).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int(np.count_nonzero(y == 1))
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC undefined: labels contain a single class")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_s = s[order]
    i = 0
    rank_base = 1
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        # average rank for the tie group [i, j]
        ranks[order[i:j + 1]] = 0.5 * (rank_base + rank_base + (j - i))
        rank_base += j - i + 1
        i = j + 1
    rank_sum_pos = float(ranks[np.asarray(y) == 1].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auroc_trapezoid(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Trapezoidal area under the ROC curve; must agree with :func:`auroc`."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int(np.count_nonzero(y == 1))
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC undefined: labels contain a single class")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = np.asarray(y)[order]
    area = 0.0
    tp = fp = 0
    prev_tp = prev_fp = 0
    i = 0
    n = s.size
    while i < n:
        j = i
        while j + 1 < n and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        tp += int(np.count_nonzero(y_sorted[i:j + 1] == 1))
        fp += (j - i + 1) - int(np.count_nonzero(y_sorted[i:j + 1] == 1))
        area += (fp - prev_fp) * (tp + prev_tp) / 2.0
        prev_tp, prev_fp = tp, fp
        i = j + 1
    return area / (n_pos * n_neg)


def simple_matching_coefficient(a: Sequence[int], b: Sequence[int]) -> float:
    """Fraction of positions where two binary vectors agree."""
    av = np.asarray(a)
    bv = np.asarray(b)
    if av.shape != bv.shape or av.size == 0:
        raise ValueError(f"vectors must share a non-zero length: {av.shape} vs {bv.shape}")
    return float(np.count_nonzero(av == bv)) / av.size


@dataclass
class MetricsReport:
    """Per-outcome evaluation summary; one CSV row per report."""

    outcome: str
    balance: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    auroc: float
    n: int
    threshold: float = DEFAULT_THRESHOLD
    degenerate: frozenset = field(default_factory=frozenset)

    def csv_row(self) -> str:
        vals = [self.balance, self.accuracy, self.f1, self.precision, self.recall, self.auroc]
        return ",".join([self.outcome] + [f"{v:.6f}" for v in vals])


def compute_report(outcome: str, scores: Sequence[float], labels: Sequence[int],
                   threshold: float = DEFAULT_THRESHOLD) -> MetricsReport:
    c = confusion(scores, labels, threshold)
    y = np.asarray(labels)
    return MetricsReport(
        outcome=outcome,
        balance=float(np.count_nonzero(y == 1)) / y.size,
        accuracy=accuracy(c),
        precision=precision(c),
        recall=recall(c),
        f1=f1(c),
        auroc=auroc(scores, labels),
        n=int(y.size),
        threshold=threshold,
        degenerate=c.degenerate_metrics(),
    )


@dataclass(frozen=True)
class FoldPredictions:
    """Test-fold predictions for one outcome: aligned geocodes/scores/labels."""

    fold: int
    geocodes: tuple
    scores: tuple
    labels: tuple


def aggregate_kfold(outcome: str, folds: Iterable[FoldPredictions],
                    threshold: float = DEFAULT_THRESHOLD,
                    per_fold_average: bool = False) -> MetricsReport:
    """Pool every fold's test predictions, then compute metrics once.

    Pooling is the default contract; ``per_fold_average`` instead averages
    each metric over folds (kept for comparison, not the reporting path).
    Folds must cover each geocode exactly once.
    """
    folds = list(folds)
    seen: dict[str, int] = {}
    for fp in folds:
        for g in fp.geocodes:
            if g in seen:
                raise ValueError(
                    f"geocode {g!r} appears in test sets of folds {seen[g]} and {fp.fold}")
            seen[g] = fp.fold
    if not seen:
        raise ValueError("no predictions to aggregate")

    if per_fold_average:
        reports = [compute_report(outcome, fp.scores, fp.labels, threshold) for fp in folds]
        n = sum(r.n for r in reports)
        k = len(reports)
        return MetricsReport(
            outcome=outcome,
            balance=sum(r.balance for r in reports) / k,
            accuracy=sum(r.accuracy for r in reports) / k,
            precision=sum(r.precision for r in reports) / k,
            recall=sum(r.recall for r in reports) / k,
            f1=sum(r.f1 for r in reports) / k,
            auroc=sum(r.auroc for r in reports) / k,
            n=n,
            threshold=threshold,
        )

    scores = [s for fp in folds for s in fp.scores]
    labels = [l for fp in folds for l in fp.labels]
    return compute_report(outcome, scores, labels, threshold)
