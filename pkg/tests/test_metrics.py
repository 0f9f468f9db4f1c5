import numpy as np
import pytest

from geoinfra.metrics import (
    REPORT_HEADER,
    ConfusionCounts,
    FoldPredictions,
    accuracy,
    aggregate_kfold,
    auroc,
    auroc_trapezoid,
    compute_report,
    confusion,
    f1,
    precision,
    recall,
    simple_matching_coefficient,
)


def auroc_pairs_oracle(scores, labels):
    """Exhaustive pair enumeration: (#concordant + 0.5 #ties) / (P*N)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = s[y == 1]
    neg = s[y == 0]
    diff = pos[:, None] - neg[None, :]
    return (np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)) / diff.size


# ---------------------------------------------------------------------------
# confusion and threshold metrics


def test_confusion_perfect_pair():
    c = confusion([0.9, 0.1], [1, 0], 0.5)
    assert (c.tp, c.fp, c.tn, c.fn) == (1, 0, 1, 0)


def test_confusion_boundary_is_positive():
    c = confusion([0.5, 0.5, 0.5], [1, 0, 1], 0.5)
    assert c.tp + c.fp == 3


def test_confusion_hand_tally():
    scores = [0.9, 0.8, 0.4, 0.6, 0.3, 0.2]
    labels = [1, 0, 1, 1, 0, 0]
    c = confusion(scores, labels, 0.5)
    assert (c.tp, c.fp, c.fn, c.tn) == (2, 1, 1, 2)


def test_confusion_length_mismatch():
    with pytest.raises(ValueError, match="differ in length"):
        confusion([0.5], [1, 0])


def test_metric_hand_arithmetic():
    c = ConfusionCounts(tp=3, fp=1, tn=0, fn=2)
    assert precision(c) == pytest.approx(0.75)
    assert recall(c) == pytest.approx(0.6)
    assert f1(c) == pytest.approx(2 * 0.75 * 0.6 / 1.35)


def test_metric_all_negative_degenerate():
    c = ConfusionCounts(tp=0, fp=0, tn=5, fn=0)
    assert accuracy(c) == 1.0
    assert precision(c) == 0.0
    assert recall(c) == 0.0
    assert f1(c) == 0.0
    assert c.degenerate_metrics() == {"precision", "recall", "f1"}


def test_metric_perfect_classifier():
    c = ConfusionCounts(tp=4, fp=0, tn=6, fn=0)
    assert accuracy(c) == precision(c) == recall(c) == f1(c) == 1.0
    assert c.degenerate_metrics() == frozenset()


# ---------------------------------------------------------------------------
# AUROC


def test_auroc_perfect_separation():
    assert auroc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_auroc_all_ties():
    assert auroc([0.3] * 6, [1, 0, 1, 0, 1, 0]) == 0.5


def test_auroc_eight_element_case_vs_pair_oracle():
    rng = np.random.default_rng(14)
    scores = rng.random(8).round(1)  # rounding forces some ties
    labels = rng.integers(0, 2, 8)
    labels[0], labels[1] = 1, 0  # both classes present
    assert auroc(scores, labels) == pytest.approx(auroc_pairs_oracle(scores, labels), abs=1e-12)


def test_auroc_matches_pair_oracle_many_instances():
    rng = np.random.default_rng(99)
    for _ in range(300):
        n = int(rng.integers(2, 50))
        labels = rng.integers(0, 2, n)
        labels[0], labels[-1] = 1, 0
        scores = rng.choice([0.1, 0.25, 0.5, 0.7, 0.9], size=n)  # heavy ties
        want = auroc_pairs_oracle(scores, labels)
        assert auroc(scores, labels) == pytest.approx(want, abs=1e-12)
        assert auroc_trapezoid(scores, labels) == pytest.approx(want, abs=1e-12)


def test_auroc_single_class_errors():
    with pytest.raises(ValueError, match="undefined"):
        auroc([0.1, 0.9], [1, 1])


def test_auroc_invariant_under_monotone_transform():
    rng = np.random.default_rng(4)
    scores = rng.random(40)
    labels = rng.integers(0, 2, 40)
    labels[:2] = [0, 1]
    a = auroc(scores, labels)
    assert auroc(np.exp(3 * scores) + 7, labels) == pytest.approx(a, abs=1e-12)


def test_auroc_label_flip_complement():
    rng = np.random.default_rng(6)
    scores = rng.normal(size=30)  # continuous: tie-free
    labels = rng.integers(0, 2, 30)
    labels[:2] = [0, 1]
    assert auroc(scores, labels) + auroc(scores, 1 - labels) == pytest.approx(1.0, abs=1e-12)


def test_rank_and_trapezoid_agree_with_ties():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, n)
        labels[0], labels[-1] = 1, 0
        scores = rng.integers(0, 5, n) / 4.0
        assert auroc(scores, labels) == pytest.approx(
            auroc_trapezoid(scores, labels), abs=1e-12)


# ---------------------------------------------------------------------------
# simple matching coefficient


def test_smc_identity_and_hand_count():
    assert simple_matching_coefficient([1, 0, 1], [1, 0, 1]) == 1.0
    assert simple_matching_coefficient([1, 1, 0], [1, 0, 0]) == pytest.approx(2 / 3)
    assert simple_matching_coefficient([1, 0], [0, 1]) == 0.0


def test_smc_symmetric_and_hamming_complement():
    rng = np.random.default_rng(8)
    a = rng.integers(0, 2, 25)
    b = rng.integers(0, 2, 25)
    assert simple_matching_coefficient(a, b) == simple_matching_coefficient(b, a)
    hamming = np.count_nonzero(a != b) / a.size
    assert simple_matching_coefficient(a, b) == pytest.approx(1.0 - hamming)


def test_smc_length_mismatch():
    with pytest.raises(ValueError):
        simple_matching_coefficient([1, 0], [1])


# ---------------------------------------------------------------------------
# reports and K-fold aggregation


def test_report_csv_column_order():
    rep = compute_report("electricity", [0.9, 0.8, 0.7, 0.2], [1, 1, 0, 0])
    assert REPORT_HEADER == "outcome,balance,accuracy,f1,precision,recall,auroc"
    row = rep.csv_row()
    assert row.startswith("electricity,")
    assert len(row.split(",")) == len(REPORT_HEADER.split(","))


def test_report_f1_is_harmonic_mean():
    rep = compute_report("road", [0.9, 0.6, 0.55, 0.2, 0.1], [1, 0, 1, 1, 0])
    assert rep.f1 == pytest.approx(
        2 * rep.precision * rep.recall / (rep.precision + rep.recall))
    assert rep.balance == pytest.approx(3 / 5)


def test_aggregate_pools_before_computing():
    folds = [
        FoldPredictions(fold=i, geocodes=(f"g{i}a", f"g{i}b"),
                        scores=(0.9, 0.1), labels=(1, 0))
        for i in range(5)
    ]
    rep = aggregate_kfold("electricity", folds)
    assert rep.auroc == 1.0
    assert rep.n == 10


def test_aggregate_one_inverted_fold():
    folds = []
    for i in range(5):
        if i == 0:
            folds.append(FoldPredictions(i, (f"g{i}a", f"g{i}b"), (0.1, 0.9), (1, 0)))
        else:
            folds.append(FoldPredictions(i, (f"g{i}a", f"g{i}b"), (0.9, 0.1), (1, 0)))
    rep = aggregate_kfold("electricity", folds)
    assert rep.accuracy == pytest.approx(0.8)


def test_aggregate_duplicate_geocode_across_folds():
    folds = [
        FoldPredictions(0, ("g1",), (0.9,), (1,)),
        FoldPredictions(1, ("g1",), (0.1,), (0,)),
    ]
    with pytest.raises(ValueError, match="folds 0 and 1"):
        aggregate_kfold("electricity", folds)


def test_aggregate_per_fold_average_flag():
    folds = [
        FoldPredictions(0, ("a", "b"), (0.9, 0.1), (1, 0)),
        FoldPredictions(1, ("c", "d"), (0.1, 0.9), (1, 0)),
    ]
    pooled = aggregate_kfold("x", folds)
    averaged = aggregate_kfold("x", folds, per_fold_average=True)
    assert pooled.auroc == pytest.approx(0.5)
    assert averaged.auroc == pytest.approx(0.5)  # (1.0 + 0.0) / 2
    assert averaged.n == pooled.n == 4
