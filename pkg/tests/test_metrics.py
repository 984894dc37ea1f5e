import numpy as np
import pytest

from q2l.metrics import (
    EvalCounters,
    UndefinedAPError,
    ap_report,
    average_precision,
    mean_ap,
    metrics_from_counters,
    per_category_ap,
    threshold_metrics,
)


def brute_force_ap(scores, labels):
    """O(n²): for each positive, count items ranked at or above it (index tie-break)."""
    n = len(scores)
    precisions = []
    for i in range(n):
        if not labels[i]:
            continue
        above = [j for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j <= i)]
        precisions.append(sum(labels[j] for j in above) / len(above))
    return sum(precisions) / len(precisions)


def naive_threshold_metrics(probs, labels, threshold=None, top_k=None):
    n, k = probs.shape
    mc, mp, mg = [0] * k, [0] * k, [0] * k
    for i in range(n):
        if top_k is not None:
            ranked = sorted(range(k), key=lambda c: (-probs[i][c], c))[:top_k]
            pred = [c in ranked for c in range(k)]
        else:
            pred = [probs[i][c] > threshold for c in range(k)]
        for c in range(k):
            mp[c] += pred[c]
            mg[c] += bool(labels[i][c])
            mc[c] += pred[c] and bool(labels[i][c])
    op = sum(mc) / sum(mp) if sum(mp) else 0.0
    orr = sum(mc) / sum(mg) if sum(mg) else 0.0
    cp = sum(mc[c] / mp[c] if mp[c] else 0.0 for c in range(k)) / k
    cr = sum(mc[c] / mg[c] if mg[c] else 0.0 for c in range(k)) / k
    f1 = lambda a, b: 2 * a * b / (a + b) if a + b else 0.0  # noqa: E731
    return {"OP": op, "OR": orr, "OF1": f1(op, orr), "CP": cp, "CR": cr, "CF1": f1(cp, cr)}


def test_ap_hand_case():
    assert average_precision([0.9, 0.8, 0.1], [1, 0, 1]) == pytest.approx((1 + 2 / 3) / 2, abs=1e-12)
    assert average_precision([0.9, 0.8, 0.1], [1, 0, 1]) == pytest.approx(0.8333, abs=1e-4)


def test_ap_perfect_ranking():
    assert average_precision([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0


def test_ap_undefined_without_positives():
    with pytest.raises(UndefinedAPError):
        average_precision([0.1, 0.2], [0, 0])


def test_ap_brute_force_oracle(rng):
    for _ in range(200):
        n = int(rng.integers(1, 25))
        scores = rng.integers(0, 6, size=n) / 5.0  # many ties
        labels = rng.integers(0, 2, size=n)
        if labels.sum() == 0:
            labels[rng.integers(n)] = 1
        assert abs(average_precision(scores, labels) - brute_force_ap(list(scores), list(labels))) <= 1e-12


def test_mean_ap_examples():
    assert mean_ap([1.0, 0.5]) == 0.75
    assert mean_ap([0.3]) == 0.3
    assert mean_ap([0.4, np.nan, 0.6]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        mean_ap([np.nan, np.nan])


def test_ap_report_counts_undefined(rng):
    probs = rng.uniform(size=(10, 3))
    labels = rng.integers(0, 2, size=(10, 3))
    labels[:, 1] = 0
    report = ap_report(probs, labels)
    assert report.undefined == [1]
    assert report.mAP == pytest.approx(np.nanmean(report.per_category))


def test_map_invariant_to_monotone_transforms(rng):
    probs = rng.uniform(size=(40, 5))
    labels = rng.integers(0, 2, size=(40, 5))
    labels[0] = 1
    base = mean_ap(per_category_ap(probs, labels))
    transformed = probs.copy()
    transformed[:, 0] = np.exp(probs[:, 0])
    transformed[:, 1] = 3.0 * probs[:, 1] - 7.0
    transformed[:, 2] = np.log(probs[:, 2])
    assert mean_ap(per_category_ap(transformed, labels)) == pytest.approx(base, abs=1e-12)


def test_category_permutation(rng):
    probs = rng.uniform(size=(30, 6))
    labels = rng.integers(0, 2, size=(30, 6))
    labels[0] = 1
    perm = rng.permutation(6)
    ap1, ap2 = per_category_ap(probs, labels), per_category_ap(probs[:, perm], labels[:, perm])
    np.testing.assert_allclose(ap2, ap1[perm])
    a, b = threshold_metrics(probs, labels), threshold_metrics(probs[:, perm], labels[:, perm])
    assert a.OF1 == pytest.approx(b.OF1, abs=1e-12) and a.CF1 == pytest.approx(b.CF1, abs=1e-12)


def test_counter_hand_case():
    m = metrics_from_counters(EvalCounters([1, 2], [2, 2], [1, 4]))
    assert m.OP == 0.75 and m.OR == 0.6 and m.CP == 0.75 and m.CR == 0.75 and m.CF1 == 0.75
    assert m.OF1 == pytest.approx(0.6667, abs=1e-4)


def test_counter_invariant():
    with pytest.raises(ValueError):
        EvalCounters([3], [2], [5])


def test_perfect_predictions():
    labels = np.array([[1, 0, 1], [0, 1, 0], [1, 1, 0]])
    m = threshold_metrics(labels * 0.9 + 0.05, labels, threshold=0.5)
    assert all(v == 1.0 for v in m.as_dict().values())


def test_threshold_metrics_oracle(rng):
    for trial in range(200):
        probs = rng.integers(0, 11, size=(30, 8)) / 10.0
        labels = rng.integers(0, 2, size=(30, 8))
        if trial % 2:
            got, want = threshold_metrics(probs, labels, threshold=0.5), naive_threshold_metrics(probs, labels, 0.5)
        else:
            k = int(rng.integers(1, 5))
            got, want = threshold_metrics(probs, labels, top_k=k), naive_threshold_metrics(probs, labels, top_k=k)
        for key, val in want.items():
            assert abs(getattr(got, key) - val) <= 1e-12, key


def test_top_k_predicts_exactly_k(rng):
    probs = rng.uniform(size=(25, 8))
    labels = rng.integers(0, 2, size=(25, 8))
    for k in (1, 3, 8):
        m = threshold_metrics(probs, labels, top_k=k)
        assert m.counters.predicted.sum() == 25 * k


def test_f1_bounds(rng):
    for _ in range(50):
        m = threshold_metrics(rng.uniform(size=(20, 5)), rng.integers(0, 2, size=(20, 5)))
        for p, r, f in ((m.OP, m.OR, m.OF1), (m.CP, m.CR, m.CF1)):
            assert min(p, r) - 1e-12 <= f <= max(p, r) + 1e-12
            if p + r:
                assert abs(f - 2 * p * r / (p + r)) <= 1e-12


def test_division_guards():
    probs = np.array([[0.1, 0.9], [0.2, 0.8]])
    labels = np.array([[1, 1], [0, 1]])
    m = threshold_metrics(probs, labels)
    assert m.no_predictions == [0]
    assert m.CP == pytest.approx(0.5)
    m = threshold_metrics(np.full((2, 2), 0.1), labels)
    assert m.OP == 0.0 and m.OF1 == 0.0


def test_invalid_modes():
    with pytest.raises(ValueError):
        threshold_metrics(np.ones((2, 2)) * 0.5, np.ones((2, 2)), threshold=1.5)
    with pytest.raises(ValueError):
        threshold_metrics(np.ones((2, 2)) * 0.5, np.ones((2, 2)), top_k=3)
    with pytest.raises(ValueError):
        threshold_metrics(np.ones((2, 2)), np.ones((2, 3)))
