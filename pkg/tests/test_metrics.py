from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvad import metrics
from cvad.errors import MetricError


def pairwise_auc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def sweep(scores, labels, thresholds):
    """TPR/FPR of the rule ``score >= t`` by direct counting."""
    pos, neg = labels == 1, labels == 0
    tpr = np.array([np.sum(scores[pos] >= t) / pos.sum() for t in thresholds])
    fpr = np.array([np.sum(scores[neg] >= t) / neg.sum() for t in thresholds])
    return tpr, fpr


def exact(rate):
    # TPR/FPR are count ratios; recover them exactly so true ties compare equal
    return Fraction(float(rate)).limit_denominator(100000)


def exhaustive_gmean(curve):
    best = None
    for t, tp, fp in zip(curve.thresholds, curve.tpr, curve.fpr):
        key = (-exact(tp) * (1 - exact(fp)), fp, t)
        if best is None or key < best[0]:
            best = (key, (t, tp, fp))
    return best[1]


def random_sets(count, seed):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        rng.shuffle(labels)
        # few distinct values so ties are common
        scores = rng.integers(0, int(rng.integers(2, 30)), n) / 7.0 + labels * rng.uniform(0, 1)
        yield scores, labels


def test_hand_case():
    scores = np.array([0.1, 0.4, 0.35, 0.8])
    labels = np.array([0, 0, 1, 1])
    c = metrics.roc_curve(scores, labels)
    np.testing.assert_array_equal(c.thresholds, [-np.inf, 0.1, 0.35, 0.4, 0.8, np.inf])
    tpr, fpr = sweep(scores, labels, c.thresholds)
    np.testing.assert_array_equal(c.tpr, tpr)
    np.testing.assert_array_equal(c.fpr, fpr)
    np.testing.assert_array_equal(c.tpr, [1, 1, 1, 0.5, 0.5, 0])
    np.testing.assert_array_equal(c.fpr, [1, 1, 0.5, 0.5, 0, 0])
    assert metrics.auroc(scores, labels) == 0.75 == pairwise_auc(scores, labels)
    t, tp, fp = metrics.gmean_threshold(c)
    # (TPR, FPR) = (1, 0.5) and (0.5, 0) tie at sqrt(0.5); the lower FPR wins
    assert (t, tp, fp) == exhaustive_gmean(c) == (0.8, 0.5, 0.0)


def test_perfect_separation():
    c = metrics.roc_curve([0.9, 0.8], [1, 0])
    assert list(zip(c.fpr, c.tpr)) == [(1, 1), (1, 1), (0, 1), (0, 0)]
    assert metrics.auc_from_curve(c) == 1.0
    assert metrics.gmean_threshold(c) == (0.9, 1.0, 0.0)


def test_uninformative_scores():
    c = metrics.roc_curve([0.3] * 6, [0, 1, 0, 1, 1, 0])
    assert len(c.thresholds) == 3
    assert list(zip(c.fpr, c.tpr)) == [(1, 1), (1, 1), (0, 0)]
    assert metrics.auc_from_curve(c) == 0.5
    assert metrics.gmean_threshold(c) == (np.inf, 0.0, 0.0)


def test_single_class_errors():
    with pytest.raises(MetricError):
        metrics.roc_curve([0.1, 0.2], [1, 1])
    with pytest.raises(MetricError):
        metrics.auroc([0.1], [0, 1])
    with pytest.raises(MetricError):
        metrics.auroc([0.1, 0.2], [0, 2])


def test_auroc_matches_mann_whitney():
    for scores, labels in random_sets(1000, seed=0):
        assert abs(metrics.auroc(scores, labels) - pairwise_auc(scores, labels)) <= 1e-12


def test_gmean_matches_exhaustive_scan():
    for scores, labels in random_sets(300, seed=1):
        c = metrics.roc_curve(scores, labels)
        t, tp, fp = metrics.gmean_threshold(c)
        et, etp, efp = exhaustive_gmean(c)
        assert np.sqrt(tp * (1 - fp)) == pytest.approx(np.sqrt(etp * (1 - efp)), abs=1e-12)
        assert (t, tp, fp) == (et, etp, efp)
        i = int(np.flatnonzero(c.thresholds == t)[0])
        assert (c.tpr[i], c.fpr[i]) == (tp, fp)


def test_chance_level():
    rng = np.random.default_rng(4)
    s = rng.standard_normal(20000)
    assert abs(metrics.auroc(s, rng.integers(0, 2, 20000)) - 0.5) < 0.02


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-500, 500), st.integers(0, 1)), min_size=2, max_size=60))
def test_auroc_invariants(pairs):
    # a 0.1 grid keeps exp() strictly increasing in float64
    scores = np.array([p[0] / 10 for p in pairs])
    labels = np.array([p[1] for p in pairs])
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    a = metrics.auroc(scores, labels)
    assert 0 <= a <= 1
    assert metrics.auroc(np.exp(scores / 10), labels) == pytest.approx(a, abs=1e-12)
    assert metrics.auroc(3 * scores + 2, labels) == pytest.approx(a, abs=1e-12)
    if len(np.unique(scores)) == len(scores):
        assert a + metrics.auroc(-scores, labels) == pytest.approx(1.0, abs=1e-12)
    c = metrics.roc_curve(scores, labels)
    assert np.all(np.diff(c.tpr) <= 0) and np.all(np.diff(c.fpr) <= 0)


def reference_bootstrap(scores, labels, rounds, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < rounds:
        idx = rng.integers(0, len(scores), size=len(scores))
        s, y = scores[idx], labels[idx]
        if len(set(y)) < 2:
            continue
        t, tp, fp = exhaustive_gmean(metrics.roc_curve(s, y))
        out.append((pairwise_auc(s, y), tp, fp))
    arr = np.array(out)
    return arr.mean(axis=0), arr.std(axis=0, ddof=1)


def test_bootstrap_dual_implementation():
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 2, 200)
    scores = rng.standard_normal(200) + labels
    res = metrics.bootstrap(scores, labels, rounds=10, seed=11)
    mean, std = reference_bootstrap(scores, labels, 10, 11)
    np.testing.assert_allclose([res.auc_mean, res.tpr_mean, res.fpr_mean], mean, rtol=0, atol=1e-12)
    np.testing.assert_allclose([res.auc_std, res.tpr_std, res.fpr_std], std, rtol=0, atol=1e-12)
    again = metrics.bootstrap(scores, labels, rounds=10, seed=11)
    assert again.auc.tobytes() == res.auc.tobytes()


def test_bootstrap_redraws_single_class_rounds():
    # with one OOD sample most resamples lack it; every kept round must still have both classes
    scores, labels = np.arange(6.0), np.array([0, 0, 0, 0, 0, 1])
    res = metrics.bootstrap(scores, labels, rounds=10, seed=0)
    assert res.auc.shape == (10,)
    assert np.all(res.auc == 1.0)


def test_bootstrap_degenerate_std_zero():
    scores = np.array([0.1] * 50 + [0.9] * 50)
    labels = np.array([0] * 50 + [1] * 50)
    res = metrics.bootstrap(scores, labels, rounds=10, seed=3)
    assert res.auc_mean == 1.0 and res.auc_std == 0.0
    assert res.tpr_std == 0.0 and res.fpr_std == 0.0
    assert (res.tpr_mean, res.fpr_mean) == (1.0, 0.0)


def test_evaluate_roles_and_report(tmp_path):
    rng = np.random.default_rng(6)
    roles = ["id"] * 30 + ["intra_ood"] * 10 + ["inter_ood_1"] * 10
    labels = np.array([0] * 30 + [1] * 20)
    s_g = rng.random(50) + labels
    s_d = rng.random(50)
    cols = {"label": labels, "role": roles, "S_G": s_g, "S_D": s_d, "S": 0.5 * (s_g + s_d)}
    rows = metrics.evaluate_roles(cols, rounds=10, seed=0)
    assert [(r["score"], r["ood_role"]) for r in rows] == [
        (s, role) for role in ("inter_ood_1", "intra_ood") for s in ("S_G", "S_D", "S")]
    mask = np.array([r in ("id", "intra_ood") for r in roles])
    direct = metrics.bootstrap(s_g[mask], labels[mask], 10, 0)
    row = rows[3]
    assert row["auc_mean"] == direct.auc_mean and row["auc_std"] == direct.auc_std
    metrics.write_report(rows, tmp_path / "r.csv")
    header = (tmp_path / "r.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header == "score,ood_role,auc_mean,auc_std,tpr,tpr_std,fpr,fpr_std,threshold"
    assert metrics.read_report(tmp_path / "r.csv") == rows
    with pytest.raises(MetricError):
        metrics.evaluate_roles({**cols, "label": np.zeros(50, int)})


def test_plot_roc(tmp_path):
    c = metrics.roc_curve([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    metrics.plot_roc({"S": c}, tmp_path / "roc.png")
    assert (tmp_path / "roc.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
