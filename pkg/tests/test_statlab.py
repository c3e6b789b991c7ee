import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from ctcs import statlab
from ctcs.statlab import (RankDeficientError, SeparationError, auprc, auroc, chi2_2x2, classification_metrics,
                          delong_test, fisher_exact, logistic_fit, mann_whitney_u, mcnemar, roc_curve, shapiro_wilk,
                          t_test)
from oracles import average_precision_sweep, pair_count_auroc

labelled = st.integers(4, 40).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 6).map(float), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda y: 0 < sum(y) < len(y))))


def test_auroc_examples():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert auroc([0.5] * 4, [0, 1, 0, 1]) == 0.5
    with pytest.raises(ValueError, match="single class"):
        auroc([0.1, 0.2], [1, 1])


@given(labelled)
def test_auroc_matches_pair_count(data):
    s, y = data
    assert auroc(s, y) == pair_count_auroc(s, y)
    assert auroc([-v for v in s], y) == pytest.approx(1 - auroc(s, y), abs=1e-15)


@given(labelled)
def test_auprc_matches_threshold_sweep(data):
    s, y = data
    assert auprc(s, y) == pytest.approx(average_precision_sweep(s, y), rel=1e-12)
    assert 0 < auprc(s, y) <= 1


@given(labelled)
def test_roc_curve_is_monotone(data):
    s, y = data
    fpr, tpr, _ = roc_curve(s, y)
    assert fpr[0] == tpr[0] == 0 and fpr[-1] == tpr[-1] == 1
    assert (np.diff(fpr) >= 0).all() and (np.diff(tpr) >= 0).all()
    assert np.trapezoid(tpr, fpr) == pytest.approx(auroc(s, y), abs=1e-12)


def test_delong_self_and_swap():
    rng = np.random.default_rng(0)
    y = (rng.random(80) < 0.4).astype(int)
    a = rng.normal(size=80) + y
    b = rng.normal(size=80) + 0.5 * y
    assert delong_test(a, a, y).p == 1.0
    ab, ba = delong_test(a, b, y), delong_test(b, a, y)
    assert ab.p == pytest.approx(ba.p, rel=1e-12) and ab.z == pytest.approx(-ba.z, rel=1e-12)


def test_classification_metrics_example():
    m = classification_metrics([0.9, 0.6, 0.4, 0.2, 0.7], [1, 0, 1, 0, 1])
    assert (m.tp, m.fp, m.fn, m.tn) == (2, 1, 1, 1)
    assert m.precision == pytest.approx(2 / 3) and m.sensitivity == pytest.approx(2 / 3)
    assert m.specificity == 0.5 and m.accuracy == 0.6
    none = classification_metrics([0.1, 0.2], [1, 0])
    assert none.precision == 0 and not none.precision_defined


def test_mcnemar():
    assert mcnemar(0, 0) == (0.0, 1.0)
    chi2, p = mcnemar(10, 4)
    assert chi2 == pytest.approx(25 / 14)
    with pytest.raises(ValueError):
        mcnemar(-1, 3)


@given(st.integers(0, 60), st.integers(0, 60))
def test_mcnemar_close_to_exact_binomial(b, c):
    if b + c < 25:
        return
    _, p = mcnemar(b, c)
    exact = stats.binomtest(b, b + c).pvalue
    assert abs(p - exact) < 0.05


def test_contingency_examples():
    assert chi2_2x2([[10, 10], [10, 10]])[0] == 0.0
    assert chi2_2x2([[10, 10], [10, 10]], yates=True)[1] == 1.0
    assert fisher_exact([[10, 10], [10, 10]]) == pytest.approx(1.0)
    assert fisher_exact([[3, 1], [1, 3]]) == pytest.approx(stats.fisher_exact([[3, 1], [1, 3]])[1], rel=1e-10)
    with pytest.raises(ValueError, match="margin"):
        chi2_2x2([[0, 0], [3, 4]])
    with pytest.raises(ValueError):
        fisher_exact([[1, -1], [2, 3]])


tables = st.tuples(*[st.integers(0, 30)] * 4).filter(lambda t: min(t[0] + t[1], t[2] + t[3], t[0] + t[2], t[1] + t[3]) > 0)


@given(tables)
def test_fisher_symmetries_and_scipy(t):
    a, b, c, d = t
    p = fisher_exact([[a, b], [c, d]])
    assert 0 < p <= 1
    for other in ([[c, d], [a, b]], [[b, a], [d, c]], [[a, c], [b, d]]):
        assert fisher_exact(other) == p
    assert p == pytest.approx(stats.fisher_exact([[a, b], [c, d]])[1], rel=1e-6, abs=1e-12)


@given(tables)
def test_yates_never_exceeds_plain(t):
    a, b, c, d = t
    assert chi2_2x2([[a, b], [c, d]], yates=True)[0] <= chi2_2x2([[a, b], [c, d]])[0] + 1e-12


def test_mann_whitney_matches_scipy():
    rng = np.random.default_rng(4)
    a, b = rng.integers(0, 10, 30), rng.integers(2, 12, 25)
    u, p = mann_whitney_u(a, b)
    ref = stats.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True)
    assert u == ref.statistic and p == pytest.approx(ref.pvalue, rel=1e-10)


def test_t_tests():
    assert t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == (0.0, 1.0)
    rng = np.random.default_rng(5)
    a, b = rng.normal(0, 1, 20), rng.normal(0.5, 2, 30)
    for pooled in (True, False):
        t, p = t_test(a, b, pooled)
        ref = stats.ttest_ind(a, b, equal_var=pooled)
        assert t == pytest.approx(ref.statistic, rel=1e-10) and p == pytest.approx(ref.pvalue, rel=1e-10)
    with pytest.raises(ValueError):
        t_test([1.0], [2.0, 3.0])


def test_shapiro_bounds():
    with pytest.raises(ValueError):
        shapiro_wilk([1.0, 2.0])
    with pytest.raises(ValueError, match="constant"):
        shapiro_wilk([3.0] * 10)
    w, p = shapiro_wilk(np.random.default_rng(0).normal(size=50))
    assert 0 < w <= 1 and p > 0.01


def test_logistic_separation_and_rank():
    x = np.arange(20.0)
    y = (x >= 10).astype(float)
    with pytest.raises(SeparationError):
        logistic_fit(x, y)
    X = np.column_stack([x, 2 * x])
    with pytest.raises(RankDeficientError, match="x2"):
        logistic_fit(X, (np.arange(20) % 3 == 0).astype(float))


def test_logistic_symmetric_data_gives_zero_slope():
    x = np.array([-2.0, -1.0, 1.0, 2.0] * 2)
    y = np.array([0, 1, 0, 1, 1, 0, 1, 0], dtype=float)
    res = logistic_fit(x, y, terms=["x"])
    assert abs(res.term("x").coef) < 1e-10 and abs(res.term("(Intercept)").coef) < 1e-10
    assert res.term("x").odds_ratio == pytest.approx(1.0)
    assert res.converged and res.max_abs_score < 1e-8


def test_logistic_ci_brackets_or():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(200, 2))
    y = (rng.random(200) < 1 / (1 + np.exp(-(0.5 + X[:, 0])))).astype(float)
    res = logistic_fit(X, y)
    for term in res.terms:
        assert term.ci_low < term.odds_ratio < term.ci_high
        assert math.exp(term.coef) == term.odds_ratio
    assert statlab.t_test_from_summary(1, 1, 10, 1, 1, 10)[1] == 1.0
