"""Statistical engine: ROC/PR analysis, DeLong and McNemar comparisons,
logistic regression with Wald odds-ratio intervals, and the univariate test battery."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import expit


class SeparationError(RuntimeError):
    """Maximum likelihood estimate does not exist (complete or quasi-complete separation)."""


class RankDeficientError(ValueError):
    pass


class DegenerateVarianceError(RuntimeError):
    pass


def _binary_labels(labels):
    y = np.asarray(labels)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    y = y.astype(np.int64)
    n1 = int(y.sum())
    if n1 == 0 or n1 == len(y):
        raise ValueError("labels contain a single class")
    return y


# --- ROC / PR -----------------------------------------------------------------

def _mann_whitney_numerator(scores, y):
    """Sum over positive/negative pairs of 1 (concordant) + 1/2 (tied); exact half-integer."""
    ranks = stats.rankdata(scores)
    n1 = int(y.sum())
    return float(ranks[y == 1].sum()) - n1 * (n1 + 1) / 2.0


def auroc(scores, labels):
    """Tie-corrected Mann-Whitney AUROC: (#concordant + 0.5 #tied) / (n1 n0)."""
    y = _binary_labels(labels)
    s = np.asarray(scores, dtype=np.float64)
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    n1 = int(y.sum())
    return _mann_whitney_numerator(s, y) / (n1 * (len(y) - n1))


def roc_curve(scores, labels):
    """(fpr, tpr, thresholds) with one point per distinct score plus the (0, 0) origin."""
    y = _binary_labels(labels)
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    n1, n0 = int(y.sum()), len(y) - int(y.sum())
    fpr = np.r_[0.0, fp / n0]
    tpr = np.r_[0.0, tp / n1]
    thr = np.r_[np.inf, s[last]]
    return fpr, tpr, thr


def pr_curve(scores, labels):
    """(recall, precision, thresholds) evaluated at each distinct-score block."""
    y = _binary_labels(labels)
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), len(s) - 1]
    tp = np.cumsum(y)[last]
    predicted = last + 1
    return tp / int(y.sum()), tp / predicted, s[last]


def auprc(scores, labels):
    """Average precision with tied scores treated as one atomic block."""
    recall, precision, _ = pr_curve(scores, labels)
    steps = np.diff(np.r_[0.0, recall])
    return float((steps * precision).sum())


def delong_components(scores, labels):
    """Placement values (V10 over positives, V01 over negatives) and the exact AUROC."""
    y = _binary_labels(labels)
    s = np.asarray(scores, dtype=np.float64)
    pos, neg = s[y == 1], s[y == 0]
    n1, n0 = len(pos), len(neg)
    r_all = stats.rankdata(s)
    r_pos = stats.rankdata(pos)
    r_neg = stats.rankdata(neg)
    # count of negatives below each positive, ties counted as 1/2
    neg_below = r_all[y == 1] - r_pos
    pos_below = r_all[y == 0] - r_neg
    auc = float(neg_below.sum()) / (n1 * n0)
    return neg_below / n0, 1.0 - pos_below / n1, auc


@dataclass
class DeLongResult:
    auc_a: float
    auc_b: float
    z: float
    p: float
    var_diff: float


def delong_test(scores_a, scores_b, labels):
    """Two-sided DeLong test for the difference of two correlated AUROCs."""
    y = _binary_labels(labels)
    if len(scores_a) != len(y) or len(scores_b) != len(y):
        raise ValueError("paired scores must match the label vector")
    v10a, v01a, auc_a = delong_components(scores_a, y)
    v10b, v01b, auc_b = delong_components(scores_b, y)
    n1, n0 = len(v10a), len(v01a)
    s10 = np.cov(np.vstack([v10a, v10b])) if n1 > 1 else np.zeros((2, 2))
    s01 = np.cov(np.vstack([v01a, v01b])) if n0 > 1 else np.zeros((2, 2))
    var = (s10[0, 0] + s10[1, 1] - 2 * s10[0, 1]) / n1 + (s01[0, 0] + s01[1, 1] - 2 * s01[0, 1]) / n0
    diff = auc_a - auc_b
    if var <= 0:
        if diff == 0:
            return DeLongResult(auc_a, auc_b, 0.0, 1.0, 0.0)
        raise DegenerateVarianceError("AUROCs differ but the variance of their difference is zero")
    z = diff / math.sqrt(var)
    return DeLongResult(auc_a, auc_b, z, float(min(1.0, 2 * stats.norm.sf(abs(z)))), float(var))


def auprc_bootstrap_test(scores_a, scores_b, labels, n_boot=2000, seed=0):
    """Paired bootstrap comparison of AUPRC; returns (diff, se, z, p)."""
    y = _binary_labels(labels)
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    rng = np.random.default_rng(seed)
    diffs = []
    n = len(y)
    while len(diffs) < n_boot:
        idx = rng.integers(0, n, n)
        yb = y[idx]
        if yb.min() == yb.max():
            continue
        diffs.append(auprc(a[idx], yb) - auprc(b[idx], yb))
    diff = auprc(a, y) - auprc(b, y)
    se = float(np.std(diffs, ddof=1))
    if se == 0:
        return diff, 0.0, 0.0, 1.0
    z = diff / se
    return diff, se, z, float(min(1.0, 2 * stats.norm.sf(abs(z))))


# --- thresholded metrics ------------------------------------------------------

@dataclass
class ClassificationMetrics:
    precision: float
    sensitivity: float
    specificity: float
    accuracy: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    precision_defined: bool = True


def classification_metrics(proba, labels, threshold=0.5):
    """Confusion-matrix metrics for ``proba >= threshold`` predicted positive."""
    y = np.asarray(labels).astype(np.int64)
    pred = np.asarray(proba, dtype=np.float64) >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    defined = tp + fp > 0
    precision = tp / (tp + fp) if defined else 0.0
    sens = tp / (tp + fn) if tp + fn else 0.0
    spec = tn / (tn + fp) if tn + fp else 0.0
    f1 = 2 * precision * sens / (precision + sens) if precision + sens else 0.0
    return ClassificationMetrics(precision, sens, spec, (tp + tn) / len(y), f1, tp, fp, fn, tn, defined)


# --- paired / contingency tests -----------------------------------------------

def mcnemar(b, c, corrected=True):
    """McNemar chi-square on discordant counts; p = 1 when there are none."""
    if b < 0 or c < 0:
        raise ValueError("discordant counts must be non-negative")
    if b + c == 0:
        return 0.0, 1.0
    diff = abs(b - c)
    if corrected:
        diff = max(diff - 1, 0)
    chi2 = diff * diff / (b + c)
    return float(chi2), float(stats.chi2.sf(chi2, 1))


def _table(table):
    t = np.asarray(table, dtype=np.int64)
    if t.shape != (2, 2) or (t < 0).any():
        raise ValueError("expected a 2x2 table of non-negative counts")
    if (t.sum(axis=0) == 0).any() or (t.sum(axis=1) == 0).any():
        raise ValueError("2x2 table has an empty margin")
    return t


def chi2_2x2(table, yates=False):
    t = _table(table).astype(np.float64)
    n = t.sum()
    expected = np.outer(t.sum(axis=1), t.sum(axis=0)) / n
    dev = np.abs(t - expected)
    if yates:
        dev = np.maximum(dev - 0.5, 0.0)
    chi2 = float((dev * dev / expected).sum())
    return chi2, float(stats.chi2.sf(chi2, 1))


def _log_hypergeom(a, r1, r2, c1):
    b = r1 - a
    c = c1 - a
    d = r2 - c
    lg = math.lgamma
    return (lg(r1 + 1) + lg(r2 + 1) + lg(c1 + 1) + lg(r1 + r2 - c1 + 1) - lg(r1 + r2 + 1)
            - lg(a + 1) - lg(b + 1) - lg(c + 1) - lg(d + 1))


def fisher_exact(table):
    """Two-sided Fisher exact p: total probability of tables no more likely than observed."""
    t = _table(table)
    # evaluate one canonical orientation so row/column swaps and transposition give identical bits
    t = min((w for v in (t, t.T) for w in (v, v[::-1], v[:, ::-1], v[::-1, ::-1])),
            key=lambda v: v.ravel().tolist())
    r1, r2 = int(t[0].sum()), int(t[1].sum())
    c1 = int(t[:, 0].sum())
    lo, hi = max(0, c1 - r2), min(r1, c1)
    logp = np.array([_log_hypergeom(a, r1, r2, c1) for a in range(lo, hi + 1)])
    obs = logp[int(t[0, 0]) - lo]
    probs = np.exp(logp - logp.max())
    keep = logp <= obs + 1e-7
    return float(min(1.0, probs[keep].sum() / probs.sum()))


def mann_whitney_u(a, b):
    """U for sample ``a``; two-sided normal approximation with tie and continuity corrections."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be non-empty")
    ranks = stats.rankdata(np.r_[a, b])
    u = float(ranks[:n1].sum()) - n1 * (n1 + 1) / 2.0
    n = n1 + n2
    _, counts = np.unique(ranks, return_counts=True)
    tie = float((counts ** 3 - counts).sum())
    var = n1 * n2 / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    if var <= 0:
        return u, 1.0
    z = (abs(u - n1 * n2 / 2.0) - 0.5) / math.sqrt(var)
    return u, float(min(1.0, 2 * stats.norm.sf(z)))


def t_test(a, b, pooled=True):
    """Independent two-sample t-test (Student pooled or Welch)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise ValueError("each sample needs at least two observations")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    diff = a.mean() - b.mean()
    if pooled:
        df = na + nb - 2
        sp2 = ((na - 1) * va + (nb - 1) * vb) / df
        se = math.sqrt(sp2 * (1 / na + 1 / nb))
    else:
        se2 = va / na + vb / nb
        se = math.sqrt(se2)
        df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1)) if se2 > 0 else na + nb - 2
    if se == 0:
        return (0.0, 1.0) if diff == 0 else (math.copysign(math.inf, diff), 0.0)
    t = diff / se
    return float(t), float(min(1.0, 2 * stats.t.sf(abs(t), df)))


def t_test_from_summary(mean_a, sd_a, n_a, mean_b, sd_b, n_b):
    """Pooled t-test from group summaries (when only means, SDs and counts are available)."""
    df = n_a + n_b - 2
    sp2 = ((n_a - 1) * sd_a ** 2 + (n_b - 1) * sd_b ** 2) / df
    t = (mean_a - mean_b) / math.sqrt(sp2 * (1 / n_a + 1 / n_b))
    return t, float(2 * stats.t.sf(abs(t), df))


def shapiro_wilk(x):
    """Shapiro-Wilk W and p (Royston's approximation), valid for 3 <= n <= 5000."""
    x = np.asarray(x, dtype=np.float64)
    if not 3 <= len(x) <= 5000:
        raise ValueError(f"Shapiro-Wilk requires 3 <= n <= 5000, got n = {len(x)}")
    if np.ptp(x) == 0:
        raise ValueError("Shapiro-Wilk is undefined for constant data")
    res = stats.shapiro(x)
    return float(res.statistic), float(res.pvalue)


# --- logistic regression ------------------------------------------------------

@dataclass
class Term:
    name: str
    coef: float
    se: float
    odds_ratio: float
    ci_low: float
    ci_high: float
    p: float


@dataclass
class RegressionResult:
    terms: list
    log_likelihood: float
    iterations: int
    converged: bool
    max_abs_score: float
    n: int
    events: int
    extra: dict = field(default_factory=dict)

    def term(self, name):
        for t in self.terms:
            if t.name == name:
                return t
        raise KeyError(name)

    @property
    def coef(self):
        return np.array([t.coef for t in self.terms])


def _loglik(X, y, beta):
    eta = X @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _polish(D, y, beta, steps=5):
    # plain Newton steps from inside the quadratic basin drive the score below 1e-8
    for _ in range(steps):
        p = expit(D @ beta)
        score = D.T @ (y - p)
        if np.max(np.abs(score)) < 1e-8:
            break
        info = (D * (p * (1 - p))[:, None]).T @ D
        beta = beta + np.linalg.solve(info, score)
    return beta


def _check_rank(X, names):
    scale = X.std(axis=0)
    scale[0] = 1.0
    Z = X.copy()
    nz = scale > 0
    Z[:, 1:] = (X[:, 1:] - X[:, 1:].mean(axis=0))
    Z[:, nz] /= scale[nz]
    rank = 0
    for j in range(Z.shape[1]):
        r = np.linalg.matrix_rank(Z[:, : j + 1])
        if r <= rank:
            raise RankDeficientError(f"design matrix is rank deficient: term {names[j]!r} is collinear with earlier terms")
        rank = r


def logistic_fit(X, y, terms=None, max_iter=100, sep_limit=15.0):
    """Newton-Raphson maximum likelihood with an intercept; Wald SEs, ORs and 95% CIs."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("y must be binary")
    if y.min() == y.max():
        raise ValueError("y contains a single class")
    n, k = X.shape
    if terms is None:
        terms = [f"x{j + 1}" for j in range(k)]
    if len(terms) != k:
        raise ValueError("term names do not match the design columns")
    names = ["(Intercept)", *terms]
    D = np.column_stack([np.ones(n), X])
    _check_rank(D, names)
    sd = D.std(axis=0)
    sd[0] = 1.0

    beta = np.zeros(k + 1)
    beta[0] = math.log(y.mean() / (1 - y.mean()))
    ll = _loglik(D, y, beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(D @ beta)
        score = D.T @ (y - p)
        info = (D * (p * (1 - p))[:, None]).T @ D
        if np.max(np.abs(score)) < 1e-8:
            converged = True
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise SeparationError("information matrix became singular (separation)") from None
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new = _loglik(D, y, cand)
            if ll_new >= ll or t < 1e-10:
                break
            t *= 0.5
        rel = abs(ll_new - ll) / (abs(ll) + 1e-300)
        beta, ll = cand, ll_new
        if np.any(np.abs(beta * sd) > sep_limit):
            raise SeparationError("coefficients diverge: complete or quasi-complete separation")
        if rel < 1e-10:
            beta = _polish(D, y, beta)
            converged = True
            break
    if not converged:
        raise SeparationError(f"Newton iterations did not converge in {max_iter} steps")
    p = expit(D @ beta)
    score = D.T @ (y - p)
    info = (D * (p * (1 - p))[:, None]).T @ D
    cov = np.linalg.inv(info)
    se = np.sqrt(np.diag(cov))
    out = []
    for name, b, s in zip(names, beta, se):
        z = b / s
        out.append(Term(name, float(b), float(s), math.exp(b), math.exp(b - 1.96 * s), math.exp(b + 1.96 * s),
                        float(2 * stats.norm.sf(abs(z)))))
    return RegressionResult(out, ll, it, converged, float(np.max(np.abs(score))), n, int(y.sum()))
