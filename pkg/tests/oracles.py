"""Slow, independent reference implementations used by the test-suite."""

import itertools
import math
from collections import deque
from fractions import Fraction

import numpy as np

from ctcs.boost import Tree, TreeEnsemble


# --- connected components -----------------------------------------------------

def neighbour_deltas(connectivity):
    out = []
    for d in itertools.product((-1, 0, 1), repeat=3):
        if d == (0, 0, 0):
            continue
        k = sum(abs(v) for v in d)
        if connectivity == 6 and k > 1 or connectivity == 18 and k > 2:
            continue
        out.append(d)
    return out


def flood_fill(hu, labels, threshold, connectivity):
    """Sorted list of (artery, frozenset of (x, y, z)) by breadth-first search."""
    nz, ny, nx = hu.shape
    cand = (hu >= threshold) & (labels > 0)
    seen = np.zeros_like(cand)
    comps = []
    deltas = neighbour_deltas(connectivity)
    for z, y, x in zip(*np.nonzero(cand)):
        if seen[z, y, x]:
            continue
        art = labels[z, y, x]
        seen[z, y, x] = True
        q = deque([(z, y, x)])
        vox = set()
        while q:
            cz, cy, cx = q.popleft()
            vox.add((int(cx), int(cy), int(cz)))
            for dz, dy, dx in deltas:
                a, b, c = cz + dz, cy + dy, cx + dx
                if 0 <= a < nz and 0 <= b < ny and 0 <= c < nx and cand[a, b, c] and not seen[a, b, c] \
                        and labels[a, b, c] == art:
                    seen[a, b, c] = True
                    q.append((a, b, c))
        comps.append((int(art), frozenset(vox)))
    return sorted(comps, key=lambda c: (c[0], sorted(c[1])))


# --- ranking metrics ------------------------------------------------------------

def pair_count_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    num = Fraction(0)
    for p in pos:
        for n in neg:
            num += 1 if p > n else Fraction(1, 2) if p == n else 0
    return float(num / (len(pos) * len(neg)))


def average_precision_sweep(scores, labels):
    """Sum over distinct thresholds of (recall step) x precision at that threshold."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    total_pos = labels.sum()
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        tp = int((pred & (labels == 1)).sum())
        recall = tp / total_pos
        ap += (recall - prev_recall) * (tp / pred.sum())
        prev_recall = recall
    return ap


def _auc_batch(S, y):
    pos, neg = S[:, y == 1], S[:, y == 0]
    gt = (pos[:, :, None] > neg[:, None, :]).sum(axis=(1, 2))
    eq = (pos[:, :, None] == neg[:, None, :]).sum(axis=(1, 2))
    return (gt + 0.5 * eq) / (pos.shape[1] * neg.shape[1])


def permutation_auc_p(a, b, y, reps=100_000, seed=0, chunk=5000):
    """Paired swap-permutation p-value for AUC(a) - AUC(b)."""
    a, b, y = np.asarray(a, float), np.asarray(b, float), np.asarray(y)
    obs = abs(_auc_batch(a[None], y)[0] - _auc_batch(b[None], y)[0])
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < reps:
        m = min(chunk, reps - done)
        swap = rng.random((m, len(y))) < 0.5
        A = np.where(swap, b, a)
        B = np.where(swap, a, b)
        d = np.abs(_auc_batch(A, y) - _auc_batch(B, y))
        hits += int((d >= obs - 1e-12).sum())
        done += m
    return hits / reps


# --- logistic regression --------------------------------------------------------

def _loglik(D, y, beta):
    eta = D @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def grid_search_logistic(X, y, radius=8.0, points=9, levels=40):
    """Coarse-to-fine coordinate-grid maximiser of the logistic likelihood (intercept first)."""
    D = np.column_stack([np.ones(len(y)), X])
    p = D.shape[1]
    center = np.zeros(p)
    step = radius / (points // 2)
    offsets = np.array(list(itertools.product(range(-(points // 2), points // 2 + 1), repeat=p)), dtype=float)
    for _ in range(levels):
        cand = center + offsets * step
        eta = cand @ D.T
        ll = (y[None, :] * eta - np.logaddexp(0.0, eta)).sum(axis=1)
        center = cand[int(np.argmax(ll))]
        step *= 0.5
        if step < 1e-9:
            break
    return center


# --- first/second order texture --------------------------------------------------

def exact_moments(values):
    """mean, sd (population), skewness, kurtosis (excess) in exact rational arithmetic."""
    v = [Fraction(int(x)) for x in values]
    n = len(v)
    mean = sum(v) / n
    m2 = sum((x - mean) ** 2 for x in v) / n
    m3 = sum((x - mean) ** 3 for x in v) / n
    m4 = sum((x - mean) ** 4 for x in v) / n
    sd = math.sqrt(m2)
    if m2 == 0:
        return float(mean), 0.0, 0.0, 0.0
    return float(mean), sd, float(m3) / float(m2) ** 1.5, float(m4 / (m2 * m2)) - 3.0


def glcm_pairs(voxels, bins, offsets):
    """Normalised symmetric co-occurrence matrix by direct pair enumeration."""
    where = {tuple(v): b for v, b in zip(map(tuple, voxels), bins)}
    P = np.zeros((8, 8))
    for v, b in where.items():
        for off in offsets:
            w = (v[0] + off[0], v[1] + off[1], v[2] + off[2])
            if w in where:
                P[b, where[w]] += 1
                P[where[w], b] += 1
    return P


def nn_bruteforce(points):
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return 0.0, 0.0
    d = []
    for i in range(len(pts)):
        d.append(min(math.dist(pts[i], pts[j]) for j in range(len(pts)) if j != i))
    return sum(d) / len(d), max(d)


# --- random ensembles -------------------------------------------------------------

def random_tree(rng, n_features, max_depth):
    left, right, feat, thr, val, cov = [], [], [], [], [], []

    def node(depth, cover):
        i = len(left)
        left.append(-1)
        right.append(-1)
        feat.append(-1)
        thr.append(0.0)
        val.append(0.0)
        cov.append(cover)
        if depth < max_depth and rng.random() < 0.75:
            feat[i] = int(rng.integers(n_features))
            thr[i] = float(rng.normal())
            share = rng.uniform(0.1, 0.9)
            left[i] = node(depth + 1, cover * share)
            right[i] = node(depth + 1, cover * (1 - share))
        else:
            val[i] = float(rng.normal(0, 0.5))
        return i

    node(0, float(rng.uniform(5, 50)))
    n = len(left)
    return Tree(np.array(left), np.array(right), np.array(feat), np.array(thr), np.array(val), np.array(cov),
                np.zeros(n), np.zeros(n))


def random_ensemble(rng, n_features=None, max_depth=None, n_trees=None):
    p = n_features or int(rng.integers(1, 7))
    depth = max_depth or int(rng.integers(1, 4))
    m = n_trees if n_trees is not None else int(rng.integers(1, 21))
    trees = [random_tree(rng, p, depth) for _ in range(m)]
    return TreeEnsemble(float(rng.normal()), trees, p, best_round=m - 1)


# --- fixtures shared with the frozen-value generator -----------------------------

def delong_fixture(i):
    """Two correlated, equally scaled score vectors on 60-100 subjects."""
    rng = np.random.default_rng(1000 + i)
    n = int(rng.integers(60, 101))
    y = (rng.random(n) < 0.35).astype(int)
    if y.sum() < 5:
        y[:5] = 1
    latent = rng.normal(size=n) + 1.0 * y
    sa, sb = rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0)
    a = latent + rng.normal(size=n) * sa
    b = latent * rng.uniform(0.3, 1.0) + rng.normal(size=n) * sb
    return (a - a.mean()) / a.std(), (b - b.mean()) / b.std(), y


def logistic_fixture(i):
    """Small two-covariate dataset (n <= 60) with a finite maximum-likelihood estimate."""
    rng = np.random.default_rng(5000 + i)
    n = int(rng.integers(25, 61))
    X = np.column_stack([rng.normal(size=n), rng.normal(1.0, 2.0, size=n)])
    eta = 0.3 + 0.8 * X[:, 0] - 0.4 * X[:, 1]
    y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    return X, y
