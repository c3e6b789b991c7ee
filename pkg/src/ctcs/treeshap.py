"""Exact path-dependent Shapley attributions for boosted tree ensembles,
a subset-enumeration reference, and cross-fold mean-|SHAP| feature ranking."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import kernels


class ModelIntegrityError(ValueError):
    pass


@dataclass
class Attribution:
    phi: np.ndarray
    phi0: float

    @property
    def total(self):
        return self.phi0 + float(self.phi.sum())


def _flatten(trees):
    """Concatenate tree arrays with global child indices; check covers."""
    left, right, feat, thr, val, cov, roots = [], [], [], [], [], [], []
    offset = 0
    for t in trees:
        n = t.n_nodes
        inner = t.left >= 0
        if (t.cover <= 0).any():
            raise ModelIntegrityError("tree has a node with non-positive cover")
        roots.append(offset)
        left.append(np.where(inner, t.left + offset, -1))
        right.append(np.where(inner, t.right + offset, -1))
        feat.append(t.feature)
        thr.append(t.threshold)
        val.append(t.value)
        cov.append(t.cover)
        offset += n
    if not roots:
        empty_i = np.zeros(0, dtype=np.int64)
        empty_f = np.zeros(0)
        return empty_i, empty_i, empty_i, empty_f, empty_f, empty_f, empty_i
    cat = lambda xs, dt: np.ascontiguousarray(np.concatenate(xs), dtype=dt)  # noqa: E731
    return (cat(left, np.int64), cat(right, np.int64), cat(feat, np.int64), cat(thr, np.float64),
            cat(val, np.float64), cat(cov, np.float64), np.array(roots, dtype=np.int64))


def tree_expectation(tree, node=0):
    """Cover-weighted mean leaf value below ``node``."""
    if tree.left[node] < 0:
        return float(tree.value[node])
    l, r = int(tree.left[node]), int(tree.right[node])
    return (tree.cover[l] * tree_expectation(tree, l) + tree.cover[r] * tree_expectation(tree, r)) / tree.cover[node]


def expected_margin(ensemble):
    return ensemble.base_margin + sum(tree_expectation(t) for t in ensemble.active_trees)


def shap_values(ensemble, X):
    """Per-row attributions in margin units; returns (phi [n, p], phi0)."""
    X = np.ascontiguousarray(ensemble._check(X), dtype=np.float64)
    trees = ensemble.active_trees
    if not trees:
        return np.zeros(X.shape), float(ensemble.base_margin)
    flat = _flatten(trees)
    phi = kernels.tree_shap(*flat, X)
    return phi, expected_margin(ensemble)


def shap_row(ensemble, x):
    phi, phi0 = shap_values(ensemble, np.asarray(x)[None, :])
    return Attribution(phi[0], phi0)


def _conditional_value(tree, x, known, node=0):
    if tree.left[node] < 0:
        return float(tree.value[node])
    f = int(tree.feature[node])
    l, r = int(tree.left[node]), int(tree.right[node])
    if known[f]:
        return _conditional_value(tree, x, known, l if x[f] < tree.threshold[node] else r)
    return (tree.cover[l] * _conditional_value(tree, x, known, l)
            + tree.cover[r] * _conditional_value(tree, x, known, r)) / tree.cover[node]


def brute_force_shap(ensemble, x):
    """Shapley values by enumerating every feature subset (reference implementation)."""
    x = np.asarray(x, dtype=np.float64)
    m = ensemble.feature_count
    if m > 12:
        raise ValueError("subset enumeration is limited to 12 features")
    trees = ensemble.active_trees
    for t in trees:
        if (t.cover <= 0).any():
            raise ModelIntegrityError("tree has a node with non-positive cover")
    value = {}
    for mask in range(1 << m):
        known = [(mask >> j) & 1 == 1 for j in range(m)]
        value[mask] = ensemble.base_margin + sum(_conditional_value(t, x, known) for t in trees)
    phi = np.zeros(m)
    fact = [math.factorial(i) for i in range(m + 1)]
    for i in range(m):
        others = [j for j in range(m) if j != i]
        for size in range(m):
            w = fact[size] * fact[m - size - 1] / fact[m]
            for subset in itertools.combinations(others, size):
                mask = 0
                for j in subset:
                    mask |= 1 << j
                phi[i] += w * (value[mask | (1 << i)] - value[mask])
    return Attribution(phi, value[0])


@dataclass
class FeatureRanking:
    names: tuple
    mean_abs_shap: np.ndarray
    fold_count: int
    per_fold: np.ndarray

    @property
    def order(self):
        # stable sort keeps registry order among equal values
        return np.argsort(-self.mean_abs_shap, kind="stable")

    def ranked(self):
        return [(self.names[i], float(self.mean_abs_shap[i])) for i in self.order]

    def top(self, k):
        if k > len(self.names):
            raise ValueError(f"k = {k} exceeds the {len(self.names)} available features")
        return [self.names[i] for i in self.order[:k]]

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["name", "meanAbsShap", "rank"])
            for rank, (name, v) in enumerate(self.ranked(), start=1):
                w.writerow([name, repr(v), rank])


def rank_features(fold_models, fold_data, names):
    """Average over folds of each fold's mean |phi| on that fold's rows."""
    if len(fold_models) != len(fold_data) or not fold_models:
        raise ValueError("need one data matrix per fold model")
    per_fold = []
    for model, X in zip(fold_models, fold_data):
        phi, _ = shap_values(model, X)
        per_fold.append(np.abs(phi).mean(axis=0) if len(phi) else np.zeros(model.feature_count))
    per_fold = np.array(per_fold)
    return FeatureRanking(tuple(names), per_fold.mean(axis=0), len(fold_models), per_fold)


def rank_and_select(fold_models, fold_data, k, names):
    ranking = rank_features(fold_models, fold_data, names)
    return ranking, ranking.top(k)


def write_shap_matrix(path, names, patient_ids, phi, fold=None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patientId", *([] if fold is None else ["fold"]), *names])
        for i, pid in enumerate(patient_ids):
            w.writerow([pid, *([] if fold is None else [fold[i]]), *(repr(float(v)) for v in phi[i])])
