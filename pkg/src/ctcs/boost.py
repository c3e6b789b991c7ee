"""Regularised gradient-boosted trees for a binary logistic objective.

Trees are grown level by level with exact greedy splits over sorted feature
values. Split gain uses L1 soft-thresholded gradient sums with L2 shrinkage and a
minimum loss reduction; early stopping tracks validation AUROC.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from . import kernels
from .statlab import auroc

MODEL_FORMAT = "ctcs-gbdt"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    max_depth: int = 3
    min_child_weight: float = 3.0
    subsample: float = 0.6
    colsample_bytree: float = 0.75
    reg_alpha: float = 0.5
    reg_lambda: float = 5.0
    gamma: float = 0.5
    max_rounds: int = 1000
    early_stopping_rounds: int = 30
    seed: int = 0
    base_margin_clip: float = 10.0

    def __post_init__(self):
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if not 0 < self.subsample <= 1 or not 0 < self.colsample_bytree <= 1:
            raise ValueError("subsample ratios must lie in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if min(self.reg_alpha, self.reg_lambda, self.gamma, self.min_child_weight) < 0:
            raise ValueError("regularisation parameters must be non-negative")
        if self.max_rounds < 0 or self.early_stopping_rounds < 1:
            raise ValueError("max_rounds must be >= 0 and early_stopping_rounds >= 1")


def soft_threshold(g, alpha):
    if g > alpha:
        return g - alpha
    if g < -alpha:
        return g + alpha
    return 0.0


def split_gain(gl, hl, gr, hr, cfg):
    lam, a = cfg.reg_lambda, cfg.reg_alpha
    sl, sr, s = soft_threshold(gl, a), soft_threshold(gr, a), soft_threshold(gl + gr, a)
    return 0.5 * (sl * sl / (hl + lam) + sr * sr / (hr + lam) - s * s / (hl + hr + lam)) - cfg.gamma


def leaf_weight(g, h, cfg):
    return -soft_threshold(g, cfg.reg_alpha) / (h + cfg.reg_lambda)


@dataclass
class Tree:
    """Array-backed binary tree; rows with ``x[feature] < threshold`` go left."""

    left: np.ndarray
    right: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    value: np.ndarray
    cover: np.ndarray
    grad: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self):
        return len(self.left)

    def is_leaf(self, i):
        return self.left[i] < 0

    def depth(self):
        stack, best = [(0, 0)], 0
        while stack:
            i, d = stack.pop()
            best = max(best, d)
            if self.left[i] >= 0:
                stack += [(int(self.left[i]), d + 1), (int(self.right[i]), d + 1)]
        return best

    def leaves(self):
        return np.flatnonzero(self.left < 0)

    def apply(self, X):
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            inner = self.left[node] >= 0
            if not inner.any():
                return node
            idx = np.flatnonzero(inner)
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] < self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])

    def predict(self, X):
        return self.value[self.apply(X)]

    def to_dict(self):
        return {
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "value": self.value.tolist(),
            "cover": self.cover.tolist(),
            "grad": self.grad.tolist(),
            "gain": self.gain.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        ints = ("left", "right", "feature")
        floats = ("threshold", "value", "cover", "grad", "gain")
        arrays = {k: np.array(d[k], dtype=np.int64) for k in ints}
        arrays.update({k: np.array(d[k], dtype=np.float64) for k in floats})
        n = len(arrays["left"])
        if n == 0 or any(len(a) != n for a in arrays.values()):
            raise ModelFormatError("tree arrays are empty or of unequal length")
        if (arrays["left"] >= n).any() or (arrays["right"] >= n).any():
            raise ModelFormatError("child index out of range")
        return cls(**arrays)

    @classmethod
    def leaf(cls, value, cover=1.0):
        return cls(
            np.array([-1]), np.array([-1]), np.array([-1]), np.zeros(1),
            np.array([float(value)]), np.array([float(cover)]), np.zeros(1), np.zeros(1),
        )


@dataclass
class TreeEnsemble:
    base_margin: float
    trees: list
    feature_count: int
    best_round: int = -1
    feature_names: tuple = None
    registry_hash: str = ""
    config: dict = field(default_factory=dict)
    log: list = field(default_factory=list)

    @property
    def active_trees(self):
        return self.trees[: self.best_round + 1]

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.feature_count:
            raise ValueError(f"expected {self.feature_count} features, got {X.shape[1]}")
        return X

    def predict_margin(self, X):
        X = self._check(X)
        margin = np.full(len(X), self.base_margin)
        for t in self.active_trees:
            margin += t.predict(X)
        return margin

    def predict_proba(self, X):
        return sigmoid(self.predict_margin(X))

    def to_json(self):
        payload = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "baseMargin": self.base_margin,
            "bestRound": self.best_round,
            "featureCount": self.feature_count,
            "featureNames": list(self.feature_names) if self.feature_names is not None else None,
            "registryHash": self.registry_hash,
            "config": self.config,
            "trees": [t.to_dict() for t in self.trees],
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"corrupt model payload: {exc}") from None
        if not isinstance(d, dict) or d.get("format") != MODEL_FORMAT:
            raise ModelFormatError("not a ctcs-gbdt model")
        if d.get("version") != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model version {d.get('version')!r}")
        try:
            trees = [Tree.from_dict(t) for t in d["trees"]]
            names = d.get("featureNames")
            return cls(
                base_margin=float(d["baseMargin"]),
                trees=trees,
                feature_count=int(d["featureCount"]),
                best_round=int(d["bestRound"]),
                feature_names=tuple(names) if names is not None else None,
                registry_hash=d.get("registryHash", ""),
                config=d.get("config", {}),
            )
        except (KeyError, TypeError) as exc:
            raise ModelFormatError(f"corrupt model payload: missing {exc}") from None


def save_model(path, ensemble):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(ensemble.to_json())
        fh.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return TreeEnsemble.from_json(fh.read())


def sigmoid(m):
    return expit(np.asarray(m, dtype=np.float64))


def log_loss(y, margin):
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


def grow_tree(X, order, grad, hess, rows, features_ok, cfg):
    """Grow one tree on the sampled ``rows``; leaf values include the learning rate."""
    n = len(X)
    node_of = np.full(n, -1, dtype=np.int32)
    node_of[rows] = 0
    left, right, feat, thr, gain = [-1], [-1], [-1], [0.0], [0.0]
    open_nodes = [0]
    totals = {}
    for depth in range(cfg.max_depth + 1):
        if depth == cfg.max_depth:
            active = node_of >= 0
            g_tot = np.bincount(node_of[active], weights=grad[active], minlength=len(open_nodes))
            h_tot = np.bincount(node_of[active], weights=hess[active], minlength=len(open_nodes))
            for k, nid in enumerate(open_nodes):
                totals[nid] = (float(g_tot[k]), float(h_tot[k]))
            break
        res = kernels.find_splits(
            X, order, grad, hess, node_of, len(open_nodes), features_ok,
            cfg.reg_lambda, cfg.reg_alpha, cfg.gamma, cfg.min_child_weight,
        )
        b_gain, b_feat, b_thr, _, _, g_tot, h_tot = res
        for k, nid in enumerate(open_nodes):
            totals[nid] = (float(g_tot[k]), float(h_tot[k]))
        next_open = []
        remap = np.full(len(open_nodes), -1, dtype=np.int32)
        go_right_map = {}
        for k, nid in enumerate(open_nodes):
            if b_feat[k] < 0 or not b_gain[k] > 0:
                continue
            l_id = len(left)
            left += [-1, -1]
            right += [-1, -1]
            feat += [-1, -1]
            thr += [0.0, 0.0]
            gain += [0.0, 0.0]
            left[nid], right[nid] = l_id, l_id + 1
            feat[nid], thr[nid], gain[nid] = int(b_feat[k]), float(b_thr[k]), float(b_gain[k])
            remap[k] = len(next_open)
            go_right_map[k] = len(next_open) + 1
            next_open += [l_id, l_id + 1]
        if not next_open:
            break
        active = np.flatnonzero(node_of >= 0)
        k_of = node_of[active]
        new = np.full(n, -1, dtype=np.int32)
        for k in range(len(open_nodes)):
            if remap[k] < 0:
                continue
            r = active[k_of == k]
            nid = open_nodes[k]
            to_left = X[r, feat[nid]] < thr[nid]
            new[r[to_left]] = remap[k]
            new[r[~to_left]] = go_right_map[k]
        node_of = new
        open_nodes = next_open

    m = len(left)
    value = np.zeros(m)
    cover = np.zeros(m)
    gsum = np.zeros(m)
    for nid in range(m):
        g, h = totals[nid]
        gsum[nid], cover[nid] = g, h
        if left[nid] < 0:
            value[nid] = cfg.learning_rate * leaf_weight(g, h, cfg)
    return Tree(
        np.array(left, dtype=np.int64), np.array(right, dtype=np.int64), np.array(feat, dtype=np.int64),
        np.array(thr), value, cover, gsum, np.array(gain),
    )


def _validate_xy(X, y):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError("empty feature table")
    if len(y) != len(X):
        raise ValueError("label count does not match row count")
    if not np.isfinite(X).all():
        raise ValueError("feature table contains NaN or infinite values")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0/1")
    return X, y


def train(X, y, valid=None, cfg=TrainConfig(), feature_names=None, registry_hash=""):
    """Fit a boosted ensemble; ``valid=(X_valid, y_valid)`` enables early stopping on AUROC."""
    X, y = _validate_xy(X, y)
    if y.min() == y.max():
        raise ValueError("degenerate labels: training data holds a single class")
    n, p = X.shape
    if feature_names is not None and len(feature_names) != p:
        raise ValueError(f"feature-count mismatch: {p} columns but {len(feature_names)} names")
    if valid is not None:
        Xv, yv = _validate_xy(*valid)
        if Xv.shape[1] != p:
            raise ValueError("validation table has a different feature count")
        if yv.min() == yv.max():
            valid = None

    mean_y = float(y.mean())
    base = float(np.clip(math.log(mean_y / (1.0 - mean_y)), -cfg.base_margin_clip, cfg.base_margin_clip))
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T.astype(np.int64))
    rng = np.random.default_rng(cfg.seed)
    n_rows = max(1, int(math.floor(cfg.subsample * n)))
    n_cols = max(1, int(math.floor(cfg.colsample_bytree * p)))

    margin = np.full(n, base)
    v_margin = np.full(len(Xv), base) if valid is not None else None
    trees, log = [], []
    best_auc, best_round = -math.inf, -1
    for rnd in range(cfg.max_rounds):
        prob = sigmoid(margin)
        grad = prob - y
        hess = prob * (1.0 - prob)
        rows = np.sort(rng.choice(n, size=n_rows, replace=False)) if cfg.subsample < 1 else np.arange(n)
        features_ok = np.zeros(p, dtype=np.uint8)
        if cfg.colsample_bytree < 1:
            features_ok[rng.choice(p, size=n_cols, replace=False)] = 1
        else:
            features_ok[:] = 1
        tree = grow_tree(X, order, grad, hess, rows, features_ok, cfg)
        trees.append(tree)
        margin += tree.predict(X)
        entry = {"round": rnd, "trainLogloss": log_loss(y, margin)}
        if valid is not None:
            v_margin += tree.predict(Xv)
            auc = auroc(v_margin, yv)
            entry["validAUC"] = auc
            if auc > best_auc:
                best_auc, best_round = auc, rnd
            elif rnd - best_round >= cfg.early_stopping_rounds:
                log.append(entry)
                break
        else:
            best_round = rnd
        log.append(entry)

    return TreeEnsemble(
        base_margin=base,
        trees=trees,
        feature_count=p,
        best_round=best_round,
        feature_names=tuple(feature_names) if feature_names is not None else None,
        registry_hash=registry_hash,
        config=asdict(cfg),
        log=log,
    )


def write_training_log(path, ensemble):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("round,trainLogloss,validAUC\n")
        for e in ensemble.log:
            auc = e.get("validAUC")
            fh.write(f"{e['round']},{e['trainLogloss']!r},{'' if auc is None else repr(auc)}\n")
