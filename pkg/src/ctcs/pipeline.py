"""Cross-validated model runs, leakage checks, model comparison and report bundles."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import boost, statlab, treeshap
from .calciomics import CLINICAL, FEATURE_NAMES, FeatureTable, extract_patient, fit_histogram_spec

METRICS = ("precision", "sensitivity", "specificity", "accuracy", "f1", "auroc", "auprc")
THRESHOLD_METRICS = ("precision", "sensitivity", "specificity", "accuracy", "f1")


class LeakageError(RuntimeError):
    pass


class FoldMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class CvConfig:
    k: int = 5
    repeats: int = 1
    stratified: bool = True
    seed: int = 0
    valid_fraction: float = 0.2
    threshold: float = 0.5
    top_k: int = 10

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if not 0 < self.valid_fraction < 1:
            raise ValueError("valid_fraction must lie in (0, 1)")
        if not 0 <= self.threshold <= 1:
            raise ValueError("threshold must lie in [0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass(frozen=True)
class ModelSpec:
    id: str
    features: tuple
    select_top_k: bool = False

    @property
    def candidates(self):
        return self.features


MODELS = {
    "M1": ModelSpec("M1", CLINICAL),
    "M2": ModelSpec("M2", CLINICAL + ("AgatstonScore2D",)),
    "M3": ModelSpec("M3", FEATURE_NAMES, select_top_k=True),
}


def model_spec(name):
    key = name.upper()
    if key not in MODELS:
        raise ValueError(f"unknown model id {name!r}; expected one of {', '.join(MODELS)}")
    return MODELS[key]


def fingerprint(ids):
    return hashlib.sha256("\n".join(sorted(ids)).encode()).hexdigest()[:16]


def kfold_split(n, labels=None, cfg=CvConfig(), repeat=0):
    """Fold id per row. Stratified folds keep per-class counts within one of each other."""
    if n < cfg.k:
        raise ValueError(f"cannot split {n} rows into {cfg.k} folds")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, repeat, 0x5EED]))
    assign = np.empty(n, dtype=np.int64)
    if cfg.stratified:
        if labels is None:
            raise ValueError("stratified split needs labels")
        y = np.asarray(labels)
        if len(y) != n:
            raise ValueError("label count does not match n")
        # deal classes in turn so fold sizes also stay within one
        seq = np.concatenate([rng.permutation(np.flatnonzero(y == c)) for c in np.unique(y)])
    else:
        seq = rng.permutation(n)
    assign[seq] = np.arange(n) % cfg.k
    if not cfg.stratified and labels is not None:
        y = np.asarray(labels)
        for f in range(cfg.k):
            if not y[assign == f].any():
                warnings.warn(f"fold {f} has no positive cases", RuntimeWarning, stacklevel=2)
    return assign


@dataclass
class FoldResult:
    repeat: int
    fold: int
    test_idx: np.ndarray
    proba: np.ndarray
    metrics: dict
    features: tuple
    model: boost.TreeEnsemble = field(repr=False)
    train_fingerprint: str = ""
    ranking: np.ndarray = None


@dataclass
class MetricsSummary:
    mean: dict
    sd: dict
    per_fold: dict
    pooled: dict
    auc_mode: str = "fold-averaged"

    def row(self, metric):
        return self.mean[metric], self.sd[metric]


@dataclass
class RunResult:
    model: ModelSpec
    patient_ids: list
    labels: np.ndarray
    folds: list
    assignments: np.ndarray
    oof: np.ndarray
    summary: MetricsSummary
    ranking: treeshap.FeatureRanking = None
    cv: CvConfig = None
    train: boost.TrainConfig = None

    @property
    def oof_pred(self):
        return (self.oof >= self.cv.threshold).astype(np.int64)


def _fold_seed(cv, repeat, fold, salt):
    return int(np.random.SeedSequence([cv.seed, repeat, fold, salt]).generate_state(1)[0] & 0x7FFFFFFF)


def _inner_split(train_idx, cv, repeat, fold):
    rng = np.random.default_rng(_fold_seed(cv, repeat, fold, 1))
    perm = rng.permutation(train_idx)
    n_val = max(1, int(round(cv.valid_fraction * len(perm))))
    return np.sort(perm[:-n_val]), np.sort(perm[-n_val:])


def _fit(X, y, fit_rows, val_rows, cfg, names):
    return boost.train(X[fit_rows], y[fit_rows], valid=(X[val_rows], y[val_rows]), cfg=cfg, feature_names=names)


def check_disjoint(fitted_on, test_ids, what):
    overlap = set(fitted_on) & set(test_ids)
    if overlap:
        raise LeakageError(f"{what} was fitted on {len(overlap)} evaluation patient(s), e.g. {sorted(overlap)[0]}")


def run_fold(table, spec, cv, train_cfg, assign, repeat, fold):
    """Fit everything for one held-out fold on its training rows and score the fold."""
    test_idx = np.flatnonzero(assign == fold)
    train_idx = np.flatnonzero(assign != fold)
    ids = table.patient_ids
    train_ids = [ids[i] for i in train_idx]
    test_ids = [ids[i] for i in test_idx]
    fp = fingerprint(train_ids)
    y = table.labels.astype(np.float64)

    if table.lesion_masses is not None:
        masses = np.concatenate([np.asarray(table.lesion_masses[i], dtype=np.float64) for i in train_idx] or [np.zeros(0)])
        hist = fit_histogram_spec(masses, fold_id=f"r{repeat}f{fold}:{fp}", fitted_on=train_ids)
        check_disjoint(hist.fitted_on, test_ids, "mass histogram")
        table = table.with_mass_hist(hist)

    fit_rows, val_rows = _inner_split(train_idx, cv, repeat, fold)
    cfg = replace(train_cfg, seed=_fold_seed(cv, repeat, fold, 2))
    ranking = None
    features = tuple(spec.features)
    if spec.select_top_k:
        Xc = table.matrix(features)
        selector = _fit(Xc, y, fit_rows, val_rows, cfg, features)
        phi, _ = treeshap.shap_values(selector, Xc[train_idx])
        ranking = np.abs(phi).mean(axis=0)
        order = np.argsort(-ranking, kind="stable")
        k = min(cv.top_k, len(features))
        # keep registry order among the selected names so training is order-stable
        features = tuple(features[i] for i in sorted(order[:k].tolist()))
    X = table.matrix(features)
    model = _fit(X, y, fit_rows, val_rows, cfg, features)
    check_disjoint(train_ids, test_ids, "trained model")
    proba = model.predict_proba(X[test_idx])
    labels = table.labels[test_idx]
    cm = statlab.classification_metrics(proba, labels, cv.threshold)
    metrics = {m: getattr(cm, m) for m in THRESHOLD_METRICS}
    single = labels.min() == labels.max()
    metrics["auroc"] = math.nan if single else statlab.auroc(proba, labels)
    metrics["auprc"] = math.nan if not labels.any() else statlab.auprc(proba, labels)
    return FoldResult(repeat, fold, test_idx, proba, metrics, features, model, fp, ranking)


def _run_fold_star(args):
    return run_fold(*args)


def _canonical(table):
    order = sorted(range(len(table)), key=lambda i: table.patient_ids[i])
    if order == list(range(len(table))):
        return table
    return table.subset(order)


def run_experiment(table, spec, cv=CvConfig(), train_cfg=boost.TrainConfig(), jobs=1):
    """k-fold (optionally repeated) evaluation of one model spec on a feature table."""
    if isinstance(spec, str):
        spec = model_spec(spec)
    table = _canonical(table)
    if len(set(table.patient_ids)) != len(table):
        raise ValueError("duplicate patient ids in feature table")
    missing = [n for n in spec.features if n not in table.names]
    if missing:
        raise KeyError(f"feature table lacks {missing[0]!r} needed by {spec.id}")
    n = len(table)
    assignments = np.stack([kfold_split(n, table.labels, cv, r) for r in range(cv.repeats)])
    tasks = [(table, spec, cv, train_cfg, assignments[r], r, f) for r in range(cv.repeats) for f in range(cv.k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            folds = list(ex.map(_run_fold_star, tasks))
    else:
        folds = [run_fold(*t) for t in tasks]

    oof = np.zeros((cv.repeats, n))
    for fr in folds:
        oof[fr.repeat, fr.test_idx] = fr.proba
    oof_mean = oof.mean(axis=0)

    per_fold = {m: np.array([fr.metrics[m] for fr in folds]) for m in METRICS}
    mean = {m: float(np.nanmean(v)) if np.isfinite(v).any() else math.nan for m, v in per_fold.items()}
    sd = {m: float(np.nanstd(v, ddof=1)) if np.isfinite(v).sum() > 1 else 0.0 for m, v in per_fold.items()}
    pooled = {"auroc": statlab.auroc(oof_mean, table.labels), "auprc": statlab.auprc(oof_mean, table.labels)}
    summary = MetricsSummary(mean, sd, per_fold, pooled)

    ranking = None
    if spec.select_top_k:
        per = np.array([fr.ranking for fr in folds])
        ranking = treeshap.FeatureRanking(tuple(spec.features), per.mean(axis=0), len(folds), per)
    return RunResult(spec, list(table.patient_ids), table.labels.copy(), folds, assignments, oof_mean, summary,
                     ranking, cv, train_cfg)


@dataclass
class Comparison:
    a: str
    b: str
    delong: statlab.DeLongResult
    mcnemar_b: int
    mcnemar_c: int
    mcnemar_chi2: float
    mcnemar_p: float


def compare_models(run_a, run_b):
    """DeLong on pooled out-of-fold scores and McNemar on thresholded predictions."""
    if run_a.patient_ids != run_b.patient_ids or not np.array_equal(run_a.assignments, run_b.assignments):
        raise FoldMismatchError("runs use different patients or fold assignments")
    y = run_a.labels
    dl = statlab.delong_test(run_a.oof, run_b.oof, y)
    ca = run_a.oof_pred == y
    cb = run_b.oof_pred == y
    b = int(np.sum(ca & ~cb))
    c = int(np.sum(~ca & cb))
    chi2, p = statlab.mcnemar(b, c)
    return Comparison(run_a.model.id, run_b.model.id, dl, b, c, chi2, p)


def _cohort_row(args):
    cohort, i = args
    plan = cohort.plans[i]
    ph = cohort.phantom(i)
    return extract_patient(plan.patient_id, plan.clinical, ph.volume, ph.mask, int(cohort.labels[i]))


def table_from_cohort(cohort, jobs=1):
    """Render and extract every patient of an in-memory synthetic cohort."""
    tasks = [(cohort, i) for i in range(len(cohort.plans))]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            patients = list(ex.map(_cohort_row, tasks, chunksize=16))
    else:
        patients = [_cohort_row(t) for t in tasks]
    return FeatureTable.from_patients(patients)


# --- report -------------------------------------------------------------------

def _r(x):
    return repr(float(x))


def _writer(path):
    fh = open(path, "w", encoding="utf-8", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def regression_table(table, names):
    """Univariable logistic fits per name, then one multivariable fit on those with p < 0.05."""
    table = _canonical(table)
    y = table.labels.astype(np.float64)
    rows = []
    significant = []
    for name in names:
        X = table.matrix([name])
        try:
            res = statlab.logistic_fit(X, y, [name])
            t = res.term(name)
            rows.append(("univariable", name, t, "ok"))
            if t.p < 0.05:
                significant.append(name)
        except (statlab.SeparationError, statlab.RankDeficientError, statlab.DegenerateVarianceError) as exc:
            rows.append(("univariable", name, None, type(exc).__name__))
    if significant:
        try:
            res = statlab.logistic_fit(table.matrix(significant), y, significant)
            rows.extend(("multivariable", n, res.term(n), "ok") for n in significant)
        except (statlab.SeparationError, statlab.RankDeficientError, statlab.DegenerateVarianceError) as exc:
            rows.extend(("multivariable", n, None, type(exc).__name__) for n in significant)
    return rows


def emit_report(runs, out_dir, table=None, comparisons=None, extra_manifest=None):
    """Write the report bundle for a list of runs sharing one fold assignment."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fh, w = _writer(out / "performance.csv")
    with fh:
        w.writerow(["model", *THRESHOLD_METRICS, "auroc", "auprc"])
        for run in runs:
            s = run.summary
            w.writerow([run.model.id, *(f"{s.mean[m]:.3f} ± {s.sd[m]:.3f}" for m in METRICS)])
    fh, w = _writer(out / "metrics.csv")
    with fh:
        w.writerow(["model", "metric", "mean", "sd", "pooled", "aucMode"])
        for run in runs:
            s = run.summary
            for m in METRICS:
                pooled = s.pooled.get(m)
                w.writerow([run.model.id, m, _r(s.mean[m]), _r(s.sd[m]), "" if pooled is None else _r(pooled),
                            s.auc_mode if m in ("auroc", "auprc") else ""])
    fh, w = _writer(out / "folds.csv")
    with fh:
        w.writerow(["model", "repeat", "fold", "trainFingerprint", *METRICS, "features"])
        for run in runs:
            for fr in run.folds:
                w.writerow([run.model.id, fr.repeat, fr.fold, fr.train_fingerprint,
                            *(_r(fr.metrics[m]) for m in METRICS), ";".join(fr.features)])
    for run in runs:
        mid = run.model.id
        fh, w = _writer(out / f"oof_{mid}.csv")
        with fh:
            w.writerow(["patientId", "label", "score", "predicted", *(f"foldR{r}" for r in range(run.cv.repeats))])
            for i, pid in enumerate(run.patient_ids):
                w.writerow([pid, int(run.labels[i]), _r(run.oof[i]), int(run.oof_pred[i]),
                            *(int(a[i]) for a in run.assignments)])
        fpr, tpr, thr = statlab.roc_curve(run.oof, run.labels)
        fh, w = _writer(out / f"roc_{mid}.csv")
        with fh:
            w.writerow(["fpr", "tpr", "threshold"])
            for row in zip(fpr, tpr, thr):
                w.writerow([_r(v) for v in row])
        rec, prec, thr = statlab.pr_curve(run.oof, run.labels)
        fh, w = _writer(out / f"pr_{mid}.csv")
        with fh:
            w.writerow(["recall", "precision", "threshold"])
            for row in zip(rec, prec, thr):
                w.writerow([_r(v) for v in row])
        if run.ranking is not None:
            run.ranking.to_csv(out / f"ranking_{mid}.csv")

    if comparisons is None:
        comparisons = [compare_models(a, b) for i, b in enumerate(runs) for a in runs[i + 1:]]
    fh, w = _writer(out / "comparisons.csv")
    with fh:
        w.writerow(["modelA", "modelB", "aucA", "aucB", "z", "delongP", "mcnemarB", "mcnemarC", "mcnemarChi2", "mcnemarP"])
        for c in comparisons:
            w.writerow([c.a, c.b, _r(c.delong.auc_a), _r(c.delong.auc_b), _r(c.delong.z), _r(c.delong.p),
                        c.mcnemar_b, c.mcnemar_c, _r(c.mcnemar_chi2), _r(c.mcnemar_p)])

    if table is not None:
        names = list(CLINICAL) + ["AgatstonScore2D"]
        for run in runs:
            if run.ranking is not None:
                names += [n for n in run.ranking.top(run.cv.top_k) if n not in names]
        names = [n for n in names if n in table.names]
        fh, w = _writer(out / "regression.csv")
        with fh:
            w.writerow(["analysis", "term", "coef", "se", "oddsRatio", "ciLow", "ciHigh", "p", "status"])
            for analysis, name, t, status in regression_table(table, names):
                if t is None:
                    w.writerow([analysis, name, "", "", "", "", "", "", status])
                else:
                    w.writerow([analysis, name, _r(t.coef), _r(t.se), _r(t.odds_ratio), _r(t.ci_low),
                                _r(t.ci_high), _r(t.p), status])

    first = runs[0]
    manifest = {
        "models": [r.model.id for r in runs],
        "cv": asdict(first.cv),
        "train": asdict(first.train),
        "registryHash": table.registry_hash if table is not None else "",
        "patients": len(first.patient_ids),
        "folds": {f"repeat{r}": first.assignments[r].tolist() for r in range(first.cv.repeats)},
        "selected": {r.model.id: [list(f.features) for f in r.folds] for r in runs},
        **(extra_manifest or {}),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out
