"""ctcs command line: synth, extract, run, stats, shap, compare."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import boost, calciomics, cohort, pipeline, statlab, treeshap
from .calscore import ScoringConfig
from .volgrid import ExtractionConfig, load_mask, load_volume

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SECTIONS = {
    "cohort": cohort.CohortSpec,
    "extraction": ExtractionConfig,
    "scoring": ScoringConfig,
    "cv": pipeline.CvConfig,
    "train": boost.TrainConfig,
}


class CliError(Exception):
    pass


class CheckFailed(Exception):
    pass


# --- config -------------------------------------------------------------------

def load_config(path):
    """Parse a TOML config into {section: dict}; unknown sections or keys are errors."""
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise CliError(f"{path}: {exc}") from None
    out = {}
    for section, body in raw.items():
        if section not in SECTIONS:
            raise CliError(f"{path}: unknown section [{section}]")
        if not isinstance(body, dict):
            raise CliError(f"{path}: [{section}] must be a table")
        known = {f.name for f in dataclasses.fields(SECTIONS[section])}
        for key in body:
            if key not in known:
                raise CliError(f"{path}: unknown key {key!r} in [{section}]")
        out[section] = dict(body)
    return out


def build(section, config, overrides):
    cls = SECTIONS[section]
    values = {**config.get(section, {}), **{k: v for k, v in overrides.items() if v is not None}}
    for f in dataclasses.fields(cls):
        if isinstance(f.default, tuple) and f.name in values:
            values[f.name] = tuple(values[f.name])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid [{section}] config: {exc}") from None


def write_resolved(out_dir, command, seed, **objs):
    resolved = {"command": command, "seed": seed,
                **{k: dataclasses.asdict(v) for k, v in objs.items()}}
    with open(Path(out_dir) / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def resolve_jobs(flag):
    if flag is not None:
        jobs = flag
    else:
        env = os.environ.get("CALCIOMICS_JOBS", "")
        try:
            jobs = int(env) if env else 1
        except ValueError:
            raise CliError(f"CALCIOMICS_JOBS must be an integer, got {env!r}") from None
    if jobs < 1:
        raise CliError("--jobs must be >= 1")
    return jobs


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _outdir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror}") from None
    if not os.access(out, os.W_OK):
        raise CliError(f"output directory {out} is not writable")
    return out


# --- subcommands ----------------------------------------------------------------

def cmd_synth(args):
    config = load_config(args.config)
    spec = build("cohort", config, {"n": args.n, "seed": args.seed, "prevalence": args.prevalence})
    out = _outdir(args.out)
    cohort.write_cohort(cohort.generate_cohort(spec), out)
    write_resolved(out, "synth", spec.seed, cohort=spec)
    print(f"wrote {spec.n} patients to {out}")


def _read_clinical(path):
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        raise CliError(f"missing clinical table: {path}") from None
    need = ("patientId", "label", *calciomics.CLINICAL)
    if rows and any(k not in rows[0] for k in need):
        raise CliError(f"{path}: columns must include {', '.join(need)}")
    return rows


def _extract_one(task):
    cohort_dir, row, extraction, scoring = task
    pid = row["patientId"]
    vpath = Path(cohort_dir) / "volumes" / f"{pid}.ctv"
    mpath = Path(cohort_dir) / "masks" / f"{pid}.ctm"
    if not vpath.exists():
        raise CliError(f"missing volume for {pid}: {vpath}")
    if not mpath.exists():
        raise CliError(f"missing mask for {pid}: {mpath}")
    clinical = {}
    for c in calciomics.CLINICAL:
        cell = row[c].strip()
        clinical[c] = float(cell) if cell else None
    try:
        return calciomics.extract_patient(pid, clinical, load_volume(vpath), load_mask(mpath), int(row["label"]),
                                          extraction, scoring)
    except ValueError as exc:
        raise CliError(f"{pid}: {exc}") from None


def cmd_extract(args):
    config = load_config(args.config)
    extraction = build("extraction", config, {"connectivity": args.connectivity})
    scoring = build("scoring", config, {})
    jobs = resolve_jobs(args.jobs)
    rows = _read_clinical(Path(args.cohort) / "clinical.csv")
    tasks = [(args.cohort, r, extraction, scoring) for r in rows]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            patients = list(ex.map(_extract_one, tasks, chunksize=8))
    else:
        patients = [_extract_one(t) for t in tasks]
    table = calciomics.FeatureTable.from_patients(patients)
    out = Path(args.out)
    _outdir(out.parent)
    table.to_csv(out)
    lesions = Path(args.lesions) if args.lesions else out.with_name("lesions.csv")
    table.lesions_to_csv(lesions)
    calciomics.write_registry(out.with_name("registry.json"))
    write_resolved(out.parent, "extract", None, extraction=extraction, scoring=scoring)
    print(f"wrote {len(table)} rows x {len(table.names)} features to {out}")


def _load_table(path, lesions=None):
    path = Path(path)
    if lesions is None and path.with_name("lesions.csv").exists():
        lesions = path.with_name("lesions.csv")
    try:
        return calciomics.FeatureTable.from_csv(path, lesions)
    except FileNotFoundError as exc:
        raise CliError(f"file not found: {exc.filename}") from None
    except ValueError as exc:
        raise CliError(str(exc)) from None


def cmd_run(args):
    config = load_config(args.config)
    cv = build("cv", config, {"k": args.k, "repeats": args.repeats, "seed": args.seed, "threshold": args.threshold,
                              "top_k": args.top_k, "stratified": False if args.no_stratify else None})
    train = build("train", config, {"max_rounds": args.max_rounds})
    jobs = resolve_jobs(args.jobs)
    specs = []
    for name in args.model.split(","):
        try:
            specs.append(pipeline.model_spec(name.strip()))
        except ValueError as exc:
            raise CliError(str(exc)) from None
    table = _load_table(args.features, args.lesions)
    runs = []
    for spec in specs:
        try:
            runs.append(pipeline.run_experiment(table, spec, cv, train, jobs=jobs))
        except (KeyError, ValueError) as exc:
            raise CliError(f"{spec.id}: {exc.args[0] if exc.args else exc}") from None
    out = _outdir(args.out)
    inputs = {"features": sha256_file(args.features)}
    pipeline.emit_report(runs, out, table, extra_manifest={"inputs": inputs})
    models = out / "models"
    models.mkdir(exist_ok=True)
    for run in runs:
        for fr in run.folds:
            boost.save_model(models / f"{run.model.id}_r{fr.repeat}_f{fr.fold}.json", fr.model)
    write_resolved(out, "run", cv.seed, cv=cv, train=train)
    for run in runs:
        s = run.summary
        print(f"{run.model.id}: AUROC {s.mean['auroc']:.3f} ± {s.sd['auroc']:.3f}  "
              f"AUPRC {s.mean['auprc']:.3f} ± {s.sd['auprc']:.3f}")


def _parse_counts(text):
    try:
        vals = [int(t) for t in text.split(",")]
    except ValueError:
        raise CliError(f"--table expects four comma-separated integers, got {text!r}") from None
    if len(vals) != 4 or min(vals) < 0:
        raise CliError("--table expects four non-negative counts a,b,c,d")
    return [[vals[0], vals[1]], [vals[2], vals[3]]]


def _fmt(x):
    return repr(float(x))


def stats_rows_table(table):
    chi2, p = statlab.chi2_2x2(table)
    chi2y, py = statlab.chi2_2x2(table, yates=True)
    return [("chi2", chi2, p), ("chi2_yates", chi2y, py), ("fisher_exact", math.nan, statlab.fisher_exact(table))]


def stats_rows_features(table, names):
    """Per-variable comparison of positives vs negatives."""
    y = table.labels
    rows = []
    for name in names:
        x = table.matrix([name])[:, 0]
        pos, neg = x[y == 1], x[y == 0]
        if np.isin(x, (0.0, 1.0)).all():
            t = [[int((pos == 1).sum()), int((neg == 1).sum())], [int((pos == 0).sum()), int((neg == 0).sum())]]
            try:
                rows.append((name, "chi2", *statlab.chi2_2x2(t)))
                rows.append((name, "chi2_yates", *statlab.chi2_2x2(t, yates=True)))
                rows.append((name, "fisher_exact", math.nan, statlab.fisher_exact(t)))
            except ValueError:
                rows.append((name, "fisher_exact", math.nan, math.nan))
        else:
            for label, fn in (("t_test", lambda: statlab.t_test(pos, neg)),
                              ("welch_t_test", lambda: statlab.t_test(pos, neg, pooled=False)),
                              ("mann_whitney_u", lambda: statlab.mann_whitney_u(pos, neg))):
                try:
                    rows.append((name, label, *fn()))
                except (ValueError, statlab.DegenerateVarianceError):
                    rows.append((name, label, math.nan, math.nan))
            for group, vals in (("pos", pos), ("neg", neg)):
                try:
                    rows.append((name, f"shapiro_{group}", *statlab.shapiro_wilk(vals)))
                except ValueError:
                    rows.append((name, f"shapiro_{group}", math.nan, math.nan))
    return rows


def _stats_records(args):
    if args.table is not None:
        counts = _parse_counts(args.table)
        try:
            rows = stats_rows_table(counts)
        except ValueError as exc:
            raise CliError(str(exc)) from None
        return [{"name": name, "statistic": stat, "p": p, "config": {"table": counts}} for name, stat, p in rows]
    table = _load_table(args.features)
    names = args.variables.split(",") if args.variables else list(calciomics.CLINICAL) + ["AgatstonScore2D"]
    try:
        table.column_index(names)
    except KeyError as exc:
        raise CliError(exc.args[0]) from None
    return [{"name": test, "statistic": stat, "p": p, "config": {"variable": name}}
            for name, test, stat, p in stats_rows_features(table, names)]


def cmd_stats(args):
    if (args.table is None) == (args.features is None):
        raise CliError("give exactly one of --table a,b,c,d or a features CSV")
    records = _stats_records(args)
    out = sys.stdout if args.out is None else open(args.out, "w", encoding="utf-8", newline="")
    try:
        if args.format == "json":
            clean = [{**r, **{k: None if math.isnan(r[k]) else r[k] for k in ("statistic", "p")}} for r in records]
            json.dump(clean, out, indent=2, sort_keys=True)
            out.write("\n")
            return
        w = csv.writer(out, lineterminator="\n")
        cell = lambda x: "" if math.isnan(x) else _fmt(x)
        if args.table is not None:
            w.writerow(["test", "statistic", "p"])
            for r in records:
                w.writerow([r["name"], cell(r["statistic"]), _fmt(r["p"])])
        else:
            w.writerow(["variable", "test", "statistic", "p"])
            for r in records:
                w.writerow([r["config"]["variable"], r["name"], cell(r["statistic"]), cell(r["p"])])
    finally:
        if out is not sys.stdout:
            out.close()


def cmd_shap(args):
    try:
        model = boost.load_model(args.model)
    except FileNotFoundError:
        raise CliError(f"model file not found: {args.model}") from None
    except boost.ModelFormatError as exc:
        raise CliError(str(exc)) from None
    table = _load_table(args.features)
    names = model.feature_names or table.names[: model.feature_count]
    try:
        X = table.matrix(names)
    except KeyError as exc:
        raise CliError(exc.args[0]) from None
    phi, phi0 = treeshap.shap_values(model, X)
    ranking = treeshap.FeatureRanking(tuple(names), np.abs(phi).mean(axis=0), 1, np.abs(phi).mean(axis=0)[None])
    ranking.to_csv(args.out)
    if args.values:
        treeshap.write_shap_matrix(args.values, names, table.patient_ids, phi)
    if args.check_local_accuracy:
        err = np.abs(phi0 + phi.sum(axis=1) - model.predict_margin(X))
        worst = float(err.max()) if len(err) else 0.0
        if worst > args.tolerance:
            raise CheckFailed(f"local accuracy violated: max |phi0 + sum(phi) - margin| = {worst:.3e}")
        print(f"local accuracy holds on {len(err)} rows (max error {worst:.2e})")
    print(f"top feature: {ranking.ranked()[0][0]}" if names else "no features")


def _read_oof(path):
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        raise CliError(f"file not found: {path}") from None
    if not rows or "score" not in rows[0]:
        raise CliError(f"{path}: not an out-of-fold score file")
    folds = [k for k in rows[0] if k.startswith("foldR")]
    return ([r["patientId"] for r in rows], np.array([int(r["label"]) for r in rows]),
            np.array([float(r["score"]) for r in rows]), np.array([int(r["predicted"]) for r in rows]),
            [[r[k] for k in folds] for r in rows])


def cmd_compare(args):
    ids_a, y_a, s_a, p_a, f_a = _read_oof(args.a)
    ids_b, y_b, s_b, p_b, f_b = _read_oof(args.b)
    if ids_a != ids_b or not np.array_equal(y_a, y_b) or f_a != f_b:
        raise CliError("fold mismatch: the two runs do not share patients, labels and fold assignments")
    dl = statlab.delong_test(s_a, s_b, y_a)
    ca, cb = p_a == y_a, p_b == y_b
    b, c = int(np.sum(ca & ~cb)), int(np.sum(~ca & cb))
    chi2, p = statlab.mcnemar(b, c)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["aucA", "aucB", "z", "delongP", "mcnemarB", "mcnemarC", "mcnemarChi2", "mcnemarP"])
    w.writerow([_fmt(dl.auc_a), _fmt(dl.auc_b), _fmt(dl.z), _fmt(dl.p), b, c, _fmt(chi2), _fmt(p)])


# --- parser ---------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="ctcs", description="Coronary calcium feature extraction and modelling.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom cohort")
    p.add_argument("out", help="output directory")
    p.add_argument("--config", help="TOML config ([cohort] section)")
    p.add_argument("--n", type=int)
    p.add_argument("--prevalence", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="extract the feature table from a cohort directory")
    p.add_argument("cohort")
    p.add_argument("--out", required=True, help="features CSV path")
    p.add_argument("--lesions", help="per-lesion mass CSV (default: lesions.csv beside --out)")
    p.add_argument("--config")
    p.add_argument("--connectivity", type=int, choices=(6, 18, 26))
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("run", help="cross-validate models and write a report bundle")
    p.add_argument("features")
    p.add_argument("--model", default="m1,m2,m3", help="comma-separated subset of m1,m2,m3")
    p.add_argument("--out", required=True)
    p.add_argument("--lesions")
    p.add_argument("--config")
    p.add_argument("--k", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--top-k", type=int)
    p.add_argument("--max-rounds", type=int)
    p.add_argument("--no-stratify", action="store_true")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("stats", help="group comparison tests")
    p.add_argument("features", nargs="?")
    p.add_argument("--table", help="2x2 counts a,b,c,d (row-major)")
    p.add_argument("--variables", help="comma-separated feature names")
    p.add_argument("--out")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("shap", help="rank features of a saved model by mean |SHAP|")
    p.add_argument("model")
    p.add_argument("features")
    p.add_argument("--out", required=True, help="ranking CSV")
    p.add_argument("--values", help="optional per-row SHAP matrix CSV")
    p.add_argument("--check-local-accuracy", action="store_true")
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.set_defaults(func=cmd_shap)

    p = sub.add_parser("compare", help="DeLong and McNemar tests on two out-of-fold score files")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CliError as exc:
        print(f"ctcs {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except CheckFailed as exc:
        print(f"ctcs {args.command}: check failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
