"""Calcium-omics feature registry and per-patient feature extraction.

Features are organised at four scales: clinical pass-through, whole heart,
per artery, and aggregates over lesion-level descriptors. Statistics that are
undefined for an empty set (no lesions in an artery, say) are emitted as 0 and
paired with a ``calcPresent.<artery>`` flag, so tables never hold NaN.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import calscore
from .volgrid import ARTERIES, ExtractionConfig, extract_lesions, normalize_hu

REGISTRY_VERSION = "ctcs-calciomics-1"
CLINICAL = ("age", "female", "diabetes", "smoking")
GLCM_OFFSETS = ((1, 0, 0), (0, 1, 0), (0, 0, 1))
HU_RANGE = (130.0, 1024.0)
MASS_BINS = 5
HU_HIST_BINS = 8


class MissingClinicalError(ValueError):
    pass


# --- lesion-level descriptors -------------------------------------------------

def first_order(values):
    """min, max, mean, population sd, Fisher skewness, excess kurtosis, energy."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        return dict.fromkeys(("min", "max", "mean", "sd", "skewness", "kurtosis", "energy"), 0.0)
    mean = x.sum() / x.size
    d = x - mean
    m2 = float((d * d).sum() / x.size)
    m3 = float((d * d * d).sum() / x.size)
    m4 = float((d * d * d * d).sum() / x.size)
    if m2 > 0:
        skew = m3 / m2 ** 1.5
        kurt = m4 / (m2 * m2) - 3.0
    else:
        skew = kurt = 0.0
    nrm = normalize_hu(x)
    return {
        "min": float(x.min()),
        "max": float(x.max()),
        "mean": float(mean),
        "sd": math.sqrt(m2),
        "skewness": skew,
        "kurtosis": kurt,
        "energy": float((nrm * nrm).sum()),
    }


def lesion_first_order(lesion):
    return first_order(lesion.hu)


def hu_bin(hu, bins=HU_HIST_BINS, lo=HU_RANGE[0], hi=HU_RANGE[1]):
    """Equal-width bin index over [lo, hi]; values outside are clamped to the end bins."""
    b = np.floor((np.asarray(hu, dtype=np.float64) - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(b, 0, bins - 1)


def glcm_matrix(lesion, bins=8, offsets=GLCM_OFFSETS):
    """Symmetric, normalised co-occurrence matrix over intra-lesion voxel pairs."""
    binned = hu_bin(lesion.hu, bins)
    where = {tuple(v): b for v, b in zip(lesion.voxels.tolist(), binned.tolist())}
    P = np.zeros((bins, bins))
    for (x, y, z), b in where.items():
        for ox, oy, oz in offsets:
            nb = where.get((x + ox, y + oy, z + oz))
            if nb is not None:
                P[b, nb] += 1
                P[nb, b] += 1
    total = P.sum()
    if total == 0:
        P[binned[0], binned[0]] = 1.0
        return P
    return P / total


def glcm_features(P):
    n = P.shape[0]
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    mu_i = float((i * P).sum())
    mu_j = float((j * P).sum())
    sd_i = math.sqrt(float(((i - mu_i) ** 2 * P).sum()))
    sd_j = math.sqrt(float(((j - mu_j) ** 2 * P).sum()))
    if sd_i > 0 and sd_j > 0:
        corr = float(((i - mu_i) * (j - mu_j) * P).sum()) / (sd_i * sd_j)
    else:
        corr = 1.0
    return {
        "contrast": float(((i - j) ** 2 * P).sum()),
        "correlation": corr,
        "energy": float((P * P).sum()),
        "homogeneity": float((P / (1.0 + (i - j) ** 2)).sum()),
    }


def lesion_second_order(lesion, bins=8, offsets=GLCM_OFFSETS):
    return glcm_features(glcm_matrix(lesion, bins, offsets))


def lesion_shape(lesion):
    spacing = np.asarray(lesion.spacing)
    pts = lesion.voxels * spacing
    n = len(pts)
    mins = lesion.voxels.min(axis=0)
    maxs = lesion.voxels.max(axis=0)
    bbox = int(np.prod(maxs - mins + 1))
    max_area = max(lesion.per_slice_area.values())
    if n < 2:
        return {"voxelCount": n, "maxSliceArea": max_area, "elongation": 1.0, "flatness": 1.0, "bboxFill": n / bbox}
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / n
    lam = np.sort(np.clip(np.linalg.eigvalsh(cov), 0.0, None))[::-1]
    # eigvalsh leaves round-off at the 1e-16 relative level
    lam[lam < lam[0] * 1e-12] = 0.0
    if lam[0] <= 0:
        elong = flat = 1.0
    else:
        elong = math.sqrt(lam[1] / lam[0])
        flat = math.sqrt(lam[2] / lam[0])
    return {"voxelCount": n, "maxSliceArea": max_area, "elongation": elong, "flatness": flat, "bboxFill": n / bbox}


def spatial_relations(lesions):
    """Nearest-neighbour centroid distances and bounding-frame relative positions (mm)."""
    if not lesions:
        return {"meanNNdist": 0.0, "maxNNdist": 0.0, "centroidSpread": 0.0, "relPosition.mean": 0.0, "relPosition.max": 0.0}
    cents = np.array([l.centroid for l in lesions])
    if len(cents) >= 2:
        diff = cents[:, None, :] - cents[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=2))
        np.fill_diagonal(dist, np.inf)
        nn = dist.min(axis=1)
        mean_nn, max_nn = float(nn.mean()), float(nn.max())
    else:
        mean_nn = max_nn = 0.0
    centre = cents.mean(axis=0)
    off = np.sqrt(((cents - centre) ** 2).sum(axis=1))
    vox = np.concatenate([l.voxels for l in lesions])
    spacing = np.asarray(lesions[0].spacing)
    diag = float(np.sqrt((((vox.max(axis=0) - vox.min(axis=0) + 1) * spacing) ** 2).sum()))
    rel = off / diag
    return {
        "meanNNdist": mean_nn,
        "maxNNdist": max_nn,
        "centroidSpread": float(np.sqrt((off * off).mean())),
        "relPosition.mean": float(rel.mean()),
        "relPosition.max": float(rel.max()),
    }


def hu_histogram(values, bins=HU_HIST_BINS):
    values = np.asarray(values)
    if values.size == 0:
        return np.zeros(bins)
    counts = np.bincount(hu_bin(values, bins), minlength=bins)
    return counts / values.size


def artery_heart_aggregates(lesions):
    """Pooled-HU statistics per artery and for the heart, lesion counts, HU histogram."""
    out = {}
    for code, name in ARTERIES.items():
        mine = [l for l in lesions if l.artery == code]
        pooled = np.concatenate([l.hu for l in mine]) if mine else np.zeros(0)
        out[name] = {"present": float(bool(mine)), "lesionCount": float(len(mine)), **first_order(pooled)}
    pooled = np.concatenate([l.hu for l in lesions]) if lesions else np.zeros(0)
    out["heart"] = {"lesionCount": float(len(lesions)), **first_order(pooled), "hist": hu_histogram(pooled)}
    return out


# --- mass histogram -----------------------------------------------------------

@dataclass(frozen=True)
class HistogramSpec:
    """Lesion-mass bin edges fitted on one training fold.

    ``fitted_on`` holds the patient ids whose lesions determined the edges;
    the pipeline refuses to evaluate on any of them.
    """

    edges: tuple
    fold_id: str = "all"
    fitted_on: frozenset = frozenset()

    def __post_init__(self):
        e = self.edges
        if len(e) != MASS_BINS + 1 or e[0] != 0 or e[-1] != math.inf:
            raise ValueError("edges must be 6 values from 0 to +inf")
        if any(b <= a for a, b in zip(e, e[1:])):
            raise ValueError("edges must be strictly ascending")


def fit_histogram_spec(masses, fold_id="all", fitted_on=()):
    masses = np.asarray(masses, dtype=np.float64)
    if masses.size:
        inner = np.quantile(masses, [0.2, 0.4, 0.6, 0.8]).tolist()
    else:
        inner = [0.0] * 4
    edges = [0.0]
    for q in inner:
        edges.append(q if q > edges[-1] else float(np.nextafter(edges[-1], math.inf)))
    edges.append(math.inf)
    return HistogramSpec(tuple(edges), fold_id, frozenset(fitted_on))


def mass_hist(masses, spec):
    """Lesion counts per mass bin; bin i holds edges[i] <= mass < edges[i+1]."""
    masses = np.asarray(masses, dtype=np.float64)
    idx = np.searchsorted(np.asarray(spec.edges), masses, side="right") - 1
    return np.bincount(np.clip(idx, 0, MASS_BINS - 1), minlength=MASS_BINS).astype(np.float64)


# --- registry -----------------------------------------------------------------

LESION_AGGREGATES = (
    ("lesionVolume.mean", "mean lesion volume (mm^3)"),
    ("lesionVolume.max", "largest lesion volume (mm^3)"),
    ("lesionPeakHU.mean", "mean of lesion peak HU"),
    ("lesionPeakHU.max", "maximum lesion peak HU"),
    ("lesionMinHU.mean", "mean of lesion minimum HU"),
    ("lesionMeanHU.mean", "mean of lesion mean HU"),
    ("lesionHUsd.mean", "mean of lesion HU standard deviation"),
    ("lesionMaxSliceArea.max", "largest single-slice lesion area (mm^2)"),
    ("lesionElongation.mean", "mean sqrt(l2/l1) of voxel covariance"),
    ("lesionFlatness.mean", "mean sqrt(l3/l1) of voxel covariance"),
    ("lesionBboxFill.mean", "mean voxel count / bounding-box voxels"),
    ("glcmContrast.mean", "mean GLCM contrast"),
    ("glcmCorrelation.mean", "mean GLCM correlation"),
    ("glcmEnergy.mean", "mean GLCM energy (angular second moment)"),
    ("glcmHomogeneity.mean", "mean GLCM homogeneity 1/(1+(i-j)^2)"),
)
SPATIAL = (
    ("meanNNdist", "mean nearest-neighbour centroid distance (mm)"),
    ("maxNNdist", "max nearest-neighbour centroid distance (mm)"),
    ("centroidSpread", "RMS centroid distance from all-lesion centroid (mm)"),
    ("relPosition.mean", "mean centroid offset / all-lesion bounding diagonal"),
    ("relPosition.max", "max centroid offset / all-lesion bounding diagonal"),
)


def _build_registry():
    reg = [
        ("age", "clinical", "age in years"),
        ("female", "clinical", "1 if female"),
        ("diabetes", "clinical", "1 if diabetes mellitus"),
        ("smoking", "clinical", "1 if smoking history"),
        ("AgatstonScore2D", "heart", "sum over lesion-slices of area x density weight (slice peak)"),
        ("AgatstonScore3D", "heart", "sum over lesions of volume x density weight (lesion peak)"),
        ("MassScore", "heart", "sum over lesions of c x mean HU x volume"),
        ("VolumeScore", "heart", "total calcified volume (mm^3)"),
        ("Area2D", "heart", "total lesion area summed over slices (mm^2)"),
        ("numArtCalc", "heart", "number of arteries with >= 1 lesion"),
        ("lesionCount", "heart", "number of lesions"),
    ]
    for a in ARTERIES.values():
        reg += [
            (f"calcPresent.{a}", "artery", f"1 if {a} holds a lesion"),
            (f"lesionCount.{a}", "artery", f"lesions in {a}"),
            (f"AgatstonScorePerArtery2D.{a}", "artery", f"per-slice Agatston in {a}"),
            (f"AgatstonScorePerArtery3D.{a}", "artery", f"lesion-peak x volume Agatston in {a}"),
            (f"MassScorePerArtery.{a}", "artery", f"mass score in {a}"),
            (f"VolumeScorePerArtery.{a}", "artery", f"calcified volume in {a}"),
        ]
        for stat in ("mean", "sd", "skewness", "kurtosis"):
            reg.append((f"HUperArtery2D.{a}.{stat}", "artery", f"pooled lesion HU {stat} in {a}; 0 if absent"))
    for stat in ("min", "max", "mean", "sd", "skewness", "kurtosis", "energy"):
        reg.append((f"HUheart.{stat}", "heart", f"pooled lesion HU {stat}"))
    for b in range(1, HU_HIST_BINS + 1):
        reg.append((f"HUheartHist{b}", "heart", f"fraction of lesion voxels in HU bin {b} of {HU_HIST_BINS} over [130,1024]"))
    reg += [(name, "lesion-aggregate", d) for name, d in LESION_AGGREGATES]
    reg += [(name, "lesion-aggregate", d) for name, d in SPATIAL]
    for b in range(1, MASS_BINS + 1):
        reg.append((f"massHist{b}", "lesion-aggregate", f"lesions in mass bin {b} of {MASS_BINS} (training-fold quintile edges)"))
    return tuple(reg)


REGISTRY = _build_registry()
FEATURE_NAMES = tuple(r[0] for r in REGISTRY)
MASS_HIST_NAMES = tuple(f"massHist{b}" for b in range(1, MASS_BINS + 1))


def registry_json():
    return {
        "version": REGISTRY_VERSION,
        "features": [{"name": n, "scale": s, "definition": d} for n, s, d in REGISTRY],
    }


def registry_hash():
    blob = json.dumps(registry_json(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


# --- assembly -----------------------------------------------------------------

@dataclass
class PatientFeatures:
    """Extracted values for one patient; mass-histogram bins are filled at table level."""

    patient_id: str
    values: dict
    label: int
    lesion_masses: np.ndarray
    lesions: list = field(default_factory=list, repr=False)


def _mean(xs):
    return float(np.mean(xs)) if len(xs) else 0.0


def _max(xs):
    return float(np.max(xs)) if len(xs) else 0.0


def extract_patient(patient_id, clinical, volume, mask, label, extraction=ExtractionConfig(),
                    scoring=calscore.ScoringConfig()):
    """All registry features except the fold-dependent massHist bins."""
    missing = [c for c in CLINICAL if clinical.get(c) is None]
    if missing:
        raise MissingClinicalError(f"patient {patient_id}: missing clinical field(s) {', '.join(missing)}")
    lesions = extract_lesions(volume, mask, extraction)
    scores = calscore.aggregate_scores(lesions, scoring)
    agg = artery_heart_aggregates(lesions)
    v = {c: float(clinical[c]) for c in CLINICAL}
    h = scores.heart
    v.update({
        "AgatstonScore2D": h.agatston2d,
        "AgatstonScore3D": h.agatston3d,
        "MassScore": h.mass,
        "VolumeScore": h.volume,
        "Area2D": h.area2d,
        "numArtCalc": float(calscore.num_art_calc(lesions)),
        "lesionCount": float(len(lesions)),
    })
    for a in ARTERIES.values():
        b = scores.per_artery[a]
        st = agg[a]
        v.update({
            f"calcPresent.{a}": st["present"],
            f"lesionCount.{a}": st["lesionCount"],
            f"AgatstonScorePerArtery2D.{a}": b.agatston2d,
            f"AgatstonScorePerArtery3D.{a}": b.agatston3d,
            f"MassScorePerArtery.{a}": b.mass,
            f"VolumeScorePerArtery.{a}": b.volume,
        })
        for stat in ("mean", "sd", "skewness", "kurtosis"):
            v[f"HUperArtery2D.{a}.{stat}"] = st[stat]
    heart = agg["heart"]
    for stat in ("min", "max", "mean", "sd", "skewness", "kurtosis", "energy"):
        v[f"HUheart.{stat}"] = heart[stat]
    for b, frac in enumerate(heart["hist"], start=1):
        v[f"HUheartHist{b}"] = float(frac)

    fo = [lesion_first_order(l) for l in lesions]
    shapes = [lesion_shape(l) for l in lesions]
    tex = [lesion_second_order(l) for l in lesions]
    vols = [s.volume for s in scores.per_lesion]
    v.update({
        "lesionVolume.mean": _mean(vols),
        "lesionVolume.max": _max(vols),
        "lesionPeakHU.mean": _mean([f["max"] for f in fo]),
        "lesionPeakHU.max": _max([f["max"] for f in fo]),
        "lesionMinHU.mean": _mean([f["min"] for f in fo]),
        "lesionMeanHU.mean": _mean([f["mean"] for f in fo]),
        "lesionHUsd.mean": _mean([f["sd"] for f in fo]),
        "lesionMaxSliceArea.max": _max([s["maxSliceArea"] for s in shapes]),
        "lesionElongation.mean": _mean([s["elongation"] for s in shapes]),
        "lesionFlatness.mean": _mean([s["flatness"] for s in shapes]),
        "lesionBboxFill.mean": _mean([s["bboxFill"] for s in shapes]),
        "glcmContrast.mean": _mean([t["contrast"] for t in tex]),
        "glcmCorrelation.mean": _mean([t["correlation"] for t in tex]),
        "glcmEnergy.mean": _mean([t["energy"] for t in tex]),
        "glcmHomogeneity.mean": _mean([t["homogeneity"] for t in tex]),
    })
    v.update(spatial_relations(lesions))
    for name in MASS_HIST_NAMES:
        v[name] = 0.0
    masses = np.array([s.mass for s in scores.per_lesion])
    return PatientFeatures(str(patient_id), v, int(label), masses, lesions)


def assemble_features(patient, spec=None):
    """Registry-ordered feature vector; massHist bins use ``spec`` when given."""
    values = dict(patient.values)
    if spec is not None:
        values.update(zip(MASS_HIST_NAMES, mass_hist(patient.lesion_masses, spec)))
    return np.array([values[n] for n in FEATURE_NAMES], dtype=np.float64)


# --- feature tables -----------------------------------------------------------

def _fmt(x):
    return format(float(x), ".17g")


@dataclass
class FeatureTable:
    patient_ids: list
    values: np.ndarray
    labels: np.ndarray
    names: tuple = FEATURE_NAMES
    lesion_masses: list = None
    registry_hash: str = field(default_factory=registry_hash)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.values.shape != (len(self.patient_ids), len(self.names)):
            raise ValueError("values shape does not match patients x features")
        if not np.isfinite(self.values).all():
            raise ValueError("feature table contains NaN or infinite cells")

    @classmethod
    def from_patients(cls, patients, spec=None):
        rows = [assemble_features(p, spec) for p in patients]
        return cls(
            [p.patient_id for p in patients],
            np.array(rows).reshape(len(patients), len(FEATURE_NAMES)),
            np.array([p.label for p in patients]),
            lesion_masses=[p.lesion_masses for p in patients],
        )

    def __len__(self):
        return len(self.patient_ids)

    def column_index(self, names):
        lookup = {n: i for i, n in enumerate(self.names)}
        try:
            return [lookup[n] for n in names]
        except KeyError as exc:
            raise KeyError(f"feature {exc.args[0]!r} not in table") from None

    def matrix(self, names=None, rows=None):
        X = self.values if names is None else self.values[:, self.column_index(names)]
        return X if rows is None else X[rows]

    def subset(self, rows):
        rows = list(rows)
        masses = None if self.lesion_masses is None else [self.lesion_masses[i] for i in rows]
        return replace(self, patient_ids=[self.patient_ids[i] for i in rows], values=self.values[rows],
                       labels=self.labels[rows], lesion_masses=masses)

    def with_mass_hist(self, spec):
        """Copy with massHist columns recomputed from per-lesion masses under ``spec``."""
        if self.lesion_masses is None:
            raise ValueError("table has no per-lesion masses; massHist cannot be refitted")
        values = self.values.copy()
        cols = self.column_index(MASS_HIST_NAMES)
        for i, m in enumerate(self.lesion_masses):
            values[i, cols] = mass_hist(m, spec)
        return replace(self, values=values)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(f"# registry={REGISTRY_VERSION} sha256={self.registry_hash} features={len(self.names)}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patientId", "label", *self.names])
            for pid, lab, row in zip(self.patient_ids, self.labels, self.values):
                w.writerow([pid, int(lab), *(_fmt(x) for x in row)])

    def lesions_to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patientId", "lesionIndex", "massScore"])
            for pid, masses in zip(self.patient_ids, self.lesion_masses or []):
                for i, m in enumerate(masses, start=1):
                    w.writerow([pid, i, _fmt(m)])

    @classmethod
    def from_csv(cls, path, lesions_path=None):
        with open(path, encoding="utf-8", newline="") as fh:
            text = fh.read()
        lines = text.splitlines(keepends=True)
        meta = {}
        body = []
        for line in lines:
            if line.startswith("#"):
                for tok in line[1:].split():
                    k, _, val = tok.partition("=")
                    meta[k] = val
            else:
                body.append(line)
        reader = csv.reader(io.StringIO("".join(body)))
        header = next(reader, None)
        if header is None or header[:2] != ["patientId", "label"]:
            raise ValueError(f"{path}: header must start with patientId,label")
        names = tuple(header[2:])
        pids, labels, rows = [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ValueError(f"{path}: row {lineno} has {len(rec)} cells, expected {len(header)}")
            pids.append(rec[0])
            try:
                labels.append(int(rec[1]))
                row = [float(c) for c in rec[2:]]
            except ValueError:
                raise ValueError(f"{path}: row {lineno} has a non-numeric cell") from None
            if not all(math.isfinite(c) for c in row):
                raise ValueError(f"{path}: row {lineno} contains NaN or infinite cells")
            rows.append(row)
        masses = None
        if lesions_path is not None:
            per = {p: [] for p in pids}
            with open(lesions_path, encoding="utf-8", newline="") as fh:
                for rec in csv.DictReader(fh):
                    if rec["patientId"] in per:
                        per[rec["patientId"]].append(float(rec["massScore"]))
            masses = [np.array(per[p]) for p in pids]
        values = np.array(rows, dtype=np.float64).reshape(len(pids), len(names))
        return cls(pids, values, np.array(labels), names, masses, meta.get("sha256", registry_hash()))


def write_registry(path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({**registry_json(), "sha256": registry_hash()}, fh, indent=2)
        fh.write("\n")
