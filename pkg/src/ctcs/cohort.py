"""Synthetic CT calcium-score phantoms and patient cohorts with known ground truth.

Lesions are rasterised on voxel centres (voxel (i, j, k) sits at
(i*dx, j*dy, k*dz) mm), so ground-truth scores follow exactly from the lesion description.
Outcomes are drawn from a logistic model in calcium burden and clinical
covariates whose coefficients are chosen here, not estimated from any data.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .volgrid import (ARTERIES, ARTERY_CODES, DEFAULT_SPACING, ArteryLabelMap, Volume, HU_MAX,
                      save_mask, save_volume)

EPS = 1e-9


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class LesionSpec:
    artery: str
    center: tuple
    extents: tuple
    shape: str = "box"
    profile: str = "constant"
    peak_hu: int = 300
    edge_hu: int = 200

    def __post_init__(self):
        if self.artery not in ARTERY_CODES:
            raise PhantomSpecError(f"unknown artery {self.artery!r}")
        if self.shape not in ("box", "ellipsoid"):
            raise PhantomSpecError(f"unknown shape {self.shape!r}")
        if self.profile not in ("constant", "ramp"):
            raise PhantomSpecError(f"unknown HU profile {self.profile!r}")
        if len(self.center) != 3 or len(self.extents) != 3 or min(self.extents) < 0:
            raise PhantomSpecError("center and extents must be 3-vectors with non-negative extents")
        if self.peak_hu > HU_MAX:
            raise PhantomSpecError("peak HU above scanner range")


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (64, 64, 16)
    spacing: tuple = DEFAULT_SPACING
    lesions: tuple = ()
    background_hu: int = 40
    noise_sigma: float = 0.0
    tube_radius_mm: float = 6.0


@dataclass
class LesionTruth:
    artery: str
    voxels: np.ndarray
    hu: np.ndarray
    agatston2d: float
    agatston3d: float
    volume: float
    mass: float
    area2d: float


@dataclass
class Phantom:
    volume: Volume
    mask: ArteryLabelMap
    truth: list

    @property
    def agatston2d(self):
        return float(sum(t.agatston2d for t in self.truth))


def _axis_range(c, h, d, n):
    lo = max(0, int(math.floor((c - h - EPS) / d)))
    hi = min(n, int(math.ceil((c + h + EPS) / d)) + 1)
    return lo, max(lo, hi)


def rasterize(lesion, dims, spacing):
    """Boolean (nz, ny, nx) mask and noise-free int HU grid for one lesion."""
    nx, ny, nz = dims
    hu_full = np.zeros((nz, ny, nx), dtype=np.int64)
    inside_full = np.zeros((nz, ny, nx), dtype=bool)
    half = [e / 2.0 for e in lesion.extents]
    ranges = [_axis_range(c, h, d, n) for c, h, d, n in zip(lesion.center, half, spacing, dims)]
    if any(lo >= hi for lo, hi in ranges):
        return inside_full, hu_full

    def norm(axis):
        lo, hi = ranges[axis]
        delta = np.arange(lo, hi) * spacing[axis] - lesion.center[axis]
        h = half[axis]
        if h == 0:
            return np.where(np.abs(delta) <= EPS, 0.0, np.inf)
        return np.abs(delta) / h

    rz = norm(2)[:, None, None]
    ry = norm(1)[None, :, None]
    rx = norm(0)[None, None, :]
    if lesion.shape == "box":
        r = np.maximum(np.maximum(rx, ry), rz)
    else:
        with np.errstate(invalid="ignore"):
            r = np.sqrt(rx * rx + ry * ry + rz * rz)
    inside = r <= 1.0 + EPS
    if lesion.profile == "constant":
        hu = np.full(inside.shape, lesion.peak_hu, dtype=np.int64)
    else:
        hu = np.rint(lesion.peak_hu - (lesion.peak_hu - lesion.edge_hu) * np.minimum(r, 1.0)).astype(np.int64)
    (x0, x1), (y0, y1), (z0, z1) = ranges
    inside_full[z0:z1, y0:y1, x0:x1] = inside
    hu_full[z0:z1, y0:y1, x0:x1] = hu
    return inside_full, hu_full


def _weight(peak):
    return 1 if peak < 200 else 2 if peak < 300 else 3 if peak < 400 else 4


def truth_scores(voxels, hu, spacing, min_area=1.0, mass_calibration=0.001):
    """Reference Agatston/volume/mass/area computed directly from a voxel list."""
    dx, dy, dz = spacing
    zs = voxels[:, 2]
    ag2d = 0.0
    area = 0.0
    for zval in sorted(set(zs.tolist())):
        sel = zs == zval
        a = int(sel.sum()) * dx * dy
        area += a
        if a >= min_area:
            ag2d += a * _weight(int(hu[sel].max()))
    vol = len(voxels) * (dx * dy * dz)
    mean = float(hu.sum()) / len(hu)
    return ag2d, _weight(int(hu.max())) * vol, vol, mass_calibration * mean * vol, area


def artery_tubes(dims, spacing, radius_mm):
    """Vertical cylinders, one per artery, in the four in-plane quadrants."""
    nx, ny, _ = dims
    dx, dy, _ = spacing
    nz = dims[2]
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny) * dy, np.arange(nx) * dx, indexing="ij")
    labels = np.zeros(x.shape, dtype=np.uint8)
    for code, (fx, fy) in zip(ARTERIES, ((0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75))):
        cx, cy = fx * (nx - 1) * dx, fy * (ny - 1) * dy
        labels[(x - cx) ** 2 + (y - cy) ** 2 <= radius_mm ** 2] = code
    return labels


def tube_center(artery, dims, spacing):
    fx, fy = ((0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75))[ARTERY_CODES[artery] - 1]
    return fx * (dims[0] - 1) * spacing[0], fy * (dims[1] - 1) * spacing[1]


def generate_phantom(spec, seed=0):
    """Volume, artery map and per-lesion ground truth for a phantom spec."""
    nx, ny, nz = spec.dims
    labels = artery_tubes(spec.dims, spec.spacing, spec.tube_radius_mm)
    hu = np.full((nz, ny, nx), spec.background_hu, dtype=np.int64)
    owner = np.zeros((nz, ny, nx), dtype=np.int64)
    truth = []
    for idx, lesion in enumerate(spec.lesions, start=1):
        inside, lhu = rasterize(lesion, spec.dims, spec.spacing)
        if not inside.any():
            raise PhantomSpecError(f"lesion {idx} rasterises to no voxels inside the grid")
        clash = owner[inside]
        if clash.any():
            other = spec.lesions[int(clash[clash > 0][0]) - 1]
            kind = "across arteries" if other.artery != lesion.artery else "within one artery"
            raise PhantomSpecError(f"lesion {idx} overlaps another lesion ({kind})")
        owner[inside] = idx
        hu[inside] = lhu[inside]
        labels[inside] = ARTERY_CODES[lesion.artery]
        zz, yy, xx = np.nonzero(inside)
        vox = np.stack([xx, yy, zz], axis=1).astype(np.int64)
        vhu = lhu[inside].astype(np.int64)
        if vhu.min() < 130:
            raise PhantomSpecError(f"lesion {idx} has voxels below 130 HU")
        truth.append(LesionTruth(lesion.artery, vox, vhu, *truth_scores(vox, vhu, spec.spacing)))
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        noise = np.clip(rng.normal(0.0, spec.noise_sigma, hu.shape), -4 * spec.noise_sigma, 4 * spec.noise_sigma)
        hu = hu + np.rint(noise).astype(np.int64)
    hu = np.clip(hu, -1024, HU_MAX)
    return Phantom(Volume(hu.astype(np.int16), spec.spacing), ArteryLabelMap(labels, spec.spacing), truth)


# --- cohorts ------------------------------------------------------------------

@dataclass(frozen=True)
class CohortSpec:
    """Synthetic cohort generator settings.

    Clinical marginals default to the pooled rates of the reference cohort
    (987 patients, 89 positive). The outcome coefficients are synthetic.
    """

    n: int = 200
    prevalence: float = 0.09
    age_mean: float = 62.8
    age_sd: float = 8.8
    female_rate: float = 0.516
    diabetes_rate: float = 0.250
    smoking_rate: float = 0.397
    coef_log_agatston: float = 0.5
    coef_num_art_calc: float = 1.0
    coef_diabetes: float = 0.6
    coef_female: float = -0.6
    dims: tuple = (64, 64, 16)
    spacing: tuple = DEFAULT_SPACING
    noise_sigma: float = 8.0
    background_hu: int = 40
    max_lesions: int = 10
    zero_calcium_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 10:
            raise ValueError("cohort needs n >= 10")
        for name in ("prevalence", "female_rate", "diabetes_rate", "smoking_rate", "zero_calcium_fraction"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 < self.prevalence < 1:
            raise ValueError("prevalence must lie strictly between 0 and 1")


@dataclass
class PatientPlan:
    patient_id: str
    clinical: dict
    phantom: PhantomSpec
    noise_seed: int
    agatston2d: float = 0.0
    num_art_calc: int = 0
    n_lesions: int = 0


@dataclass
class SyntheticCohort:
    spec: CohortSpec
    plans: list
    labels: np.ndarray
    intercept: float
    linear_predictor: np.ndarray = field(repr=False)

    def phantom(self, i):
        plan = self.plans[i]
        return generate_phantom(plan.phantom, plan.noise_seed)

    @property
    def realized_prevalence(self):
        return float(self.labels.mean())


def _plan_lesions(rng, spec, n_lesions, arteries):
    dims, spacing = spec.dims, spec.spacing
    nx, ny, nz = dims
    dx, dy, dz = spacing
    floor = 130 + int(math.ceil(4 * spec.noise_sigma)) + 8
    occupied = np.zeros((nz, ny, nx), dtype=bool)
    lesions = []
    for k in range(n_lesions):
        artery = arteries[k] if k < len(arteries) else arteries[int(rng.integers(len(arteries)))]
        for _ in range(40):
            shape = "box" if rng.random() < 0.5 else "ellipsoid"
            cnt = (int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 3)))
            tx, ty = tube_center(artery, dims, spacing)
            i0 = int(round(tx / dx + rng.integers(-6, 7) - (cnt[0] - 1) / 2))
            j0 = int(round(ty / dy + rng.integers(-6, 7) - (cnt[1] - 1) / 2))
            k0 = int(rng.integers(0, nz - cnt[2] + 1))
            if i0 < 0 or j0 < 0 or i0 + cnt[0] > nx or j0 + cnt[1] > ny:
                continue
            center = ((i0 + (cnt[0] - 1) / 2) * dx, (j0 + (cnt[1] - 1) / 2) * dy, (k0 + (cnt[2] - 1) / 2) * dz)
            if shape == "box":
                extents = ((cnt[0] - 1) * dx, (cnt[1] - 1) * dy, (cnt[2] - 1) * dz)
            else:
                extents = (cnt[0] * dx, cnt[1] * dy, cnt[2] * dz)
            peak = int(min(1400, floor + rng.gamma(2.0, 110.0)))
            profile = "ramp" if rng.random() < 0.6 else "constant"
            edge = int(max(floor, peak - rng.uniform(0, 250)))
            cand = LesionSpec(artery, center, extents, shape, profile, peak, edge)
            inside, _ = rasterize(cand, dims, spacing)
            if not inside.any():
                continue
            grown = inside.copy()
            # reject candidates touching an existing lesion under 26-connectivity
            zz, yy, xx = np.nonzero(inside)
            lo = np.maximum([zz.min() - 1, yy.min() - 1, xx.min() - 1], 0)
            hi = np.minimum([zz.max() + 2, yy.max() + 2, xx.max() + 2], [nz, ny, nx])
            grown[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
            if (grown & occupied).any():
                continue
            occupied |= inside
            lesions.append(cand)
            break
    return tuple(lesions)


def _plan_patient(spec, index, width):
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    clinical = {
        "age": round(float(np.clip(rng.normal(spec.age_mean, spec.age_sd), 30, 95)), 1),
        "female": int(rng.random() < spec.female_rate),
        "diabetes": int(rng.random() < spec.diabetes_rate),
        "smoking": int(rng.random() < spec.smoking_rate),
    }
    burden = rng.normal()
    if rng.random() < spec.zero_calcium_fraction:
        lesions = ()
    else:
        n_art = 1 + int(rng.binomial(3, expit(burden - 0.3)))
        arteries = [ARTERIES[c] for c in sorted(rng.choice([1, 2, 3, 4], size=n_art, replace=False,
                                                           p=[0.1, 0.4, 0.2, 0.3]).tolist())]
        n_les = min(spec.max_lesions, n_art + int(rng.poisson(math.exp(0.2 + 0.6 * burden))))
        lesions = _plan_lesions(rng, spec, n_les, arteries)
    phantom = PhantomSpec(spec.dims, spec.spacing, lesions, spec.background_hu, spec.noise_sigma)
    plan = PatientPlan(f"P{index + 1:0{width}d}", clinical, phantom, int(rng.integers(2 ** 31)))
    ag = 0.0
    for lesion in lesions:
        inside, lhu = rasterize(lesion, spec.dims, spec.spacing)
        zz, yy, xx = np.nonzero(inside)
        ag += truth_scores(np.stack([xx, yy, zz], axis=1), lhu[inside], spec.spacing)[0]
    plan.agatston2d = ag
    plan.num_art_calc = len({l.artery for l in lesions})
    plan.n_lesions = len(lesions)
    return plan


def _linear_part(spec, plans):
    return np.array([
        spec.coef_log_agatston * math.log1p(p.agatston2d)
        + spec.coef_num_art_calc * p.num_art_calc
        + spec.coef_diabetes * p.clinical["diabetes"]
        + spec.coef_female * p.clinical["female"]
        for p in plans
    ])


def generate_cohort(spec, seed=None):
    """Plan every patient and draw outcomes; phantoms are rendered lazily."""
    if seed is not None:
        spec = CohortSpec(**{**asdict(spec), "seed": int(seed)})
    width = max(4, len(str(spec.n)))
    plans = [_plan_patient(spec, i, width) for i in range(spec.n)]
    lin = _linear_part(spec, plans)

    def gap(b0):
        return float(expit(b0 + lin).mean()) - spec.prevalence

    lo, hi = -60.0, 60.0
    if gap(lo) > 0 or gap(hi) < 0:
        raise ValueError(f"prevalence {spec.prevalence} is infeasible for this outcome model")
    b0 = brentq(gap, lo, hi, xtol=1e-12)
    prob = expit(b0 + lin)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2 ** 32 - 1]))
    for _ in range(1000):
        labels = (rng.random(spec.n) < prob).astype(np.int64)
        if 0 < labels.sum() < spec.n and (spec.n < 500 or abs(labels.mean() - spec.prevalence) <= 0.02):
            break
    else:
        raise ValueError("could not realise the target prevalence")
    return SyntheticCohort(spec, plans, labels, float(b0), b0 + lin)


def write_cohort(cohort, out_dir):
    """Write volumes, masks, clinical.csv, truth.csv and manifest.json."""
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    digests = {}
    for i, plan in enumerate(cohort.plans):
        ph = cohort.phantom(i)
        vpath = out / "volumes" / f"{plan.patient_id}.ctv"
        mpath = out / "masks" / f"{plan.patient_id}.ctm"
        save_volume(vpath, ph.volume)
        save_mask(mpath, ph.mask)
        digests[plan.patient_id] = hashlib.sha256(vpath.read_bytes() + mpath.read_bytes()).hexdigest()
    with open(out / "clinical.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patientId", "age", "female", "diabetes", "smoking", "label"])
        for plan, lab in zip(cohort.plans, cohort.labels):
            c = plan.clinical
            w.writerow([plan.patient_id, repr(c["age"]), c["female"], c["diabetes"], c["smoking"], int(lab)])
    with open(out / "truth.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patientId", "agatston2d", "numArtCalc", "lesions", "linearPredictor"])
        for plan, lp in zip(cohort.plans, cohort.linear_predictor):
            w.writerow([plan.patient_id, repr(plan.agatston2d), plan.num_art_calc, plan.n_lesions, repr(float(lp))])
    manifest = {
        "generator": "ctcs.cohort",
        "spec": asdict(cohort.spec),
        "intercept": cohort.intercept,
        "realizedPrevalence": cohort.realized_prevalence,
        "patients": len(cohort.plans),
        "sha256": digests,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out
