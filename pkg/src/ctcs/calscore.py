"""Agatston (per-slice and 3-D), volume and mass scores at lesion, artery and heart scope."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

from .volgrid import ARTERIES

THRESHOLD_HU = 130
SCORE_FIELDS = ("agatston2d", "agatston3d", "volume", "mass", "area2d")


def density_weight(peak_hu):
    """Agatston density factor for a peak HU: 130/200/300/400 band edges."""
    if peak_hu < THRESHOLD_HU:
        raise ValueError(f"peak HU {peak_hu} is below the {THRESHOLD_HU} HU calcium threshold")
    if peak_hu < 200:
        return 1
    if peak_hu < 300:
        return 2
    if peak_hu < 400:
        return 3
    return 4


@dataclass(frozen=True)
class ScoringConfig:
    min_slice_area_mm2: float = 1.0
    mass_calibration: float = 0.001
    slice_factor: float = 1.0

    def __post_init__(self):
        if self.min_slice_area_mm2 <= 0 or self.mass_calibration <= 0 or self.slice_factor <= 0:
            raise ValueError("scoring parameters must be positive")


@dataclass(frozen=True)
class ScoreBundle:
    agatston2d: float = 0.0
    agatston3d: float = 0.0
    volume: float = 0.0
    mass: float = 0.0
    area2d: float = 0.0
    scope: str = "heart"

    def __add__(self, other):
        return ScoreBundle(*(getattr(self, f) + getattr(other, f) for f in SCORE_FIELDS), scope=self.scope)

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def agatston_slice_term(area, peak_hu, cfg=ScoringConfig()):
    if area < 0:
        raise ValueError("area must be non-negative")
    weight = density_weight(peak_hu)
    if area < cfg.min_slice_area_mm2:
        return 0.0
    return area * weight * cfg.slice_factor


def score_lesion(lesion, cfg=ScoringConfig()):
    agatston = 0.0
    for z in sorted(lesion.per_slice_area):
        agatston += agatston_slice_term(lesion.per_slice_area[z], lesion.per_slice_peak[z], cfg)
    dx, dy, dz = lesion.spacing
    volume = lesion.voxel_count * (dx * dy * dz)
    area = sum(lesion.per_slice_area[z] for z in sorted(lesion.per_slice_area))
    return ScoreBundle(
        agatston2d=agatston,
        agatston3d=density_weight(lesion.peak_hu) * volume,
        volume=volume,
        mass=cfg.mass_calibration * lesion.mean_hu * volume,
        area2d=area,
        scope=f"lesion:{lesion.id}",
    )


@dataclass
class AggregateScores:
    per_lesion: list
    per_artery: dict
    heart: ScoreBundle

    def report(self, patient_id):
        """Per-patient score report as a JSON-ready dict."""
        return {
            "patientId": patient_id,
            "perArtery": {name: _plain(b) for name, b in self.per_artery.items()},
            "heart": _plain(self.heart),
        }


def _plain(bundle):
    d = bundle.as_dict()
    d.pop("scope")
    return d


def aggregate_scores(lesions, cfg=ScoringConfig()):
    per_lesion = [score_lesion(l, cfg) for l in lesions]
    per_artery = {}
    for code, name in ARTERIES.items():
        total = ScoreBundle(scope=f"artery:{name}")
        for lesion, bundle in zip(lesions, per_lesion):
            if lesion.artery == code:
                total = total + bundle
        per_artery[name] = total
    heart = ScoreBundle(scope="heart")
    for name in ARTERIES.values():
        heart = heart + per_artery[name]
    return AggregateScores(per_lesion, per_artery, heart)


def num_art_calc(lesions):
    return len({l.artery for l in lesions})


def area_2d_total(lesions):
    total = 0.0
    for lesion in lesions:
        total += sum(lesion.per_slice_area[z] for z in sorted(lesion.per_slice_area))
    return total


def write_score_report(path, patient_id, scores):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scores.report(patient_id), fh, indent=2, sort_keys=True)
        fh.write("\n")
