import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctcs import calciomics, cohort
from ctcs.calciomics import (CLINICAL, FEATURE_NAMES, MASS_HIST_NAMES, FeatureTable, HistogramSpec,
                             MissingClinicalError, extract_patient, first_order, fit_histogram_spec,
                             glcm_features, glcm_matrix, lesion_shape, mass_hist, spatial_relations)
from ctcs.volgrid import ArteryLabelMap, LesionComponent, Volume, extract_lesions
from oracles import exact_moments, glcm_pairs, nn_bruteforce

SPACING = (0.5, 0.5, 2.5)
CLIN = {"age": 61.0, "female": 1, "diabetes": 0, "smoking": 1}


def lesion(voxels, hu, lid=1, artery=2):
    voxels = np.asarray(voxels, dtype=np.int64)
    hu = np.asarray(hu, dtype=np.int64)
    areas, peaks = {}, {}
    for z in np.unique(voxels[:, 2]):
        sel = voxels[:, 2] == z
        areas[int(z)] = int(sel.sum()) * 0.25
        peaks[int(z)] = int(hu[sel].max())
    return LesionComponent(lid, artery, voxels, hu, SPACING, areas, peaks)


def test_registry_shape():
    assert len(FEATURE_NAMES) == len(set(FEATURE_NAMES)) == 91
    assert FEATURE_NAMES[:4] == CLINICAL
    for required in ("AgatstonScore2D", "MassScore", "VolumeScore", "Area2D", "numArtCalc", "massHist2",
                     "AgatstonScorePerArtery2D.LM", "AgatstonScorePerArtery3D.RCA", "HUperArtery2D.LCX.kurtosis"):
        assert required in FEATURE_NAMES
    assert len(calciomics.registry_hash()) == 64


def test_first_order_examples():
    fo = first_order([200, 200, 200])
    assert (fo["mean"], fo["sd"], fo["skewness"], fo["kurtosis"]) == (200, 0, 0, 0)
    fo = first_order([130, 1024])
    assert (fo["mean"], fo["max"], fo["min"]) == (577, 1024, 130)
    assert first_order([])["mean"] == 0.0


@given(st.lists(st.integers(130, 3071), min_size=1, max_size=60))
def test_first_order_matches_exact(values):
    fo = first_order(values)
    mean, sd, skew, kurt = exact_moments(values)
    assert fo["mean"] == pytest.approx(mean, rel=1e-12)
    assert fo["sd"] == pytest.approx(sd, rel=1e-9, abs=1e-12)
    if sd > 1e-6 * mean:
        assert fo["skewness"] == pytest.approx(skew, rel=1e-9, abs=1e-9)
        assert fo["kurtosis"] == pytest.approx(kurt, rel=1e-9, abs=1e-9)


def test_glcm_examples():
    uni = lesion([(0, 0, 0), (1, 0, 0), (0, 1, 0)], [300, 300, 300])
    f = glcm_features(glcm_matrix(uni))
    assert f["contrast"] == 0 and f["energy"] == 1
    # HU 300 -> bin 1, HU 420 -> bin 2
    two = lesion([(0, 0, 0), (1, 0, 0)], [300, 420])
    assert calciomics.hu_bin([300, 420]).tolist() == [1, 2]
    assert glcm_features(glcm_matrix(two))["contrast"] == 1.0
    far = lesion([(0, 0, 0), (1, 0, 0)], [140, 1000])
    assert glcm_features(glcm_matrix(far))["contrast"] == 49.0


@given(st.integers(0, 10 ** 6))
def test_glcm_matches_pair_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 20))
    coords = {tuple(rng.integers(0, 3, size=3).tolist()) for _ in range(n)}
    vox = sorted(coords, key=lambda v: (v[2], v[1], v[0]))
    hu = rng.integers(130, 1200, size=len(vox))
    les = lesion(vox, hu)
    P = glcm_pairs(vox, calciomics.hu_bin(hu).tolist(), calciomics.GLCM_OFFSETS)
    got = glcm_matrix(les)
    if P.sum() == 0:
        assert got.sum() == 1.0
    else:
        assert np.allclose(got, P / P.sum(), rtol=0, atol=1e-15)
    assert np.allclose(got, got.T)


def test_shape_examples():
    assert lesion_shape(lesion([(0, 0, 0)], [200]))["bboxFill"] == 1.0
    line = lesion([(i, 0, 0) for i in range(10)], [200] * 10)
    s = lesion_shape(line)
    assert s["elongation"] == 0.0 and s["flatness"] == 0.0
    cube = lesion([(x, y, z) for z in range(3) for y in range(3) for x in range(3)], [200] * 27)
    cube.spacing = (1.0, 1.0, 1.0)
    s = lesion_shape(cube)
    assert s["elongation"] == pytest.approx(1.0, abs=1e-12) and s["flatness"] == pytest.approx(1.0, abs=1e-12)
    assert s["bboxFill"] == 1.0 and s["voxelCount"] == 27


def test_spatial_examples():
    one = lesion([(0, 0, 0)], [200])
    assert spatial_relations([one])["meanNNdist"] == 0.0
    a = lesion([(0, 0, 0)], [200])
    b = lesion([(6, 0, 0)], [200], lid=2)
    assert spatial_relations([a, b])["meanNNdist"] == 3.0
    assert spatial_relations([])["maxNNdist"] == 0.0


@given(st.integers(0, 10 ** 6))
def test_spatial_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    les = [lesion([tuple(rng.integers(0, 30, size=3).tolist())], [200], lid=i + 1) for i in range(int(rng.integers(1, 8)))]
    got = spatial_relations(les)
    mean, mx = nn_bruteforce([l.centroid for l in les])
    assert got["meanNNdist"] == pytest.approx(mean, rel=1e-12, abs=1e-12)
    assert got["maxNNdist"] == pytest.approx(mx, rel=1e-12, abs=1e-12)


def test_mass_hist_examples():
    spec = HistogramSpec((0.0, 1.0, 2.0, 3.0, 4.0, math.inf))
    assert mass_hist([], spec).tolist() == [0] * 5
    assert mass_hist([0.1, 0.5, 0.99], spec).tolist() == [3, 0, 0, 0, 0]
    assert mass_hist([1.0, 4.0, 100.0], spec).tolist() == [0, 1, 0, 0, 2]
    with pytest.raises(ValueError):
        HistogramSpec((0.0, 1.0, 1.0, 3.0, 4.0, math.inf))


@given(st.lists(st.floats(0, 50, allow_nan=False), max_size=40), st.lists(st.floats(0, 50, allow_nan=False), min_size=1, max_size=40))
def test_mass_hist_matches_direct_binning(fit, masses):
    spec = fit_histogram_spec(fit)
    e = spec.edges
    direct = [sum(1 for m in masses if e[i] <= m < e[i + 1]) for i in range(5)]
    assert mass_hist(masses, spec).tolist() == direct


def _phantom_patient(lesions, pid="P1", label=1, clinical=CLIN):
    ph = cohort.generate_phantom(cohort.PhantomSpec(lesions=tuple(lesions)), 0)
    return ph, extract_patient(pid, clinical, ph.volume, ph.mask, label)


def test_zero_lesion_patient():
    _, p = _phantom_patient([])
    vec = calciomics.assemble_features(p)
    assert vec[:4].tolist() == [61.0, 1, 0, 1]
    assert not vec[4:].any()


def test_missing_clinical():
    ph = cohort.generate_phantom(cohort.PhantomSpec(), 0)
    with pytest.raises(MissingClinicalError):
        extract_patient("P1", {"age": 50, "female": 0, "diabetes": 1}, ph.volume, ph.mask, 0)


def test_planted_scores():
    spec = [cohort.LesionSpec("LAD", (23.25, 7.25, 10.0), (0.5, 0.5, 0.0), peak_hu=300),
            cohort.LesionSpec("RCA", (23.25, 23.25, 10.0), (0.5, 0.5, 0.0), peak_hu=500)]
    ph, p = _phantom_patient(spec)
    v = p.values
    assert v["AgatstonScore2D"] == 3.0 + 4.0 and v["numArtCalc"] == 2 and v["lesionCount"] == 2
    assert v["AgatstonScorePerArtery2D.LAD"] == 3.0 and v["AgatstonScorePerArtery2D.RCA"] == 4.0
    assert v["calcPresent.LM"] == 0 and v["calcPresent.RCA"] == 1
    assert v["Area2D"] == 2.0 and v["VolumeScore"] == 5.0
    assert v["HUheart.max"] == 500 and v["HUheart.min"] == 300
    assert sum(v[f"HUheartHist{b}"] for b in range(1, 9)) == pytest.approx(1.0)
    assert v["AgatstonScore2D"] == ph.agatston2d


def test_one_artery_heart_equals_artery():
    spec = [cohort.LesionSpec("LCX", (7.25, 23.25, 10.0), (1.0, 1.0, 2.5), profile="ramp", peak_hu=600, edge_hu=250)]
    _, p = _phantom_patient(spec)
    for stat in ("mean", "sd", "skewness", "kurtosis"):
        assert p.values[f"HUheart.{stat}"] == p.values[f"HUperArtery2D.LCX.{stat}"]


def test_csv_round_trip(tmp_path):
    spec = [cohort.LesionSpec("LAD", (23.25, 7.25, 10.0), (1.0, 0.5, 2.5), profile="ramp", peak_hu=333, edge_hu=201)]
    _, p1 = _phantom_patient(spec, "P1", 1)
    _, p2 = _phantom_patient([], "P2", 0)
    hist = fit_histogram_spec([0.1, 0.2, 0.3, 0.4, 0.5])
    table = FeatureTable.from_patients([p1, p2], hist)
    table.to_csv(tmp_path / "f.csv")
    table.lesions_to_csv(tmp_path / "l.csv")
    back = FeatureTable.from_csv(tmp_path / "f.csv", tmp_path / "l.csv")
    assert back.values.tobytes() == table.values.tobytes()
    assert back.patient_ids == ["P1", "P2"] and back.labels.tolist() == [1, 0]
    assert back.registry_hash == calciomics.registry_hash()
    assert [m.tolist() for m in back.lesion_masses] == [m.tolist() for m in table.lesion_masses]
    refit = back.with_mass_hist(hist)
    assert refit.values.tobytes() == table.values.tobytes()
    assert (tmp_path / "f.csv").read_text().startswith("# registry=")


def test_csv_rejects_nan_and_bad_header(tmp_path):
    (tmp_path / "a.csv").write_text("patientId,label,x\nP1,0,nan\n")
    with pytest.raises(ValueError, match="NaN"):
        FeatureTable.from_csv(tmp_path / "a.csv")
    (tmp_path / "b.csv").write_text("id,x\nP1,0\n")
    with pytest.raises(ValueError, match="header"):
        FeatureTable.from_csv(tmp_path / "b.csv")


def test_mass_hist_columns_follow_spec():
    spec = [cohort.LesionSpec("LAD", (23.25, 7.25, 10.0), (0.5, 0.5, 0.0), peak_hu=300)]
    _, p = _phantom_patient(spec)
    table = FeatureTable.from_patients([p])
    cols = table.column_index(MASS_HIST_NAMES)
    assert not table.values[0, cols].any()
    filled = table.with_mass_hist(HistogramSpec((0.0, 0.1, 0.2, 0.3, 0.4, math.inf)))
    assert filled.values[0, cols].tolist() == [0, 0, 0, 0, 1]
