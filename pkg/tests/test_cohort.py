import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctcs import cohort
from ctcs.calscore import aggregate_scores
from ctcs.cohort import CohortSpec, LesionSpec, PhantomSpec, PhantomSpecError, generate_cohort, generate_phantom
from ctcs.volgrid import extract_lesions


def test_empty_phantom():
    ph = generate_phantom(PhantomSpec(), 0)
    assert ph.volume.hu.shape == (16, 64, 64) and ph.agatston2d == 0
    assert (ph.volume.hu == 40).all() and ph.mask.labels.any()


def test_four_voxel_lesion_truth():
    ph = generate_phantom(PhantomSpec(lesions=(LesionSpec("LAD", (23.25, 7.25, 10.0), (0.5, 0.5, 0.0), peak_hu=300),)), 0)
    (t,) = ph.truth
    assert (t.area2d, t.agatston2d, t.volume) == (1.0, 3.0, 2.5)
    assert t.mass == pytest.approx(0.75)
    assert (ph.volume.hu >= 130).sum() == 4


@pytest.mark.parametrize("second,kind", [
    (LesionSpec("LAD", (23.25, 7.25, 10.0), (0.5, 0.5, 0.0), peak_hu=300), "within one artery"),
])
def test_overlap_rejected(second, kind):
    first = LesionSpec("LAD", (23.25, 7.25, 10.0), (1.0, 1.0, 2.5), peak_hu=400)
    with pytest.raises(PhantomSpecError, match=kind):
        generate_phantom(PhantomSpec(lesions=(first, second)), 0)


def test_spec_validation():
    with pytest.raises(PhantomSpecError):
        LesionSpec("XYZ", (0, 0, 0), (1, 1, 1))
    with pytest.raises(PhantomSpecError):
        LesionSpec("LAD", (0, 0, 0), (1, 1, 1), shape="torus")
    with pytest.raises(ValueError):
        CohortSpec(n=5)
    with pytest.raises(ValueError):
        CohortSpec(prevalence=0.0)


@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 50))
def test_noise_free_extraction_recovers_plan(seed, index):
    spec = CohortSpec(n=60, seed=seed, noise_sigma=0.0)
    plan = cohort._plan_patient(spec, index, 4)
    ph = generate_phantom(plan.phantom, 0)
    lesions = extract_lesions(ph.volume, ph.mask)
    assert len(lesions) == plan.n_lesions
    agg = aggregate_scores(lesions)
    assert agg.heart.agatston2d == plan.agatston2d == ph.agatston2d
    assert agg.heart.volume == pytest.approx(sum(t.volume for t in ph.truth), rel=1e-12, abs=0)
    assert agg.heart.mass == pytest.approx(sum(t.mass for t in ph.truth), rel=1e-12, abs=0)


def test_cohort_is_deterministic(tmp_path):
    spec = CohortSpec(n=20, seed=11)
    a, b = generate_cohort(spec), generate_cohort(spec)
    assert a.labels.tolist() == b.labels.tolist() and a.intercept == b.intercept
    cohort.write_cohort(a, tmp_path / "a")
    cohort.write_cohort(b, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 2 * 20 + 3
    for f in files:
        assert hashlib.sha256((tmp_path / "a" / f).read_bytes()).digest() == \
            hashlib.sha256((tmp_path / "b" / f).read_bytes()).digest()
    assert generate_cohort(spec, seed=12).labels.tolist() != a.labels.tolist() or \
        generate_cohort(spec, seed=12).intercept != a.intercept


def test_prevalence_held_for_large_cohorts():
    c = generate_cohort(CohortSpec(n=600, seed=3, prevalence=0.09))
    assert abs(c.realized_prevalence - 0.09) <= 0.02
    assert np.mean(1 / (1 + np.exp(-c.linear_predictor))) == pytest.approx(0.09, abs=1e-9)


def test_zero_calcium_fraction():
    c = generate_cohort(CohortSpec(n=40, seed=2, zero_calcium_fraction=1.0))
    assert all(p.n_lesions == 0 and p.agatston2d == 0 for p in c.plans)
