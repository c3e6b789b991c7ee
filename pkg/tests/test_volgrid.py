import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ctcs import cohort
from ctcs.volgrid import (ArteryLabelMap, ExtractionConfig, PreprocessConfig, Volume, VolumeFormatError,
                          clip_normalize, extract_lesions, load_mask, load_volume, save_mask, save_volume)
from oracles import flood_fill

SPACING = (0.5, 0.5, 2.5)


def test_round_trip_small(tmp_path):
    v = Volume(np.array([0, 130, -1024, 400], dtype=np.int16).reshape(1, 2, 2), SPACING)
    save_volume(tmp_path / "v.ctv", v)
    back = load_volume(tmp_path / "v.ctv")
    assert np.array_equal(back.hu, v.hu) and back.spacing == SPACING and back.dims == (2, 2, 1)


def test_header_layout(tmp_path):
    v = Volume(np.zeros((3, 2, 4), dtype=np.int16), (0.4, 0.4, 3.0))
    save_volume(tmp_path / "v.ctv", v)
    raw = (tmp_path / "v.ctv").read_bytes()
    header = json.loads(raw.split(b"\n", 1)[0])
    assert header == {"magic": "CTCSV1", "nx": 4, "ny": 2, "nz": 3, "dx": 0.4, "dy": 0.4, "dz": 3.0, "dtype": "i16le"}
    assert len(raw.split(b"\n", 1)[1]) == 4 * 2 * 3 * 2


def test_x_varies_fastest(tmp_path):
    hu = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    save_volume(tmp_path / "v.ctv", Volume(hu, SPACING))
    payload = (tmp_path / "v.ctv").read_bytes().split(b"\n", 1)[1]
    assert np.frombuffer(payload, "<i2")[:5].tolist() == [0, 1, 2, 3, 4]


def test_truncated_payload(tmp_path):
    save_volume(tmp_path / "v.ctv", Volume(np.zeros((1, 2, 2), dtype=np.int16), SPACING))
    raw = (tmp_path / "v.ctv").read_bytes()
    (tmp_path / "v.ctv").write_bytes(raw[:-1])
    with pytest.raises(VolumeFormatError, match="truncated payload"):
        load_volume(tmp_path / "v.ctv")


def test_trailing_bytes(tmp_path):
    save_volume(tmp_path / "v.ctv", Volume(np.zeros((1, 2, 2), dtype=np.int16), SPACING))
    with open(tmp_path / "v.ctv", "ab") as fh:
        fh.write(b"\0\0")
    with pytest.raises(VolumeFormatError, match="trailing"):
        load_volume(tmp_path / "v.ctv")


def test_out_of_range_hu_reports_offset(tmp_path):
    head = b'{"magic":"CTCSV1","nx":2,"ny":1,"nz":1,"dx":1,"dy":1,"dz":1,"dtype":"i16le"}\n'
    (tmp_path / "v.ctv").write_bytes(head + np.array([0, 4000], "<i2").tobytes())
    with pytest.raises(VolumeFormatError, match=f"byte offset {len(head) + 2}"):
        load_volume(tmp_path / "v.ctv")


def test_bad_magic_and_mask_labels(tmp_path):
    save_mask(tmp_path / "m.ctm", ArteryLabelMap(np.zeros((1, 1, 2), dtype=np.uint8), SPACING))
    with pytest.raises(VolumeFormatError, match="magic"):
        load_volume(tmp_path / "m.ctm")
    head = b'{"magic":"CTCSM1","nx":2,"ny":1,"nz":1,"dx":1,"dy":1,"dz":1,"dtype":"u8"}\n'
    (tmp_path / "bad.ctm").write_bytes(head + bytes([0, 7]))
    with pytest.raises(VolumeFormatError, match="label 7"):
        load_mask(tmp_path / "bad.ctm")


def test_volume_rejects_out_of_range():
    with pytest.raises(ValueError):
        Volume(np.full((1, 1, 1), 4000), SPACING)
    with pytest.raises(ValueError):
        Volume(np.zeros((1, 1, 1)), (0.5, 0, 1))


@given(hnp.arrays(np.int16, hnp.array_shapes(min_dims=3, max_dims=3, max_side=5),
                  elements=st.integers(-1024, 3071)))
def test_round_trip_random(tmp_path_factory, hu):
    path = tmp_path_factory.mktemp("rt") / "v.ctv"
    save_volume(path, Volume(hu, SPACING))
    assert np.array_equal(load_volume(path).hu, hu)


def test_phantom_round_trip(tmp_path):
    spec = cohort.PhantomSpec(lesions=(cohort.LesionSpec("RCA", (23.5, 23.5, 10.0), (2.0, 2.0, 0.0), peak_hu=700),),
                              noise_sigma=15.0)
    ph = cohort.generate_phantom(spec, seed=4)
    save_volume(tmp_path / "v.ctv", ph.volume)
    save_mask(tmp_path / "m.ctm", ph.mask)
    assert load_volume(tmp_path / "v.ctv").hu.tobytes() == ph.volume.hu.tobytes()
    assert np.array_equal(load_mask(tmp_path / "m.ctm").labels, ph.mask.labels)


def test_clip_normalize_points():
    v = Volume(np.array([-1024, 1024, 0, 3000], dtype=np.int16).reshape(1, 1, 4), SPACING)
    assert clip_normalize(v).ravel().tolist() == [0.0, 1.0, 0.5, 1.0]
    assert clip_normalize(v, PreprocessConfig(normalize=False)).ravel().tolist() == [-1024, 1024, 0, 1024]
    with pytest.raises(ValueError):
        PreprocessConfig(clip_lo=10, clip_hi=10)


@given(hnp.arrays(np.int16, (2, 3, 4), elements=st.integers(-1024, 3071)))
def test_clip_normalize_monotone(hu):
    out = clip_normalize(Volume(hu, SPACING)).ravel()
    assert ((out >= 0) & (out <= 1)).all()
    order = np.argsort(hu.ravel(), kind="stable")
    assert (np.diff(out[order]) >= 0).all()


def _grid(voxels, shape=(3, 3, 3)):
    hu = np.zeros(shape, dtype=np.int16)
    lab = np.zeros(shape, dtype=np.uint8)
    for x, y, z, h, a in voxels:
        hu[z, y, x], lab[z, y, x] = h, a
    return Volume(hu, SPACING), ArteryLabelMap(lab, SPACING)


def test_extract_no_labels():
    v, m = _grid([])
    assert extract_lesions(Volume(np.full((2, 2, 2), 500), SPACING), ArteryLabelMap(np.zeros((2, 2, 2)), SPACING)) == []
    assert extract_lesions(v, m) == []


def test_extract_single_voxel():
    (les,) = extract_lesions(*_grid([(1, 1, 1, 200, 2)]))
    assert les.peak_hu == 200 and les.artery == 2 and les.per_slice_area == {1: 0.25}
    assert les.artery_name == "LAD" and les.centroid.tolist() == [0.5, 0.5, 2.5]


def test_diagonal_pair_connectivity():
    v, m = _grid([(0, 0, 0, 300, 1), (1, 1, 1, 300, 1)])
    assert len(extract_lesions(v, m, ExtractionConfig(connectivity=26))) == 1
    assert len(extract_lesions(v, m, ExtractionConfig(connectivity=18))) == 2
    assert len(extract_lesions(v, m, ExtractionConfig(connectivity=6))) == 2


def test_edge_pair_18_connectivity():
    v, m = _grid([(0, 0, 0, 300, 1), (1, 1, 0, 300, 1)])
    assert len(extract_lesions(v, m, ExtractionConfig(connectivity=18))) == 1
    assert len(extract_lesions(v, m, ExtractionConfig(connectivity=6))) == 2


def test_components_never_span_arteries():
    v, m = _grid([(0, 0, 0, 300, 1), (1, 0, 0, 300, 2)])
    les = extract_lesions(v, m)
    assert [l.artery for l in les] == [1, 2]


def test_ordering_and_min_voxels():
    v, m = _grid([(2, 2, 2, 300, 1), (0, 0, 0, 300, 1), (0, 0, 2, 300, 3), (1, 0, 2, 300, 3)])
    les = extract_lesions(v, m, ExtractionConfig(connectivity=6))
    assert [(l.artery, int(l.voxels[:, 2].min())) for l in les] == [(1, 0), (1, 2), (3, 2)]
    assert [l.id for l in les] == [1, 2, 3]
    les = extract_lesions(v, m, ExtractionConfig(connectivity=6, min_lesion_voxels=2))
    assert len(les) == 1 and les[0].artery == 3 and les[0].id == 1


def test_dims_mismatch():
    with pytest.raises(ValueError, match="dims"):
        extract_lesions(Volume(np.zeros((2, 2, 2)), SPACING), ArteryLabelMap(np.zeros((2, 2, 3)), SPACING))


def test_config_validation():
    with pytest.raises(ValueError):
        ExtractionConfig(connectivity=8)
    with pytest.raises(ValueError):
        ExtractionConfig(min_lesion_voxels=0)


grids = st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)).flatmap(
    lambda s: st.tuples(hnp.arrays(np.int16, s, elements=st.sampled_from([0, 129, 130, 400])),
                        hnp.arrays(np.uint8, s, elements=st.integers(0, 2))))


@given(grids, st.sampled_from([6, 18, 26]))
def test_partition_and_oracle(grid, conn):
    hu, lab = grid
    les = extract_lesions(Volume(hu, SPACING), ArteryLabelMap(lab, SPACING), ExtractionConfig(connectivity=conn))
    members = [tuple(v) for l in les for v in l.voxels.tolist()]
    zz, yy, xx = np.nonzero((hu >= 130) & (lab > 0))
    assert sorted(members) == sorted(zip(xx.tolist(), yy.tolist(), zz.tolist()))
    assert len(set(members)) == len(members)
    for l in les:
        assert (l.hu >= 130).all()
        assert len({int(lab[z, y, x]) for x, y, z in l.voxels.tolist()}) == 1
        assert sum(l.per_slice_area.values()) * 2.5 == pytest.approx(l.voxel_count * 0.625, rel=1e-15)
    got = sorted(((l.artery, frozenset(map(tuple, l.voxels.tolist()))) for l in les),
                 key=lambda c: (c[0], sorted(c[1])))
    assert got == flood_fill(hu, lab, 130, conn)
