import json
import math

import numpy as np
import pytest

from carotidseg.phantom import (LUMEN_INTENSITY, SuiteConfig, VesselSpec, enclosure_violations,
                                generate_case, generate_suite, load_manifest)
from carotidseg.volume import LUMEN, WALL, read_volume

from .conftest import bfs_components


def lattice_count(cy, cx, r_outer, h, w):
    n = 0
    for y in range(h):
        for x in range(w):
            if math.sqrt((y - cy) ** 2 + (x - cx) ** 2) < r_outer:
                n += 1
    return n


def test_straight_tube_slice_counts(straight_case):
    fg = (straight_case.gt.data > 0).reshape(32, -1).sum(axis=1)
    expected = lattice_count(16.0, 16.0, 4.0, 32, 32)
    assert fg.tolist() == [expected] * 32
    lumen = (straight_case.gt.data == LUMEN).reshape(32, -1).sum(axis=1)
    assert set(lumen.tolist()) == {lattice_count(16.0, 16.0, 3.0, 32, 32)}


def test_annulus_encloses_lumen(straight_case, drift_case, stenotic_case):
    for case in (straight_case, drift_case, stenotic_case):
        assert enclosure_violations(case.gt.data) == 0
    # straight tube: the full 6-neighbourhood is enclosed as well
    lab = straight_case.gt.data
    lumen = np.argwhere(lab == LUMEN)
    for z, y, x in lumen:
        for dz, dy, dx in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]:
            nz, ny, nx = z + dz, y + dy, x + dx
            if 0 <= nz < 32:
                assert lab[nz, ny, nx] in (LUMEN, WALL)


def test_interval_annotations():
    spec = VesselSpec(center=(8.0, 8.0), radius=2.0, wall_thickness=1.0)
    case = generate_case(spec, dims=(16, 16, 16), interval=4, noise_sigma=0.0)
    assert case.sparse.annotated_slices == (0, 4, 8, 12)


def test_sparse_matches_gt_on_annotated_slices(drift_case):
    ann = list(drift_case.sparse.annotated_slices)
    assert np.array_equal(drift_case.sparse.data[ann], drift_case.gt.data[ann])
    rest = [z for z in range(drift_case.gt.dims[0]) if z not in ann]
    assert not drift_case.sparse.data[rest].any()


def test_intensity_model(straight_case):
    img, lab = straight_case.image.data, straight_case.gt.data
    assert img.dtype == np.float32
    # lumen center is bright, far background dark
    assert img[5, 16, 16] == pytest.approx(LUMEN_INTENSITY, abs=1e-3)
    assert img[5, 0, 0] == pytest.approx(0.1, abs=1e-3)
    assert img[lab == WALL].mean() < img[lab == LUMEN].mean()


def test_determinism():
    spec = VesselSpec(center=(16.0, 16.0), radius=3.0, drift_amplitude=(2.0, 1.0))
    a = generate_case(spec, dims=(16, 32, 32), noise_sigma=0.1, seed=7)
    b = generate_case(spec, dims=(16, 32, 32), noise_sigma=0.1, seed=7)
    c = generate_case(spec, dims=(16, 32, 32), noise_sigma=0.1, seed=8)
    assert a.image == b.image and a.gt == b.gt and a.sparse == b.sparse
    assert not np.array_equal(a.image.data, c.image.data)


def test_border_clearance_violation():
    spec = VesselSpec(center=(3.0, 16.0), radius=3.0, wall_thickness=1.0)
    with pytest.raises(ValueError, match="border"):
        generate_case(spec, dims=(8, 32, 32))


def test_radius_floor():
    spec = VesselSpec(center=(16.0, 16.0), radius=0.8)
    with pytest.raises(ValueError, match="below 1 voxel"):
        generate_case(spec, dims=(8, 32, 32))


def test_stenosis_narrows_lumen(stenotic_case):
    lumen = (stenotic_case.gt.data == LUMEN).reshape(32, -1).sum(axis=1)
    assert lumen[14] < 0.5 * lumen[0]


def test_bifurcation_has_two_components_below_split():
    spec = VesselSpec(center=(32.0, 32.0), radius=4.0, wall_thickness=1.5, bifurcation_z=15.5,
                      child_offsets=((0.0, -9.0), (0.0, 9.0)))
    case = generate_case(spec, dims=(32, 64, 64), noise_sigma=0.0)
    for z in range(32):
        n = bfs_components(case.gt.data[z] == LUMEN)
        assert n == (1 if z <= 15 else 2), z


def test_suite_manifest_and_split(tmp_path):
    cfg = SuiteConfig(n_cases=10, split=(7, 1, 2), dims=(16, 48, 48), seed=3,
                      radius_range=(2.5, 3.0), drift_amplitude_range=(1.0, 3.0))
    manifest = generate_suite(cfg, tmp_path / "s")
    splits = [e["split"] for e in manifest]
    assert splits.count("train") == 7 and splits.count("val") == 1 and splits.count("test") == 2
    root, entries = load_manifest(tmp_path / "s" / "manifest.json")
    assert entries == manifest
    assert set(entries[0]) == {"case_id", "image_path", "gt_path", "sparse_path", "split"}
    gt = read_volume(root / entries[0]["gt_path"])
    assert gt.dims == (16, 48, 48)
    assert json.loads((root / "manifest.json").read_text()) == manifest


def test_suite_is_byte_identical_for_same_seed(tmp_path):
    cfg = SuiteConfig(n_cases=3, split=(1, 1, 1), dims=(12, 40, 40), seed=11,
                      radius_range=(2.5, 3.0), drift_amplitude_range=(1.0, 3.0),
                      bifurcation_probability=0.5)
    generate_suite(cfg, tmp_path / "a")
    generate_suite(cfg, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 3 * 6 + 2
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_two_vessel_suite(tmp_path):
    cfg = SuiteConfig(n_cases=1, split=(1, 0, 0), two_vessels=True, seed=2)
    generate_suite(cfg, tmp_path)
    gt = read_volume(tmp_path / "gt" / "case000.vvolh")
    assert bfs_components(gt.data[10] > 0) == 2
