import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxinv.metrics import f1_score
from voxinv.voxelgrid import (
    GridSpec,
    OccupancyField,
    as_cloud,
    crop_range,
    devoxelize_centers,
    occupancy_histogram,
    voxelize,
)

UNIT = GridSpec((0, 0, 0), (1, 1, 1), (4, 4, 4))


def test_voxelize_averages():
    f = voxelize([[0.2, 0.2, 0.2, 0.1], [0.4, 0.4, 0.4, 0.3]], UNIT)
    np.testing.assert_array_equal(f.coords, [[0, 0, 0]])
    np.testing.assert_allclose(f.feats.data, [[0.3, 0.3, 0.3, 0.2]], rtol=1e-6)


def test_voxelize_empty():
    f = voxelize(np.zeros((0, 4)), UNIT)
    assert f.n_active == 0 and f.channels == 4


def test_voxelize_matches_dense_binning(rng):
    pts = rng.uniform(0, 4, size=(1000, 3))
    f = voxelize(pts, UNIT)
    hist = np.histogramdd(pts, bins=(4, 4, 4), range=[(0, 4)] * 3)[0]
    assert f.n_active == np.count_nonzero(hist)
    np.testing.assert_array_equal(f.coords, np.argwhere(hist > 0))


def test_voxelize_cap_uses_first_points_after_shuffle():
    spec = GridSpec((0, 0, 0), (1, 1, 1), (1, 1, 1), max_points_per_voxel=2)
    pts = np.array([[0.1, 0, 0], [0.2, 0, 0], [0.3, 0, 0], [0.9, 0, 0]])
    perm = np.random.default_rng(4).permutation(4)
    expected = pts[perm[:2], 0].mean()
    assert voxelize(pts, spec, seed=4).feats.data[0, 0] == pytest.approx(expected, rel=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 300))
def test_voxelize_invariants(seed, n):
    rng = np.random.default_rng(seed)
    spec = GridSpec((-1.0, -2.0, 0.5), (0.5, 0.25, 0.3), (6, 8, 5))
    pts = rng.uniform(-2, 3, size=(n, 4))
    f = voxelize(pts, spec)
    f.validate()
    assert f.n_active <= min(n, spec.n_cells)
    lo = np.array(spec.origin) + f.coords * np.array(spec.voxel_size)
    hi = lo + np.array(spec.voxel_size)
    xyz = f.feats.data[:, :3].astype(np.float64)
    assert np.all(xyz >= lo - 1e-5) and np.all(xyz < hi + 1e-5)


def test_devoxelize_center():
    occ = OccupancyField(np.array([[1, 2, 3]]), np.array([0.9]), (4, 4, 4))
    np.testing.assert_allclose(devoxelize_centers(occ, UNIT, 0.5), [[1.5, 2.5, 3.5, 0.0]])


def test_devoxelize_below_threshold_empty():
    occ = OccupancyField(np.array([[1, 2, 3], [0, 0, 0]]), np.array([0.2, 0.49]), (4, 4, 4))
    assert devoxelize_centers(occ, UNIT, 0.5).shape == (0, 4)


def test_devoxelize_shape_mismatch():
    occ = OccupancyField(np.zeros((0, 3), int), np.zeros(0), (2, 2, 2))
    with pytest.raises(ValueError):
        devoxelize_centers(occ, UNIT)


def test_round_trip_within_half_diagonal(rng):
    spec = GridSpec((0, -2, -1), (0.25, 0.25, 0.5), (16, 16, 4))
    pts = rng.uniform([0, -2, -1], [4, 2, 1], size=(500, 3))
    restored = devoxelize_centers(OccupancyField.ground_truth(voxelize(pts, spec)), spec)
    d = np.sqrt(((restored[:, None, :3] - pts[None]) ** 2).sum(-1)).min(axis=1)
    assert np.all(d <= spec.voxel_diagonal / 2)
    f1, *_ = f1_score(pts, restored, spec.voxel_diagonal / 2)
    assert f1 == 1.0


def test_crop_boundaries():
    assert len(crop_range([[0, 0, 0]], UNIT)) == 1
    assert len(crop_range([[4, 4, 4]], UNIT)) == 0
    assert len(crop_range([[3.999, 0, 0]], UNIT)) == 1


def test_crop_matches_per_point_test(rng):
    pts = rng.uniform(-1, 5, size=(10, 3))
    kept = crop_range(pts, UNIT)
    mask = [all(0 <= p[d] < 4 for d in range(3)) for p in pts.astype(np.float32)]
    np.testing.assert_array_equal(kept[:, :3], pts.astype(np.float32)[mask])
    np.testing.assert_array_equal(crop_range(kept, UNIT), kept)


def test_histogram_small_cases():
    assert occupancy_histogram([[0.5, 0.5, 0.5]], UNIT) == {0: 63, 1: 1}
    assert occupancy_histogram([[0.5, 0.5, 0.5], [0.6, 0.5, 0.5]], UNIT) == {0: 63, 2: 1}


def test_as_cloud_validation():
    assert as_cloud([[1, 2, 3]]).shape == (1, 4)
    with pytest.raises(ValueError):
        as_cloud([[1, 2]])
    with pytest.raises(ValueError):
        as_cloud([[np.nan, 0, 0]])


@pytest.mark.parametrize("kwargs", [
    dict(origin=(0, 0, 0), voxel_size=(0, 1, 1), shape=(1, 1, 1)),
    dict(origin=(0, 0, 0), voxel_size=(1, 1, 1), shape=(0, 1, 1)),
    dict(origin=(0, 0, 0), voxel_size=(1, 1, 1), shape=(1, 1, 1), max_points_per_voxel=0),
])
def test_gridspec_validation(kwargs):
    with pytest.raises(ValueError):
        GridSpec(**kwargs)
