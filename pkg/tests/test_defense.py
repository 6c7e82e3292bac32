import math

import numpy as np
import pytest
from scipy import stats

from voxinv.backbone import BackboneSpec, build_backbone
from voxinv.defense import (
    PerturbationSpec,
    augment_pointcloud,
    defense_sweep,
    inject_feature_noise,
    perturbed_attack,
    row_seed,
    sweep_csv,
)
from voxinv.inverter import InverterSpec, attack, build_inverter
from voxinv.metrics import evaluate
from voxinv.sparse import Tensor
from voxinv.sparse.tensor import SparseVoxelTensor
from voxinv.voxelgrid import GridSpec


@pytest.fixture
def cloud(rng):
    return np.column_stack([rng.uniform(-5, 5, (500, 3)), rng.uniform(0, 1, 500)]).astype(np.float32)


def sparse(rng, shape=(6, 6, 4), n=30, channels=3):
    keys = np.sort(rng.choice(int(np.prod(shape)), n, replace=False))
    coords = np.stack(np.unravel_index(keys, shape), axis=1)
    return SparseVoxelTensor(coords, Tensor(rng.normal(size=(n, channels)).astype(np.float32)), shape)


@pytest.mark.parametrize("kind, mag", [("rotate_z", -1), ("scale", -5), ("sample", 0.0),
                                       ("sample", 1.5), ("noise_feature", -0.1), ("blur", 1)])
def test_invalid_specs(kind, mag):
    with pytest.raises(ValueError):
        PerturbationSpec(kind, mag)


def test_rotate_zero_is_identity(cloud):
    out = augment_pointcloud(cloud, PerturbationSpec("rotate_z", 0))
    np.testing.assert_array_equal(out, cloud)


def test_rotation_preserves_z_and_xy_norm(cloud):
    out = augment_pointcloud(cloud, PerturbationSpec("rotate_z", 30, seed=2))
    np.testing.assert_array_equal(out[:, 2:], cloud[:, 2:])
    np.testing.assert_allclose(np.hypot(out[:, 0], out[:, 1]), np.hypot(cloud[:, 0], cloud[:, 1]),
                               rtol=1e-5, atol=1e-5)
    assert not np.allclose(out[:, :2], cloud[:, :2])


def test_scale_stays_in_range(cloud):
    for seed in range(20):
        out = augment_pointcloud(cloud, PerturbationSpec("scale", 10, seed=seed))
        ratio = out[:, :3] / np.where(cloud[:, :3] == 0, 1, cloud[:, :3])
        f = ratio[0, 0]
        assert 0.9 - 1e-6 <= f <= 1.1 + 1e-6
        np.testing.assert_allclose(ratio, f, rtol=1e-5)


def test_sample_keeps_ceil_fraction(cloud):
    for keep in (0.1, 0.33, 0.5, 1.0):
        out = augment_pointcloud(cloud, PerturbationSpec("sample", keep, seed=1))
        assert len(out) == math.ceil(keep * len(cloud))
    full = augment_pointcloud(cloud, PerturbationSpec("sample", 1.0))
    np.testing.assert_array_equal(np.sort(full, axis=0), np.sort(cloud, axis=0))


def test_augmentations_are_seeded(cloud):
    spec = PerturbationSpec("rotate_z", 5, seed=7)
    np.testing.assert_array_equal(augment_pointcloud(cloud, spec), augment_pointcloud(cloud, spec))


def test_noise_kind_checks(cloud, rng):
    with pytest.raises(ValueError):
        augment_pointcloud(cloud, PerturbationSpec("noise_feature", 0.1))
    with pytest.raises(ValueError):
        inject_feature_noise(sparse(rng), PerturbationSpec("rotate_z", 1))


@pytest.mark.parametrize("kind", ["noise_distributed", "noise_feature", "noise_empty"])
def test_zero_sigma_is_identity(kind, rng):
    f = sparse(rng)
    out = inject_feature_noise(f, PerturbationSpec(kind, 0.0))
    np.testing.assert_array_equal(out.coords, f.coords)
    np.testing.assert_array_equal(out.feats.data, f.feats.data)


def test_feature_noise_preserves_active_set(rng):
    f = sparse(rng)
    out = inject_feature_noise(f, PerturbationSpec("noise_feature", 0.5, seed=3))
    np.testing.assert_array_equal(out.coords, f.coords)
    assert not np.array_equal(out.feats.data, f.feats.data)


def test_feature_noise_statistics():
    n = 100_000
    coords = np.stack(np.unravel_index(np.arange(n), (100, 100, 10)), axis=1)
    f = SparseVoxelTensor(coords, Tensor(np.zeros((n, 1), np.float64)), (100, 100, 10))
    delta = inject_feature_noise(f, PerturbationSpec("noise_feature", 0.2, seed=11)).feats.data[:, 0]
    se = 0.2 / np.sqrt(n)
    assert abs(delta.mean()) < 4 * se
    assert abs(delta.var(ddof=1) / 0.04 - 1) < 4 * np.sqrt(2 / (n - 1))
    assert stats.normaltest(delta).pvalue > 1e-3


def test_distributed_noise_activates_every_cell(rng):
    f = sparse(rng)
    out = inject_feature_noise(f, PerturbationSpec("noise_distributed", 0.1, seed=1))
    assert out.n_active == f.n_cells
    out.validate()


def test_empty_noise_keeps_original_features(rng):
    f = sparse(rng)
    out = inject_feature_noise(f, PerturbationSpec("noise_empty", 0.3, seed=1))
    assert out.n_active == f.n_cells
    idx = np.searchsorted(out.keys(), f.keys())
    np.testing.assert_array_equal(out.feats.data[idx], f.feats.data)


def test_empty_noise_on_dense_tensor_is_identity(rng):
    shape = (3, 3, 2)
    f = sparse(rng, shape=shape, n=18)
    out = inject_feature_noise(f, PerturbationSpec("noise_empty", 0.5, seed=1))
    np.testing.assert_array_equal(out.coords, f.coords)
    np.testing.assert_array_equal(out.feats.data, f.feats.data)


def test_cell_cap_guard(rng):
    f = sparse(rng)
    with pytest.raises(ValueError, match="cap"):
        inject_feature_noise(f, PerturbationSpec("noise_distributed", 0.1), cell_cap=10)


def test_row_seeds_are_distinct_and_stable():
    seeds = [row_seed(0, i) for i in range(100)]
    assert len(set(seeds)) == 100
    assert seeds == [row_seed(0, i) for i in range(100)]


@pytest.fixture(scope="module")
def tiny_attack():
    grid = GridSpec((0.0, -2.0, -3.0), (0.25, 0.25, 0.25), (16, 16, 16))
    bspec = BackboneSpec(depth=2, grid=grid, channel_plan=((4, 8), (8, 8), (8, 8), (8, 8)))
    rng = np.random.default_rng(0)
    corpus = [np.column_stack([rng.uniform((0, -2, -3), (4, 2, 1), (200, 3)), np.full(200, 0.5)])
              .astype(np.float32) for _ in range(2)]
    backbone = build_backbone(bspec, seed=0, calibration_clouds=corpus)
    inverter = build_inverter(InverterSpec(method="concretizer", depth=2, backbone=bspec))
    # bias the heads open so the untrained chain restores something
    for head in inverter.heads.values():
        head.bias.data[:] = 3.0
    return backbone, inverter, corpus


def test_identity_sweep_matches_plain_attack(tiny_attack):
    backbone, inverter, corpus = tiny_attack
    rows = defense_sweep(backbone, inverter, corpus, [PerturbationSpec("noise_feature", 0.0)])
    thr = inverter.spec.backbone.grid.voxel_diagonal
    reps = [evaluate(c, attack(inverter, backbone, c), thr) for c in corpus]
    assert rows[0]["cd_cm"] == 100 * float(np.mean([r.cd for r in reps]))
    assert rows[0]["f1"] == float(np.mean([r.f1 for r in reps]))
    assert rows[0]["active_in"] == rows[0]["active_out"]


def test_sweep_is_deterministic_and_csv(tiny_attack):
    backbone, inverter, corpus = tiny_attack
    specs = [PerturbationSpec("rotate_z", 3, seed=1), PerturbationSpec("noise_empty", 0.2, seed=2)]
    a = defense_sweep(backbone, inverter, corpus, specs)
    b = defense_sweep(backbone, inverter, corpus, specs)
    assert a == b
    assert a[1]["active_out"] == 2 * 4 * 4 * 4  # every level-2 cell, both scenes
    text = sweep_csv(a, ["seed=0"])
    lines = text.strip().split("\n")
    assert lines[0] == "# seed=0"
    assert lines[1] == "kind,magnitude,seed,cd_cm,hd_cm,f1,active_in,active_out"
    assert lines[2].startswith("rotate_z,3,1,")


def test_perturbed_attack_reports_counts(tiny_attack):
    backbone, inverter, corpus = tiny_attack
    _, a_in, a_out = perturbed_attack(backbone, inverter, corpus[0],
                                      PerturbationSpec("noise_distributed", 0.1))
    assert a_out == 64 and a_in <= 64
