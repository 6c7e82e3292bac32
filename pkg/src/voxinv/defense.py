"""Test-time defenses: point-cloud augmentation before voxelization and Gaussian
noise on the shared feature, plus a sweep that scores the attack under each.
"""
from dataclasses import dataclass
import csv
import io
import math

import numpy as np

from .backbone import forward_with_taps
from .inverter import invert, restore_points
from .metrics import evaluate
from .sparse.autograd import Tensor
from .sparse.tensor import SparseVoxelTensor, coords_from_keys
from .voxelgrid import as_cloud, voxelize

AUGMENTATIONS = ("rotate_z", "scale", "sample")
NOISES = ("noise_distributed", "noise_feature", "noise_empty")
KINDS = AUGMENTATIONS + NOISES

# dense activation beyond this many cells is refused
DEFAULT_CELL_CAP = 1 << 22


@dataclass(frozen=True)
class PerturbationSpec:
    """``magnitude`` is degrees (rotate_z), percent (scale), keep fraction (sample), or sigma."""

    kind: str
    magnitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation {self.kind!r}; expected one of {KINDS}")
        m = float(self.magnitude)
        object.__setattr__(self, "magnitude", m)
        if self.kind == "sample":
            if not 0.0 < m <= 1.0:
                raise ValueError(f"sample keep fraction must be in (0, 1], got {m}")
        elif m < 0 or not math.isfinite(m):
            raise ValueError(f"{self.kind} magnitude must be finite and >= 0, got {m}")

    @property
    def is_augmentation(self):
        return self.kind in AUGMENTATIONS

    def label(self):
        return f"{self.kind}:{self.magnitude:g}"


def augment_pointcloud(cloud, spec):
    cloud = as_cloud(cloud)
    if not spec.is_augmentation:
        raise ValueError(f"{spec.kind} is not a point-cloud augmentation")
    rng = np.random.default_rng(spec.seed)
    out = cloud.copy()
    if spec.kind == "rotate_z":
        theta = np.deg2rad(rng.uniform(-spec.magnitude, spec.magnitude))
        c, s = np.cos(theta), np.sin(theta)
        xy = cloud[:, :2].astype(np.float64)
        out[:, 0] = c * xy[:, 0] - s * xy[:, 1]
        out[:, 1] = s * xy[:, 0] + c * xy[:, 1]
    elif spec.kind == "scale":
        factor = rng.uniform(1 - spec.magnitude / 100, 1 + spec.magnitude / 100)
        out[:, :3] = cloud[:, :3].astype(np.float64) * factor
    else:
        keep = math.ceil(spec.magnitude * len(cloud))
        rows = np.sort(rng.choice(len(cloud), size=keep, replace=False))
        out = cloud[rows]
    return out


def inject_feature_noise(f, spec, cell_cap=DEFAULT_CELL_CAP):
    """Add N(0, sigma^2) noise to ``f`` on the cells ``spec.kind`` selects."""
    if spec.kind not in NOISES:
        raise ValueError(f"{spec.kind} is not a feature-noise kind")
    sigma = spec.magnitude
    rng = np.random.default_rng(spec.seed)
    data = f.feats.data
    if spec.kind == "noise_feature" or sigma == 0:
        noisy = data + rng.normal(0.0, sigma, data.shape).astype(data.dtype) if sigma else data.copy()
        return SparseVoxelTensor(f.coords, Tensor(noisy), f.shape, f.stride_level)
    if f.n_cells > cell_cap:
        raise ValueError(f"{spec.kind} would activate {f.n_cells} cells, over the cap of {cell_cap}")
    dense = np.zeros((f.n_cells, f.channels), data.dtype)
    dense[f.keys()] = data
    if spec.kind == "noise_distributed":
        dense += rng.normal(0.0, sigma, dense.shape).astype(data.dtype)
    else:
        empty = np.ones(f.n_cells, bool)
        empty[f.keys()] = False
        dense[empty] = rng.normal(0.0, sigma, (int(empty.sum()), f.channels)).astype(data.dtype)
    coords = coords_from_keys(np.arange(f.n_cells), f.shape)
    return SparseVoxelTensor(coords, Tensor(dense), f.shape, f.stride_level)


SWEEP_FIELDS = ("kind", "magnitude", "seed", "cd_cm", "hd_cm", "f1", "active_in", "active_out")


def row_seed(base_seed, index):
    """Per-row seed, independent of execution order."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


def perturbed_attack(backbone, inverter, cloud, spec, voxel_seed=0):
    """``(restored cloud, active_in, active_out)`` under one perturbation.

    ``active_in`` counts the tapped feature's active cells before noise,
    ``active_out`` after.
    """
    grid = inverter.spec.backbone.grid
    depth = inverter.spec.depth
    source = augment_pointcloud(cloud, spec) if spec.is_augmentation else cloud
    taps, _ = forward_with_taps(backbone, voxelize(source, grid, seed=voxel_seed))
    f_n = taps[depth - 1]
    shared = f_n if spec.is_augmentation else inject_feature_noise(f_n, spec)
    result = invert(inverter, shared)
    return restore_points(result.final, grid, inverter.spec.method), f_n.n_active, shared.n_active


def defense_sweep(backbone, inverter, corpus, specs, threshold=None):
    """One row dict per spec; metrics are averaged over ``corpus`` against the original clouds.

    Scene ``j`` of spec ``i`` uses seed ``row_seed(spec.seed, j)``.
    """
    grid = inverter.spec.backbone.grid
    threshold = grid.voxel_diagonal if threshold is None else threshold
    rows = []
    for spec in specs:
        try:
            cds, hds, f1s, ins, outs = [], [], [], [], []
            for j, cloud in enumerate(corpus):
                s = PerturbationSpec(spec.kind, spec.magnitude, row_seed(spec.seed, j))
                restored, a_in, a_out = perturbed_attack(backbone, inverter, cloud, s)
                rep = evaluate(cloud, restored, threshold)
                cds.append(rep.cd)
                hds.append(rep.hd)
                f1s.append(rep.f1)
                ins.append(a_in)
                outs.append(a_out)
        except Exception as e:
            raise type(e)(f"defense sweep failed at {spec.label()}: {e}") from e
        rows.append({"kind": spec.kind, "magnitude": spec.magnitude, "seed": spec.seed,
                     "cd_cm": 100 * float(np.mean(cds)), "hd_cm": 100 * float(np.mean(hds)),
                     "f1": float(np.mean(f1s)), "active_in": int(np.sum(ins)),
                     "active_out": int(np.sum(outs))})
    return rows


def sweep_csv(rows, header_lines=()):
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.DictWriter(buf, fieldnames=SWEEP_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.9g}" if isinstance(r[k], float) else r[k]) for k in SWEEP_FIELDS})
    return buf.getvalue()
