"""Point clouds <-> sparse voxel tensors.

A point cloud is a ``(k, 4)`` float32 array of ``(x, y, z, intensity)`` rows
in meters. Grid ranges are lower-inclusive and upper-exclusive per axis.
"""
from dataclasses import dataclass

import numpy as np

from .sparse.autograd import Tensor
from .sparse.tensor import SparseVoxelTensor, coords_from_keys, linear_keys


def as_cloud(points):
    """Coerce to a ``(k, 4)`` float32 array (a missing intensity column becomes 0)."""
    p = np.asarray(points, dtype=np.float32)
    if p.size == 0:
        return np.zeros((0, 4), np.float32)
    p = p.reshape(len(p), -1)
    if p.shape[1] == 3:
        p = np.concatenate([p, np.zeros((len(p), 1), np.float32)], axis=1)
    if p.shape[1] != 4:
        raise ValueError(f"point rows must have 3 or 4 values, got {p.shape[1]}")
    if not np.all(np.isfinite(p[:, :3])):
        raise ValueError("point coordinates must be finite")
    return p


@dataclass(frozen=True)
class GridSpec:
    origin: tuple
    voxel_size: tuple
    shape: tuple
    max_points_per_voxel: int = 5

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        if len(self.origin) != 3 or len(self.voxel_size) != 3 or len(self.shape) != 3:
            raise ValueError("origin, voxel_size and shape need 3 entries each")
        if min(self.voxel_size) <= 0:
            raise ValueError("voxel sizes must be positive")
        if min(self.shape) <= 0:
            raise ValueError("grid shape must be positive")
        if self.max_points_per_voxel < 1:
            raise ValueError("max_points_per_voxel must be >= 1")

    @property
    def upper(self):
        return tuple(o + n * v for o, n, v in zip(self.origin, self.shape, self.voxel_size))

    @property
    def n_cells(self):
        return int(np.prod(self.shape))

    @property
    def voxel_diagonal(self):
        return float(np.sqrt(np.sum(np.square(self.voxel_size))))

    def voxel_index(self, xyz):
        """Integer voxel index per point (may be out of range)."""
        rel = (np.asarray(xyz, np.float64)[:, :3] - np.array(self.origin)) / np.array(self.voxel_size)
        return np.floor(rel).astype(np.int64)

    def contains(self, xyz):
        idx = self.voxel_index(xyz)
        return np.all((idx >= 0) & (idx < np.array(self.shape)), axis=1)

    def centers(self, coords):
        c = np.asarray(coords, np.float64)
        return np.array(self.origin) + (c + 0.5) * np.array(self.voxel_size)

    def to_dict(self):
        return {"origin": list(self.origin), "voxel_size": list(self.voxel_size),
                "shape": list(self.shape), "axis_order": "xyz",
                "max_points_per_voxel": self.max_points_per_voxel}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.pop("axis_order", "xyz") != "xyz":
            raise ValueError("only xyz axis order is supported")
        return cls(**d)


@dataclass
class OccupancyField:
    """Per-active-coordinate occupancy probability over a grid."""

    coords: np.ndarray
    prob: np.ndarray
    shape: tuple

    @classmethod
    def from_logits(cls, logits):
        z = logits.feats.data[:, 0].astype(np.float64)
        return cls(logits.coords, 1.0 / (1.0 + np.exp(-z)), logits.shape)

    @classmethod
    def ground_truth(cls, f0):
        return cls(f0.coords, np.ones(f0.n_active), f0.shape)

    @property
    def n_active(self):
        return self.coords.shape[0]

    def positive(self, threshold=0.5):
        return self.coords[self.prob >= threshold]


def crop_range(cloud, spec):
    cloud = as_cloud(cloud)
    return cloud[spec.contains(cloud)]


def voxelize(cloud, spec, seed=0):
    """Mean (x, y, z, intensity) over at most ``max_points_per_voxel`` points per voxel.

    Points are shuffled with ``seed`` before the cap is applied; the surviving
    points' absolute world coordinates are averaged.
    """
    cloud = crop_range(cloud, spec)
    if len(cloud) == 0:
        return SparseVoxelTensor.empty(spec.shape, 4)
    perm = np.random.default_rng(seed).permutation(len(cloud))
    pts = cloud[perm].astype(np.float64)
    keys = linear_keys(spec.voxel_index(pts), spec.shape)
    order = np.argsort(keys, kind="stable")
    keys, pts = keys[order], pts[order]
    uniq, start, counts = np.unique(keys, return_index=True, return_counts=True)
    rank = np.arange(len(keys)) - np.repeat(start, counts)
    keep = rank < spec.max_points_per_voxel
    kept_keys = keys[keep]
    sums = np.add.reduceat(pts[keep], np.searchsorted(kept_keys, uniq), axis=0)
    n = np.minimum(counts, spec.max_points_per_voxel)[:, None]
    feats = (sums / n).astype(np.float32)
    return SparseVoxelTensor(coords_from_keys(uniq, spec.shape), Tensor(feats), spec.shape)


def devoxelize_centers(occ, spec, threshold=0.5):
    """One point at each voxel center whose probability is >= ``threshold``."""
    if tuple(occ.shape) != spec.shape:
        raise ValueError(f"occupancy grid {tuple(occ.shape)} does not match spec {spec.shape}")
    xyz = spec.centers(occ.positive(threshold))
    return as_cloud(np.concatenate([xyz, np.zeros((len(xyz), 1))], axis=1)) if len(xyz) else \
        np.zeros((0, 4), np.float32)


def occupancy_histogram(cloud, spec):
    """``{points per voxel: voxel count}``; bucket 0 counts the empty cells."""
    cloud = crop_range(cloud, spec)
    keys = linear_keys(spec.voxel_index(cloud), spec.shape)
    _, counts = np.unique(keys, return_counts=True)
    per, n = np.unique(counts, return_counts=True)
    hist = {0: spec.n_cells - len(counts)}
    hist.update({int(a): int(b) for a, b in zip(per, n)})
    return hist
