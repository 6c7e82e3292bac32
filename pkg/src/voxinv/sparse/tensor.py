from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor


def linear_keys(coords, shape):
    """Row-major linearization of ``(N, 3)`` voxel coordinates."""
    c = np.asarray(coords, dtype=np.int64)
    return (c[:, 0] * shape[1] + c[:, 1]) * shape[2] + c[:, 2]


def coords_from_keys(keys, shape):
    keys = np.asarray(keys, dtype=np.int64)
    z = keys % shape[2]
    xy = keys // shape[2]
    return np.stack([xy // shape[1], xy % shape[1], z], axis=1).astype(np.int32)


@dataclass(eq=False)
class SparseVoxelTensor:
    """Active voxel coordinates with one feature row each over an (nx, ny, nz) grid.

    Absent coordinates are zero vectors. Coordinates are kept in sorted
    row-major order so reductions over rows are reproducible. ``cache`` holds
    rulebooks keyed by layer geometry; tensors with identical coordinates
    share it.
    """

    coords: np.ndarray
    feats: Tensor
    shape: tuple
    stride_level: int = 0
    cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.int32).reshape(-1, 3)
        if not isinstance(self.feats, Tensor):
            self.feats = Tensor(self.feats)
        self.shape = tuple(int(s) for s in self.shape)
        if self.feats.data.ndim != 2 or self.feats.data.shape[0] != self.coords.shape[0]:
            raise ValueError(
                f"feature rows {self.feats.data.shape} do not match {self.coords.shape[0]} coordinates"
            )
        if self.coords.size and (
            self.coords.min() < 0 or np.any(self.coords.max(axis=0) >= np.array(self.shape))
        ):
            raise ValueError(f"coordinates fall outside grid {self.shape}")

    @property
    def channels(self):
        return self.feats.data.shape[1]

    @property
    def n_active(self):
        return self.coords.shape[0]

    @property
    def n_cells(self):
        return int(np.prod(self.shape))

    @property
    def density(self):
        return self.n_active / self.n_cells

    def keys(self):
        if "_keys" not in self.cache:
            self.cache["_keys"] = linear_keys(self.coords, self.shape)
        return self.cache["_keys"]

    def with_feats(self, feats):
        """Same coordinates (and rulebook cache), new features."""
        return SparseVoxelTensor(self.coords, feats, self.shape, self.stride_level, self.cache)

    def detached(self, fresh_cache=False):
        data = Tensor(self.feats.data)
        cache = {} if fresh_cache else self.cache
        return SparseVoxelTensor(self.coords, data, self.shape, self.stride_level, cache)

    def validate(self):
        k = linear_keys(self.coords, self.shape)
        if np.unique(k).size != k.size:
            raise ValueError("duplicate coordinates in sparse tensor")

    def select(self, rows):
        """Sub-tensor of the given rows (kept in the given order)."""
        from .autograd import take_rows

        rows = np.asarray(rows, dtype=np.int64)
        return SparseVoxelTensor(self.coords[rows], take_rows(self.feats, rows), self.shape,
                                 self.stride_level)

    def to_dense(self):
        """Dense ``(C, nx, ny, nz)`` array (tests and small grids only)."""
        out = np.zeros((self.channels,) + self.shape, dtype=self.feats.data.dtype)
        c = self.coords
        out[:, c[:, 0], c[:, 1], c[:, 2]] = self.feats.data.T
        return out

    @classmethod
    def from_dense(cls, dense, mask=None, stride_level=0):
        """Build from ``(C, nx, ny, nz)``; active set = ``mask`` or any nonzero channel."""
        dense = np.asarray(dense)
        if mask is None:
            mask = np.any(dense != 0, axis=0)
        coords = np.argwhere(mask).astype(np.int32)
        feats = dense[:, coords[:, 0], coords[:, 1], coords[:, 2]].T.copy()
        return cls(coords, Tensor(feats), dense.shape[1:], stride_level)

    @classmethod
    def empty(cls, shape, channels, dtype=np.float32, stride_level=0):
        return cls(np.zeros((0, 3), np.int32), Tensor(np.zeros((0, channels), dtype)), shape,
                   stride_level)


def intersect_rows(a_keys, b_keys):
    """Row indices ``(ia, ib)`` of keys present in both sorted-unique key arrays."""
    common, ia, ib = np.intersect1d(a_keys, b_keys, assume_unique=True, return_indices=True)
    return ia, ib
