"""Submanifold, strided, and transposed sparse 3D convolution.

All three variants run through one neighbor table ``nbr[o, k]`` giving the
input row feeding output row ``o`` through kernel tap ``k`` (-1 when that
input voxel is inactive or out of range). Axis order is (x, y, z) throughout.
"""
from dataclasses import dataclass
import itertools

import numpy as np

from . import _backend
from .autograd import accumulate, make_result
from .tensor import SparseVoxelTensor, coords_from_keys, linear_keys

KINDS = ("submanifold", "sparse_down", "inverse_up")


def _triple(v):
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


@dataclass(frozen=True)
class ConvLayerSpec:
    c_in: int
    c_out: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: tuple = None
    kind: str = "submanifold"

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        if self.kind not in KINDS:
            raise ValueError(f"unknown convolution kind {self.kind!r}")
        if self.c_in < 1 or self.c_out < 1:
            raise ValueError("channel counts must be positive")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError("kernel and stride must be positive")
        if self.kind == "submanifold":
            if self.stride != (1, 1, 1):
                raise ValueError("submanifold convolution requires stride (1, 1, 1)")
            if any(k % 2 == 0 for k in self.kernel):
                raise ValueError("submanifold convolution requires odd kernel sizes")
            pad = tuple(k // 2 for k in self.kernel)
            if self.padding is not None and _triple(self.padding) != pad:
                raise ValueError("submanifold padding is fixed at kernel // 2")
            object.__setattr__(self, "padding", pad)
        else:
            object.__setattr__(self, "padding", _triple(self.padding or 0))

    @property
    def volume(self):
        return self.kernel[0] * self.kernel[1] * self.kernel[2]

    def offsets(self):
        return np.array(list(itertools.product(*(range(k) for k in self.kernel))), dtype=np.int32)

    def down_shape(self, in_shape):
        out = tuple((n + 2 * p - k) // s + 1
                    for n, p, k, s in zip(in_shape, self.padding, self.kernel, self.stride))
        if min(out) <= 0:
            raise ValueError(f"{self.kind} layer maps grid {tuple(in_shape)} to empty shape {out}")
        return out

    def check_fine_shape(self, coarse_shape, fine_shape):
        """Fine grid must lie within one stride of the full transposed extent."""
        for c, f, p, k, s in zip(coarse_shape, fine_shape, self.padding, self.kernel, self.stride):
            full = (c - 1) * s - 2 * p + k
            if f <= 0 or abs(f - full) >= s:
                raise ValueError(
                    f"fine grid {tuple(fine_shape)} inconsistent with coarse grid "
                    f"{tuple(coarse_shape)}, kernel {self.kernel}, stride {self.stride}, "
                    f"padding {self.padding}"
                )


class Rulebook:
    __slots__ = ("nbr", "n_in", "_nbr_t")

    def __init__(self, nbr, n_in):
        self.nbr = nbr
        self.n_in = n_in
        self._nbr_t = None

    @property
    def nbr_t(self):
        if self._nbr_t is None:
            self._nbr_t = _backend.kernels().transpose_table(self.nbr, self.n_in)
        return self._nbr_t

    @property
    def n_pairs(self):
        return int(np.count_nonzero(self.nbr >= 0))


def down_output_coords(coords, in_shape, spec):
    """Every output cell whose receptive field touches an active input."""
    out_shape = spec.down_shape(in_shape)
    if coords.shape[0] == 0:
        return np.zeros((0, 3), np.int32), out_shape
    c = coords.astype(np.int64)
    stride = np.array(spec.stride)
    pad = np.array(spec.padding)
    bound = np.array(out_shape)
    keys = []
    for off in spec.offsets():
        v = c + pad - off
        ok = np.all(v % stride == 0, axis=1)
        v = v // stride
        ok &= np.all((v >= 0) & (v < bound), axis=1)
        keys.append(linear_keys(v[ok], out_shape))
    keys = np.unique(np.concatenate(keys))
    return coords_from_keys(keys, out_shape), out_shape


def up_output_coords(coords, spec, fine_shape):
    """Union of each active coarse cell's transposed footprint, clipped to the fine grid."""
    if coords.shape[0] == 0:
        return np.zeros((0, 3), np.int32)
    c = coords.astype(np.int64)
    stride = np.array(spec.stride)
    pad = np.array(spec.padding)
    bound = np.array(fine_shape)
    keys = []
    for off in spec.offsets():
        v = c * stride - pad + off
        ok = np.all((v >= 0) & (v < bound), axis=1)
        keys.append(linear_keys(v[ok], fine_shape))
    keys = np.unique(np.concatenate(keys))
    return coords_from_keys(keys, fine_shape)


def plan(x, spec, fine_shape=None):
    """Output coordinates, output shape, rulebook, and output cache for ``spec`` on ``x``.

    Results are memoized in ``x.cache`` so layers with equal geometry reuse them.
    """
    key = (spec.kind, spec.kernel, spec.stride, spec.padding,
           None if fine_shape is None else tuple(fine_shape))
    hit = x.cache.get(key)
    if hit is not None:
        return hit
    kern = _backend.kernels()
    offsets = spec.offsets()
    in_shape = np.array(x.shape, dtype=np.int64)
    stride = np.array(spec.stride, dtype=np.int64)
    pad = np.array(spec.padding, dtype=np.int64)
    if spec.kind == "submanifold":
        out_coords, out_shape, out_cache = x.coords, x.shape, x.cache
        nbr = kern.neighbor_table(x.coords, in_shape, out_coords, offsets, stride, pad, False)
    elif spec.kind == "sparse_down":
        out_coords, out_shape = down_output_coords(x.coords, x.shape, spec)
        out_cache = {}
        nbr = kern.neighbor_table(x.coords, in_shape, out_coords, offsets, stride, pad, False)
    else:
        if fine_shape is None:
            raise ValueError("inverse_up convolution needs the fine grid shape")
        out_shape = tuple(int(s) for s in fine_shape)
        spec.check_fine_shape(x.shape, out_shape)
        out_coords = up_output_coords(x.coords, spec, out_shape)
        out_cache = {}
        nbr = kern.neighbor_table(x.coords, in_shape, out_coords, offsets, stride, pad, True)
    result = (out_coords, out_shape, Rulebook(nbr, x.n_active), out_cache)
    x.cache[key] = result
    return result


def sparse_conv(x, weight, bias, spec, fine_shape=None):
    """Apply one sparse convolution; ``weight`` has shape kx*ky*kz*Cin*Cout."""
    if x.channels != spec.c_in:
        raise ValueError(f"layer expects {spec.c_in} input channels, tensor has {x.channels}")
    out_coords, out_shape, rb, out_cache = plan(x, spec, fine_shape)
    kern = _backend.kernels()
    nthreads = _backend.threads()
    xf = x.feats
    dtype = xf.data.dtype
    K = spec.volume
    w = np.ascontiguousarray(weight.data.reshape(K, spec.c_in, spec.c_out), dtype=dtype)
    xd = np.ascontiguousarray(xf.data)
    out = np.zeros((out_coords.shape[0], spec.c_out), dtype=dtype)
    if out.shape[0] and xd.shape[0]:
        kern.conv_gather(xd, w, rb.nbr, out, nthreads)
    if bias is not None:
        out += bias.data.astype(dtype, copy=False)

    def backward(g):
        g = np.ascontiguousarray(g, dtype=dtype)
        if xf.requires_grad:
            gin = np.zeros_like(xd)
            if g.shape[0] and gin.shape[0]:
                if spec.kind == "submanifold":
                    # centered odd kernel: the transposed table is nbr with taps mirrored
                    wt = np.ascontiguousarray(w[::-1].transpose(0, 2, 1))
                    kern.conv_gather(g, wt, rb.nbr, gin, nthreads)
                else:
                    wt = np.ascontiguousarray(w.transpose(0, 2, 1))
                    kern.conv_gather(g, wt, rb.nbr_t, gin, nthreads)
            accumulate(xf, gin)
        if weight.requires_grad:
            gw = np.zeros_like(w)
            if g.shape[0] and xd.shape[0]:
                kern.conv_weight_grad(xd, g, rb.nbr, gw, nthreads)
            accumulate(weight, gw.reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            accumulate(bias, g.sum(axis=0))

    parents = (xf, weight) if bias is None else (xf, weight, bias)
    feats = make_result(out, parents, backward)
    level = x.stride_level + {"submanifold": 0, "sparse_down": 1, "inverse_up": -1}[spec.kind]
    return SparseVoxelTensor(out_coords, feats, out_shape, max(level, 0), out_cache)
