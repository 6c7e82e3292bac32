"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures and semantics. The hash map is replaced by a sorted key
array searched with ``np.searchsorted``.
"""
import numpy as np


class CoordHash:
    def __init__(self, linear):
        linear = np.asarray(linear, dtype=np.int64)
        self._order = np.argsort(linear, kind="stable").astype(np.int32)
        self._sorted = linear[self._order]
        if self._sorted.size > 1 and np.any(self._sorted[1:] == self._sorted[:-1]):
            raise ValueError("duplicate coordinate in sparse tensor")
        self.size = linear.size

    def lookup(self, linear):
        linear = np.asarray(linear, dtype=np.int64)
        out = np.full(linear.shape, -1, dtype=np.int32)
        if self.size == 0 or linear.size == 0:
            return out
        pos = np.searchsorted(self._sorted, linear)
        pos_c = np.minimum(pos, self.size - 1)
        hit = self._sorted[pos_c] == linear
        out[hit] = self._order[pos_c[hit]]
        return out


def neighbor_table(in_coords, in_shape, out_coords, offsets, stride, pad, transposed):
    in_shape = np.asarray(in_shape, dtype=np.int64)
    stride = np.asarray(stride, dtype=np.int64)
    pad = np.asarray(pad, dtype=np.int64)
    in_c = in_coords.astype(np.int64)
    lin = in_c[:, 0] * in_shape[1] * in_shape[2] + in_c[:, 1] * in_shape[2] + in_c[:, 2]
    table = CoordHash(lin)
    out_c = out_coords.astype(np.int64)
    K = offsets.shape[0]
    nbr = np.full((out_c.shape[0], K), -1, dtype=np.int32)
    for k in range(K):
        if transposed:
            v = out_c + pad - offsets[k]
            ok = np.all((v >= 0) & (v % stride == 0), axis=1)
            v = v // stride
        else:
            v = out_c * stride - pad + offsets[k]
            ok = np.ones(out_c.shape[0], dtype=bool)
        ok &= np.all((v >= 0) & (v < in_shape), axis=1)
        if not ok.any():
            continue
        vv = v[ok]
        key = vv[:, 0] * in_shape[1] * in_shape[2] + vv[:, 1] * in_shape[2] + vv[:, 2]
        nbr[ok, k] = table.lookup(key)
    return nbr


def transpose_table(nbr, n_in):
    n_out, K = nbr.shape
    out = np.full((n_in, K), -1, dtype=np.int32)
    rows = np.arange(n_out, dtype=np.int32)
    for k in range(K):
        col = nbr[:, k]
        ok = col >= 0
        out[col[ok], k] = rows[ok]
    return out


def conv_gather(x, w, nbr, out, nthreads=1):
    for k in range(nbr.shape[1]):
        col = nbr[:, k]
        ok = np.flatnonzero(col >= 0)
        if ok.size:
            # each output row appears once per tap, so fancy-index add is safe
            out[ok] += x[col[ok]] @ w[k]


def conv_weight_grad(x, gout, nbr, gw, nthreads=1):
    for k in range(nbr.shape[1]):
        col = nbr[:, k]
        ok = np.flatnonzero(col >= 0)
        if ok.size:
            gw[k] += x[col[ok]].T @ gout[ok]
