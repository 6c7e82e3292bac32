# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for sparse voxel convolution.

Two groups of routines live here:

* rulebook construction: an open-addressing hash map from linearized voxel
  coordinates to row indices, used to build the ``(n_out, K)`` neighbor
  table that maps every output row and kernel tap to an input row (or -1);
* convolution kernels over that table: a blocked gather (im2col) of the
  input rows each output needs, followed by a BLAS GEMM per block.

The forward kernel is output-stationary (each output row is written by
exactly one block), so results do not depend on the thread count.
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.stdint cimport int32_t, int64_t, uint64_t
from libc.stdlib cimport free, malloc
from libc.string cimport memcpy, memset
cimport scipy.linalg.cython_blas as blas

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline uint64_t _mix(uint64_t key) noexcept nogil:
    key ^= key >> 33
    key *= 0xff51afd7ed558ccdULL
    key ^= key >> 33
    key *= 0xc4ceb9fe1a85ec53ULL
    key ^= key >> 33
    return key


cdef class CoordHash:
    """Linear-probing hash map ``linear key -> row``."""

    cdef int64_t[::1] keys
    cdef int32_t[::1] vals
    cdef uint64_t mask
    cdef public Py_ssize_t size

    def __init__(self, const int64_t[::1] linear):
        cdef Py_ssize_t n = linear.shape[0]
        cdef Py_ssize_t cap = 16
        while cap < 2 * n + 1:
            cap <<= 1
        self.keys = np.full(cap, -1, dtype=np.int64)
        self.vals = np.full(cap, -1, dtype=np.int32)
        self.mask = <uint64_t>(cap - 1)
        self.size = 0
        cdef Py_ssize_t i
        for i in range(n):
            self._insert(linear[i], <int32_t>i)

    cdef int _insert(self, int64_t key, int32_t val) except -1:
        cdef uint64_t slot = _mix(<uint64_t>key) & self.mask
        while self.keys[slot] != -1:
            if self.keys[slot] == key:
                raise ValueError("duplicate coordinate in sparse tensor")
            slot = (slot + 1) & self.mask
        self.keys[slot] = key
        self.vals[slot] = val
        self.size += 1
        return 0

    cdef inline int32_t find(self, int64_t key) noexcept nogil:
        cdef uint64_t slot = _mix(<uint64_t>key) & self.mask
        while self.keys[slot] != -1:
            if self.keys[slot] == key:
                return self.vals[slot]
            slot = (slot + 1) & self.mask
        return -1

    def lookup(self, const int64_t[::1] linear):
        cdef Py_ssize_t n = linear.shape[0], i
        out = np.empty(n, dtype=np.int32)
        cdef int32_t[::1] o = out
        with nogil:
            for i in range(n):
                o[i] = self.find(linear[i])
        return out


def neighbor_table(const int32_t[:, ::1] in_coords, const int64_t[::1] in_shape,
                   const int32_t[:, ::1] out_coords, const int32_t[:, ::1] offsets,
                   const int64_t[::1] stride, const int64_t[::1] pad,
                   bint transposed):
    """Return the ``(n_out, K)`` int32 table of input rows per output and tap.

    Regular convolution reads input ``o * stride - pad + k``; the transposed
    variant reads input ``c`` with ``c * stride - pad + k == o``.
    """
    cdef Py_ssize_t n_in = in_coords.shape[0]
    cdef Py_ssize_t n_out = out_coords.shape[0]
    cdef Py_ssize_t K = offsets.shape[0]
    cdef int64_t sy = in_shape[1] * in_shape[2], sz = in_shape[2]
    lin = np.empty(n_in, dtype=np.int64)
    cdef int64_t[::1] lv = lin
    cdef Py_ssize_t i, o, k, d
    for i in range(n_in):
        lv[i] = in_coords[i, 0] * sy + in_coords[i, 1] * sz + in_coords[i, 2]
    cdef CoordHash table = CoordHash(lin)

    nbr = np.full((n_out, K), -1, dtype=np.int32)
    cdef int32_t[:, ::1] nb = nbr
    cdef int64_t c[3]
    cdef int64_t v
    cdef bint ok
    with nogil:
        for o in range(n_out):
            for k in range(K):
                ok = True
                for d in range(3):
                    if transposed:
                        v = out_coords[o, d] + pad[d] - offsets[k, d]
                        if v < 0 or v % stride[d] != 0:
                            ok = False
                            break
                        v = v // stride[d]
                    else:
                        v = out_coords[o, d] * stride[d] - pad[d] + offsets[k, d]
                    if v < 0 or v >= in_shape[d]:
                        ok = False
                        break
                    c[d] = v
                if ok:
                    nb[o, k] = table.find(c[0] * sy + c[1] * sz + c[2])
    return nbr


def transpose_table(const int32_t[:, ::1] nbr, Py_ssize_t n_in):
    """Invert a neighbor table: ``(n_in, K)`` output row per input row and tap."""
    cdef Py_ssize_t n_out = nbr.shape[0], K = nbr.shape[1], o, k
    cdef int32_t i
    out = np.full((n_in, K), -1, dtype=np.int32)
    cdef int32_t[:, ::1] t = out
    with nogil:
        for o in range(n_out):
            for k in range(K):
                i = nbr[o, k]
                if i >= 0:
                    t[i, k] = <int32_t>o
    return out


cdef enum:
    BLOCK = 256


cdef inline void _fill_block(const real* x, const int32_t* nbr, real* buf, Py_ssize_t start,
                             Py_ssize_t rows, Py_ssize_t K, Py_ssize_t cin) noexcept nogil:
    """im2col: row r of ``buf`` is the concatenation of x[nbr[start + r, k]] over taps k."""
    cdef Py_ssize_t r, k
    cdef int32_t i
    cdef real* dst
    for r in range(rows):
        for k in range(K):
            i = nbr[(start + r) * K + k]
            dst = buf + (r * K + k) * cin
            if i < 0:
                memset(dst, 0, cin * sizeof(real))
            else:
                memcpy(dst, x + i * cin, cin * sizeof(real))


cdef inline void _gemm(char* ta, char* tb, int m, int n, int k, real* a, int lda,
                       real* b, int ldb, real* c, int ldc) noexcept nogil:
    """Column-major ``c += op(a) @ op(b)``."""
    cdef float fone = 1.0
    cdef double done = 1.0
    if real is float:
        blas.sgemm(ta, tb, &m, &n, &k, &fone, a, &lda, b, &ldb, &fone, c, &ldc)
    else:
        blas.dgemm(ta, tb, &m, &n, &k, &done, a, &lda, b, &ldb, &done, c, &ldc)


def conv_gather(const real[:, ::1] x, const real[:, :, ::1] w,
                const int32_t[:, ::1] nbr, real[:, ::1] out, int nthreads=1):
    """``out[o] += sum_k x[nbr[o, k]] @ w[k]`` over valid taps.

    Output rows are processed in fixed blocks: gather into a row buffer,
    then one GEMM per block. Each block owns its output rows, so results do
    not depend on the thread count.
    """
    cdef Py_ssize_t n_out = nbr.shape[0], K = nbr.shape[1]
    cdef Py_ssize_t cin = w.shape[1], cout = w.shape[2]
    if n_out == 0 or x.shape[0] == 0:
        return
    cdef Py_ssize_t n_blocks = (n_out + BLOCK - 1) // BLOCK
    cdef Py_ssize_t blk, start, rows
    cdef real* buf
    cdef char* nt = b"N"
    for blk in prange(n_blocks, nogil=True, schedule="static", num_threads=nthreads):
        start = blk * BLOCK
        rows = min(BLOCK, n_out - start)
        buf = <real*>malloc(BLOCK * K * cin * sizeof(real))
        _fill_block(&x[0, 0], &nbr[0, 0], buf, start, rows, K, cin)
        _gemm(nt, nt, <int>cout, <int>rows, <int>(K * cin), <real*>&w[0, 0, 0], <int>cout,
              buf, <int>(K * cin), &out[start, 0], <int>cout)
        free(buf)


def conv_weight_grad(const real[:, ::1] x, const real[:, ::1] gout,
                     const int32_t[:, ::1] nbr, real[:, :, ::1] gw, int nthreads=1):
    """``gw[k] += sum_o outer(x[nbr[o, k]], gout[o])``.

    Blocks are reduced serially in row order, so the sum is reproducible.
    """
    cdef Py_ssize_t n_out = nbr.shape[0], K = nbr.shape[1]
    cdef Py_ssize_t cin = gw.shape[1], cout = gw.shape[2]
    if n_out == 0 or x.shape[0] == 0:
        return
    cdef Py_ssize_t start, rows
    cdef real* buf = <real*>malloc(BLOCK * K * cin * sizeof(real))
    cdef char* nt = b"N"
    cdef char* tt = b"T"
    with nogil:
        start = 0
        while start < n_out:
            rows = min(BLOCK, n_out - start)
            _fill_block(&x[0, 0], &nbr[0, 0], buf, start, rows, K, cin)
            _gemm(nt, tt, <int>cout, <int>(K * cin), <int>rows, <real*>&gout[start, 0], <int>cout,
                  buf, <int>(K * cin), &gw[0, 0, 0], <int>cout)
            start += BLOCK
    free(buf)
