# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled implementations of the network's hot kernels.

Same contracts as kernels_np: NCHW float32/float64 arrays, stride-1 'same'
convolutions with odd kernels, factor-2 pooling/upsampling. Convolutions pack
per-sample im2col buffers in C loops and run a single BLAS gemm per sample.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm, sgemm

cnp.import_array()

ctypedef fused floating:
    float
    double


cdef void _gemm(bint ta, bint tb, int m, int n, int k,
                floating alpha, floating* a, int lda,
                floating* b, int ldb, floating beta,
                floating* c, int ldc) noexcept nogil:
    # Row-major C = alpha * op(A) op(B) + beta * C via the column-major BLAS
    # identity C^T = op(B)^T op(A)^T.
    cdef char cta = b'T' if ta else b'N'
    cdef char ctb = b'T' if tb else b'N'
    if floating is float:
        sgemm(&ctb, &cta, &n, &m, &k, <float*>&alpha, <float*>b, &ldb,
              <float*>a, &lda, <float*>&beta, <float*>c, &ldc)
    else:
        dgemm(&ctb, &cta, &n, &m, &k, <double*>&alpha, <double*>b, &ldb,
              <double*>a, &lda, <double*>&beta, <double*>c, &ldc)


cdef void _pack_cols(floating[:, :, ::1] xp_n, floating[:, ::1] cols,
                     int c, int k, int h, int wd) noexcept nogil:
    # cols[(ci*k + i)*k + j, y*wd + x] = xp_n[ci, y + i, x + j]
    cdef int ci, i, j, y, x, row
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                row = (ci * k + i) * k + j
                for y in range(h):
                    for x in range(wd):
                        cols[row, y * wd + x] = xp_n[ci, y + i, x + j]


cdef void _scatter_cols(floating[:, ::1] dcols, floating[:, :, ::1] dxp_n,
                        int c, int k, int h, int wd) noexcept nogil:
    cdef int ci, i, j, y, x, row
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                row = (ci * k + i) * k + j
                for y in range(h):
                    for x in range(wd):
                        dxp_n[ci, y + i, x + j] += dcols[row, y * wd + x]


def _conv2d_forward_impl(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                         floating[::1] b, floating[:, :, :, ::1] y,
                         floating[:, :, :, ::1] xp, floating[:, ::1] cols):
    cdef int n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int f = w.shape[0], k = w.shape[2]
    cdef int p = k // 2, hw = h * wd, ckk = c * k * k
    cdef int ni, ci, fi, yy, xx
    cdef floating one = 1.0, zero = 0.0
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for yy in range(h):
                    for xx in range(wd):
                        xp[ni, ci, yy + p, xx + p] = x[ni, ci, yy, xx]
        for ni in range(n):
            _pack_cols(xp[ni], cols, c, k, h, wd)
            _gemm(False, False, f, hw, ckk, one, &w[0, 0, 0, 0], ckk,
                  &cols[0, 0], hw, zero, &y[ni, 0, 0, 0], hw)
            for fi in range(f):
                for yy in range(h):
                    for xx in range(wd):
                        y[ni, fi, yy, xx] += b[fi]


def _conv2d_backward_impl(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                          floating[:, :, :, ::1] dy, floating[:, :, :, ::1] dx,
                          floating[:, :, :, ::1] dw, floating[::1] db,
                          floating[:, :, :, ::1] xp, floating[:, :, :, ::1] dxp,
                          floating[:, ::1] cols, floating[:, ::1] dcols):
    cdef int n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int f = w.shape[0], k = w.shape[2]
    cdef int p = k // 2, hw = h * wd, ckk = c * k * k
    cdef int ni, ci, fi, yy, xx
    cdef floating one = 1.0, zero = 0.0
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for yy in range(h):
                    for xx in range(wd):
                        xp[ni, ci, yy + p, xx + p] = x[ni, ci, yy, xx]
        for ni in range(n):
            for fi in range(f):
                for yy in range(h):
                    for xx in range(wd):
                        db[fi] += dy[ni, fi, yy, xx]
        for ni in range(n):
            _pack_cols(xp[ni], cols, c, k, h, wd)
            # dw (f, ckk) += dy_n (f, hw) . cols^T (hw, ckk)
            _gemm(False, True, f, ckk, hw, one, &dy[ni, 0, 0, 0], hw,
                  &cols[0, 0], hw, one, &dw[0, 0, 0, 0], ckk)
            # dcols (ckk, hw) = w^T (ckk, f) . dy_n (f, hw)
            _gemm(True, False, ckk, hw, f, one, &w[0, 0, 0, 0], ckk,
                  &dy[ni, 0, 0, 0], hw, zero, &dcols[0, 0], hw)
            _scatter_cols(dcols, dxp[ni], c, k, h, wd)
        for ni in range(n):
            for ci in range(c):
                for yy in range(h):
                    for xx in range(wd):
                        dx[ni, ci, yy, xx] = dxp[ni, ci, yy + p, xx + p]


def conv2d_forward(x, w, b):
    """y[n,f] = b[f] + sum_c x[n,c] * w[f,c] (cross-correlation, same padding)."""
    n, c, h, wd = x.shape
    f, cw, k, k2 = w.shape
    if cw != c or k != k2 or k % 2 != 1:
        raise ValueError(f"kernel shape {w.shape} incompatible with input {x.shape}")
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    b = np.ascontiguousarray(b)
    p = k // 2
    y = np.empty((n, f, h, wd), dtype=x.dtype)
    xp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=x.dtype)
    cols = np.empty((c * k * k, h * wd), dtype=x.dtype)
    _conv2d_forward_impl(x, w, b, y, xp, cols)
    return y


def conv2d_backward(x, w, dy):
    """Gradients of conv2d_forward w.r.t. input, weights and bias."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    dy = np.ascontiguousarray(dy)
    p = k // 2
    dx = np.empty_like(x)
    dw = np.zeros_like(w)
    db = np.zeros(f, dtype=x.dtype)
    xp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=x.dtype)
    dxp = np.zeros_like(xp)
    cols = np.empty((c * k * k, h * wd), dtype=x.dtype)
    dcols = np.empty_like(cols)
    _conv2d_backward_impl(x, w, dy, dx, dw, db, xp, dxp, cols, dcols)
    return dx, dw, db


def _maxpool2_impl(floating[:, :, :, ::1] x, floating[:, :, :, ::1] y,
                   cnp.uint8_t[:, :, :, ::1] idx):
    cdef int n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int ho = h // 2, wo = wd // 2
    cdef int ni, ci, yy, xx, t, best
    cdef floating v, bv
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for yy in range(ho):
                    for xx in range(wo):
                        best = 0
                        bv = x[ni, ci, 2 * yy, 2 * xx]
                        for t in range(1, 4):
                            v = x[ni, ci, 2 * yy + t // 2, 2 * xx + t % 2]
                            if v > bv:
                                bv = v
                                best = t
                        y[ni, ci, yy, xx] = bv
                        idx[ni, ci, yy, xx] = <cnp.uint8_t>best


def maxpool2_forward(x):
    """2x2 stride-2 max pooling; returns pooled values and block-local argmax.

    Ties resolve to the first maximum in row-major block order, matching the
    numpy backend.
    """
    n, c, h, wd = x.shape
    if h % 2 or wd % 2:
        raise ValueError(f"pooling needs even spatial dims, got {h}x{wd}")
    x = np.ascontiguousarray(x)
    y = np.empty((n, c, h // 2, wd // 2), dtype=x.dtype)
    idx = np.empty((n, c, h // 2, wd // 2), dtype=np.uint8)
    _maxpool2_impl(x, y, idx)
    return y, idx


def _maxpool2_bwd_impl(floating[:, :, :, ::1] dy, cnp.uint8_t[:, :, :, ::1] idx,
                       floating[:, :, :, ::1] dx):
    cdef int n = dy.shape[0], c = dy.shape[1], ho = dy.shape[2], wo = dy.shape[3]
    cdef int ni, ci, yy, xx, t
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for yy in range(ho):
                    for xx in range(wo):
                        t = idx[ni, ci, yy, xx]
                        dx[ni, ci, 2 * yy + t // 2, 2 * xx + t % 2] = dy[ni, ci, yy, xx]


def maxpool2_backward(dy, idx):
    """Scatter pooled gradients back to the argmax positions."""
    n, c, ho, wo = dy.shape
    dy = np.ascontiguousarray(dy)
    dx = np.zeros((n, c, ho * 2, wo * 2), dtype=dy.dtype)
    _maxpool2_bwd_impl(dy, np.ascontiguousarray(idx), dx)
    return dx


def _upsample2_impl(floating[:, :, :, ::1] x, floating[:, :, :, ::1] y):
    cdef int n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int ni, ci, yy, xx
    cdef floating v
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for yy in range(h):
                    for xx in range(wd):
                        v = x[ni, ci, yy, xx]
                        y[ni, ci, 2 * yy, 2 * xx] = v
                        y[ni, ci, 2 * yy, 2 * xx + 1] = v
                        y[ni, ci, 2 * yy + 1, 2 * xx] = v
                        y[ni, ci, 2 * yy + 1, 2 * xx + 1] = v


def upsample2_forward(x):
    """Nearest-neighbour 2x upsampling."""
    n, c, h, wd = x.shape
    x = np.ascontiguousarray(x)
    y = np.empty((n, c, h * 2, wd * 2), dtype=x.dtype)
    _upsample2_impl(x, y)
    return y


def _upsample2_bwd_impl(floating[:, :, :, ::1] dy, floating[:, :, :, ::1] dx):
    cdef int n = dx.shape[0], c = dx.shape[1], h = dx.shape[2], wd = dx.shape[3]
    cdef int ni, ci, yy, xx
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for yy in range(h):
                    for xx in range(wd):
                        dx[ni, ci, yy, xx] = (dy[ni, ci, 2 * yy, 2 * xx]
                                              + dy[ni, ci, 2 * yy, 2 * xx + 1]
                                              + dy[ni, ci, 2 * yy + 1, 2 * xx]
                                              + dy[ni, ci, 2 * yy + 1, 2 * xx + 1])


def upsample2_backward(dy):
    """Adjoint of nearest 2x upsampling: sum each 2x2 block."""
    n, c, h, wd = dy.shape
    dy = np.ascontiguousarray(dy)
    dx = np.empty((n, c, h // 2, wd // 2), dtype=dy.dtype)
    _upsample2_bwd_impl(dy, dx)
    return dx
