# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col/col2im kernels (hot path of conv2d forward/backward).

Bit-identical to the numpy fallbacks in ``_kernels_np``: im2col is a pure
gather, and col2im adds contributions to each output element in the same
(ki, kj) row-major order the fallback's slice loop uses.
"""
import numpy as np

cimport cython

ctypedef fused real:
    float
    double


def im2col(xp, int k, int stride):
    B, C, Hp, Wp = xp.shape
    OH = (Hp - k) // stride + 1
    OW = (Wp - k) // stride + 1
    cols = np.empty((B, C * k * k, OH * OW), dtype=xp.dtype)
    if xp.dtype == np.float32:
        _im2col[float](xp, k, stride, cols)
    else:
        _im2col[double](xp, k, stride, cols)
    return cols


def col2im(cols, int k, int stride, int Hp, int Wp):
    B, CKK, L = cols.shape
    C = CKK // (k * k)
    out = np.zeros((B, C, Hp, Wp), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, k, stride, out)
    else:
        _col2im[double](cols, k, stride, out)
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _im2col(real[:, :, :, ::1] xp, int k, int stride, real[:, :, ::1] cols) noexcept:
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1], Hp = xp.shape[2], Wp = xp.shape[3]
    cdef Py_ssize_t OH = (Hp - k) // stride + 1
    cdef Py_ssize_t OW = (Wp - k) // stride + 1
    cdef Py_ssize_t b, c, ki, kj, oi, oj, row
    for b in range(B):
        for c in range(C):
            for ki in range(k):
                for kj in range(k):
                    row = (c * k + ki) * k + kj
                    for oi in range(OH):
                        for oj in range(OW):
                            cols[b, row, oi * OW + oj] = xp[b, c, oi * stride + ki, oj * stride + kj]


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _col2im(real[:, :, ::1] cols, int k, int stride, real[:, :, :, ::1] out) noexcept:
    cdef Py_ssize_t B = out.shape[0], C = out.shape[1], Hp = out.shape[2], Wp = out.shape[3]
    cdef Py_ssize_t OH = (Hp - k) // stride + 1
    cdef Py_ssize_t OW = (Wp - k) // stride + 1
    cdef Py_ssize_t b, c, ki, kj, oi, oj, row
    for b in range(B):
        for c in range(C):
            for ki in range(k):
                for kj in range(k):
                    row = (c * k + ki) * k + kj
                    for oi in range(OH):
                        for oj in range(OW):
                            out[b, c, oi * stride + ki, oj * stride + kj] += cols[b, row, oi * OW + oj]
