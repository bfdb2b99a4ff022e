"""Pure-numpy implementations of the convolution data-movement kernels.

These are the fallback twins of the compiled ``sdfyolo._kernels`` extension.
Both backends must produce bit-identical arrays: im2col/col2im are pure
gather/scatter (no arithmetic besides the scatter adds), and col2im
accumulates contributions in the same (ki, kj) row-major order as the
Cython loops, so per-element addition order matches exactly.
"""
import numpy as np


def im2col(xp, k, stride):
    """Unfold padded input (B,C,Hp,Wp) into columns (B, C*k*k, OH*OW).

    Layout: cols[b, (c*k + ki)*k + kj, oi*OW + oj] = xp[b, c, oi*s+ki, oj*s+kj].
    """
    B, C, Hp, Wp = xp.shape
    OH = (Hp - k) // stride + 1
    OW = (Wp - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    return np.ascontiguousarray(
        windows.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * k * k, OH * OW))


def col2im(cols, k, stride, Hp, Wp):
    """Adjoint of im2col: scatter-add columns back onto a (B,C,Hp,Wp) canvas."""
    B, CKK, L = cols.shape
    C = CKK // (k * k)
    OH = (Hp - k) // stride + 1
    OW = (Wp - k) // stride + 1
    out = np.zeros((B, C, Hp, Wp), dtype=cols.dtype)
    cr = cols.reshape(B, C, k, k, OH, OW)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + stride * OH:stride, kj:kj + stride * OW:stride] += cr[:, :, ki, kj]
    return out
