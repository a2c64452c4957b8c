# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im for strided, zero-padded 2-D convolution."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    """Unfold ``x`` (B, C, H, W) into columns of shape (B, C*kh*kw, Ho*Wo)."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((B, C * kh * kw, Ho * Wo), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, oh, ow, row, hi, wi
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    for oh in range(Ho):
                        hi = oh * stride + i - pad
                        if hi < 0 or hi >= H:
                            continue
                        for ow in range(Wo):
                            wi = ow * stride + j - pad
                            if wi < 0 or wi >= W:
                                continue
                            out[b, row, oh * Wo + ow] = x[b, c, hi, wi]
    return out_arr


def col2im(const double[:, :, ::1] cols, int C, int H, int W,
           int kh, int kw, int stride, int pad):
    """Adjoint of :func:`im2col`: scatter-add columns back to (B, C, H, W)."""
    cdef Py_ssize_t B = cols.shape[0]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, oh, ow, row, hi, wi
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    for oh in range(Ho):
                        hi = oh * stride + i - pad
                        if hi < 0 or hi >= H:
                            continue
                        for ow in range(Wo):
                            wi = ow * stride + j - pad
                            if wi < 0 or wi >= W:
                                continue
                            out[b, c, hi, wi] += cols[b, row, oh * Wo + ow]
    return out_arr
