# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im with implicit zero padding.

Column layout is (C*k*k, B*Ho*Wo), matching ``drawergan._pykernels``.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int k, int stride, int pad, int dil,
           int ho, int wo):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t L = ho * wo
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((C * k * k, B * L), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, oy, ox, iy, ix, row, col
    with nogil:
        for c in range(C):
            for i in range(k):
                for j in range(k):
                    row = (c * k + i) * k + j
                    for b in range(B):
                        col = b * L
                        for oy in range(ho):
                            iy = oy * stride - pad + i * dil
                            if iy < 0 or iy >= H:
                                for ox in range(wo):
                                    out[row, col + ox] = 0
                            else:
                                for ox in range(wo):
                                    ix = ox * stride - pad + j * dil
                                    if ix < 0 or ix >= W:
                                        out[row, col + ox] = 0
                                    else:
                                        out[row, col + ox] = x[b, c, iy, ix]
                            col += wo
    return out_arr


def col2im(real[:, ::1] cols, int B, int C, int H, int W, int k, int stride,
           int pad, int dil, int ho, int wo):
    cdef Py_ssize_t L = ho * wo
    dtype = np.float32 if real is float else np.float64
    x_arr = np.zeros((B, C, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] x = x_arr
    cdef Py_ssize_t b, c, i, j, oy, ox, iy, ix, row, col
    with nogil:
        for c in range(C):
            for i in range(k):
                for j in range(k):
                    row = (c * k + i) * k + j
                    for b in range(B):
                        col = b * L
                        for oy in range(ho):
                            iy = oy * stride - pad + i * dil
                            if iy >= 0 and iy < H:
                                for ox in range(wo):
                                    ix = ox * stride - pad + j * dil
                                    if ix >= 0 and ix < W:
                                        x[b, c, iy, ix] += cols[row, col + ox]
                            col += wo
    return x_arr
