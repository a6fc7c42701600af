# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twins of the hot kernels in ``pykernels.py``.

Same signatures, same semantics (including the first-maximum tie break in
max pooling and edge-replicate clamping in the warp). float32 and float64
are supported through a fused type.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double

NAME = "compiled"


def im2col(real[:, :, :, ::1] x, int k, int stride):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - k) // stride + 1
    cdef Py_ssize_t ow = (w - k) // stride + 1
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty((b * oh * ow, c * k * k), dtype=dtype)
    cdef real[:, ::1] cols = out_arr
    cdef Py_ssize_t bi, oi, oj, ci, i, j, row, col
    with nogil:
        for bi in range(b):
            for oi in range(oh):
                for oj in range(ow):
                    row = (bi * oh + oi) * ow + oj
                    col = 0
                    for ci in range(c):
                        for i in range(k):
                            for j in range(k):
                                cols[row, col] = x[bi, ci, oi * stride + i, oj * stride + j]
                                col += 1
    return out_arr


def col2im(real[:, ::1] cols, Py_ssize_t b, Py_ssize_t c, Py_ssize_t h,
           Py_ssize_t w, int k, int stride):
    cdef Py_ssize_t oh = (h - k) // stride + 1
    cdef Py_ssize_t ow = (w - k) // stride + 1
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((b, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] x = out_arr
    cdef Py_ssize_t bi, oi, oj, ci, i, j, row, col
    with nogil:
        for bi in range(b):
            for oi in range(oh):
                for oj in range(ow):
                    row = (bi * oh + oi) * ow + oj
                    col = 0
                    for ci in range(c):
                        for i in range(k):
                            for j in range(k):
                                x[bi, ci, oi * stride + i, oj * stride + j] += cols[row, col]
                                col += 1
    return out_arr


def maxpool2_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = h // 2, ow = w // 2
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty((b, c, oh, ow), dtype=dtype)
    idx_arr = np.empty((b, c, oh, ow), dtype=np.uint8)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.uint8_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t bi, ci, oi, oj, p
    cdef real v, best
    cdef cnp.uint8_t besti
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for oi in range(oh):
                    for oj in range(ow):
                        best = x[bi, ci, 2 * oi, 2 * oj]
                        besti = 0
                        for p in range(1, 4):
                            v = x[bi, ci, 2 * oi + (p >> 1), 2 * oj + (p & 1)]
                            if v > best:
                                best = v
                                besti = <cnp.uint8_t> p
                        out[bi, ci, oi, oj] = best
                        idx[bi, ci, oi, oj] = besti
    return out_arr, idx_arr


def maxpool2_backward(real[:, :, :, ::1] dout, cnp.uint8_t[:, :, :, ::1] idx,
                      Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t b = dout.shape[0], c = dout.shape[1]
    cdef Py_ssize_t oh = dout.shape[2], ow = dout.shape[3]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    dx_arr = np.zeros((b, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t bi, ci, oi, oj
    cdef cnp.uint8_t p
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for oi in range(oh):
                    for oj in range(ow):
                        p = idx[bi, ci, oi, oj]
                        dx[bi, ci, 2 * oi + (p >> 1), 2 * oj + (p & 1)] += dout[bi, ci, oi, oj]
    return dx_arr


def bilinear_warp(real[:, :, ::1] src, double m00, double m01, double m02,
                  double m10, double m11, double m12):
    cdef Py_ssize_t ch = src.shape[0], h = src.shape[1], w = src.shape[2]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty((ch, h, w), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t ci, r, c, r0, c0, r1, c1
    cdef double sr, sc, fr, fc, top, bot
    with nogil:
        for r in range(h):
            for c in range(w):
                sr = m00 * r + m01 * c + m02
                sc = m10 * r + m11 * c + m12
                if sr < 0:
                    sr = 0
                elif sr > h - 1:
                    sr = h - 1
                if sc < 0:
                    sc = 0
                elif sc > w - 1:
                    sc = w - 1
                r0 = <Py_ssize_t> sr
                c0 = <Py_ssize_t> sc
                r1 = r0 + 1 if r0 + 1 < h else h - 1
                c1 = c0 + 1 if c0 + 1 < w else w - 1
                fr = sr - r0
                fc = sc - c0
                for ci in range(ch):
                    top = src[ci, r0, c0] * (1 - fc) + src[ci, r0, c1] * fc
                    bot = src[ci, r1, c0] * (1 - fc) + src[ci, r1, c1] * fc
                    out[ci, r, c] = <real> (top * (1 - fr) + bot * fr)
    return out_arr
