# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled patch extraction kernels (see ``_pykernels`` for the reference)."""

import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def _out_size(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(const real[:, :, :, ::1] x, real[:, ::1] cols,
            Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t n, oy, ox, ci, i, j, row, col, iy, ix
    with nogil:
        for n in range(b):
            for oy in range(oh):
                for ox in range(ow):
                    row = (n * oh + oy) * ow + ox
                    col = 0
                    for ci in range(c):
                        for i in range(kh):
                            iy = oy * stride + i - pad
                            for j in range(kw):
                                ix = ox * stride + j - pad
                                if 0 <= iy < h and 0 <= ix < w:
                                    cols[row, col] = x[n, ci, iy, ix]
                                else:
                                    cols[row, col] = 0
                                col = col + 1


def _col2im(const real[:, ::1] cols, real[:, :, :, ::1] out,
            Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t b = out.shape[0], c = out.shape[1], h = out.shape[2], w = out.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t n, oy, ox, ci, i, j, row, iy, ix
    # Loop order keeps per-pixel accumulation in kernel (i, j) order, matching
    # the numpy reference bit for bit.
    with nogil:
        for n in range(b):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        for oy in range(oh):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(ow):
                                ix = ox * stride + j - pad
                                if ix < 0 or ix >= w:
                                    continue
                                row = (n * oh + oy) * ow + ox
                                out[n, ci, iy, ix] += cols[row, (ci * kh + i) * kw + j]


def im2col(x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    x = np.ascontiguousarray(x)
    b, c, h, w = x.shape
    oh = _out_size(h, kh, stride, pad)
    ow = _out_size(w, kw, stride, pad)
    cols = np.empty((b * oh * ow, c * kh * kw), dtype=x.dtype)
    _im2col(x, cols, kh, kw, stride, pad)
    return cols


def col2im(cols, x_shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cols = np.ascontiguousarray(cols)
    out = np.zeros(tuple(x_shape), dtype=cols.dtype)
    _col2im(cols, out, kh, kw, stride, pad)
    return out
