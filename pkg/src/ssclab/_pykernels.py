"""Pure-numpy patch extraction kernels.

Reference implementation and fallback for the compiled ``_ckernels`` module.
Both produce bit-identical results: ``im2col`` is a pure copy and ``col2im``
accumulates every pixel's contributions in kernel row-major order.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x`` (b, c, h, w) into patch rows of shape (b*oh*ow, c*kh*kw)."""
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols)


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patch rows back to (b, c, h, w)."""
    b, c, h, w = x_shape
    oh = out_size(h, kh, stride, pad)
    ow = out_size(w, kw, stride, pad)
    cols6 = cols.reshape(b, oh, ow, c, kh, kw)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                cols6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)
