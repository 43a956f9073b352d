"""Backend selection for the convolution hot loops.

The compiled extension is used when it imports cleanly; set
``SSCLAB_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
if os.environ.get("SSCLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

_SUPPORTED = ("float32", "float64")


def im2col(x, kh, kw, stride, pad):
    if BACKEND == "cython" and x.dtype.name in _SUPPORTED:
        return _impl.im2col(x, kh, kw, stride, pad)
    return _pykernels.im2col(x, kh, kw, stride, pad)


def col2im(cols, x_shape, kh, kw, stride, pad):
    if BACKEND == "cython" and cols.dtype.name in _SUPPORTED:
        return _impl.col2im(cols, x_shape, kh, kw, stride, pad)
    return _pykernels.col2im(cols, x_shape, kh, kw, stride, pad)


out_size = _pykernels.out_size
