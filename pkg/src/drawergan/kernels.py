"""Convolution lowering kernels.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is selected. Set ``DRAWERGAN_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("DRAWERGAN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def im2col(x, k, stride, pad, dil, ho, wo):
    """Lower ``x`` (B, C, H, W) to columns of shape (C*k*k, B*ho*wo)."""
    return _impl.im2col(np.ascontiguousarray(x), k, stride, pad, dil, ho, wo)


def col2im(cols, shape, k, stride, pad, dil, ho, wo):
    """Scatter-add columns back onto an unpadded (B, C, H, W) array."""
    B, C, H, W = shape
    return _impl.col2im(np.ascontiguousarray(cols), B, C, H, W, k, stride, pad, dil, ho, wo)


def use_backend(name):
    """Switch kernels at runtime ("cython" or "python"); returns the previous name."""
    global _impl, BACKEND
    prev = BACKEND
    if name == "python":
        _impl = _pykernels
    elif name == "cython":
        from . import _ckernels

        _impl = _ckernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name
    return prev
