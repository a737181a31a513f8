"""Kernel backend selection.

The compiled extension (``_fast``) is preferred when importable; pure numpy
fallbacks otherwise. ``DPKFAC_PURE_KERNELS=1`` forces the fallback, which is
what the backend benchmark and the kernel equivalence tests use.
"""

import os

from . import pure

if os.environ.get("DPKFAC_PURE_KERNELS") == "1":
    _impl = pure
    BACKEND = "pure"
else:
    try:
        from . import _fast as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = pure
        BACKEND = "pure"


def jacobi_sweeps(a, v, tol_off, max_sweeps):
    return _impl.jacobi_sweeps(a, v, tol_off, max_sweeps)


def im2col_kernel(x, k, stride, pad):
    return _impl.im2col(x, k, stride, pad)


def col2im_kernel(cols, x_shape, k, stride, pad):
    if _impl is pure:
        return pure.col2im(cols, x_shape, k, stride, pad)
    b, c, h, w = x_shape
    return _impl.col2im(cols, b, c, h, w, k, stride, pad)


def get_backend(name=None):
    """Resolve a backend module by name ('compiled', 'pure', or None=active)."""
    if name is None:
        return _impl
    if name == "pure":
        return pure
    if name == "compiled":
        if BACKEND != "compiled":
            raise RuntimeError("compiled kernels are not available in this build")
        return _impl
    raise ValueError(f"unknown kernel backend {name!r}")
