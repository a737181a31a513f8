"""Pure numpy implementations of the hot kernels.

Same contracts as the compiled versions in ``_fast.pyx``; these are the
fallback selected at import when the extension is unavailable (or when
``DPKFAC_PURE_KERNELS=1``). Rotations are vectorized over rows/columns, so
the fallback is usable up to a few hundred dimensions.
"""

from __future__ import annotations

import math

import numpy as np


def jacobi_sweeps(a: np.ndarray, v: np.ndarray, tol_off: float, max_sweeps: int):
    """Cyclic Jacobi diagonalization, in place.

    ``a`` is symmetric and gets rotated toward diagonal form; ``v`` starts as
    the identity and accumulates the eigenvector matrix (columns). Returns
    ``(sweeps_done, off_frobenius)`` where the second entry is the remaining
    off-diagonal Frobenius norm.
    """
    n = a.shape[0]
    if n < 2:
        return 0, 0.0
    off = _off_fro(a)
    sweeps = 0
    while sweeps < max_sweeps:
        if off <= tol_off:
            return sweeps, off
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = float(a[p, q])
                if apq == 0.0:
                    continue
                diff = float(a[q, q] - a[p, p])
                if abs(apq) < 1e-14 * abs(diff):
                    # rotation angle below float resolution; zeroing directly
                    # changes the matrix by < 1e-14 ||A|| relative
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = 0.5 * diff / apq
                if abs(theta) > 1e10:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (
                        abs(theta) + math.sqrt(theta * theta + 1.0)
                    )
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rp = a[p, :].copy()
                rq = a[q, :]
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp = a[:, p].copy()
                cq = a[:, q]
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        sweeps += 1
        off = _off_fro(a)
    return sweeps, off


def _off_fro(a: np.ndarray) -> float:
    # summing only off-diagonal squares: the subtract-the-diagonal shortcut
    # cancels catastrophically and floors at sqrt(eps)*||A||
    b = a.copy()
    np.fill_diagonal(b, 0.0)
    return float(np.sqrt((b * b).sum()))


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Unfold (B, C, H, W) into a patch matrix (B*Ho*Wo, C*k*k).

    Row (b, i, j) holds the receptive field of output pixel (i, j) of sample
    b, zero-padded where it leaves the input.
    """
    b, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj, :, :] = x[
                :, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride
            ]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * ho * wo, c * k * k)


def col2im(cols: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of ``im2col``: scatter-add patch rows back onto an image grid."""
    b, c, h, w = x_shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    grid = cols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            out[
                :, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride
            ] += grid[:, :, ki, kj, :, :]
    if pad > 0:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return out
