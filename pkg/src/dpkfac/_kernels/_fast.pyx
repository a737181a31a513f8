# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: cyclic Jacobi sweeps and conv patch (un)folding."""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, sqrt, copysign

cnp.import_array()


def jacobi_sweeps(double[:, ::1] a, double[:, ::1] v, double tol_off, int max_sweeps):
    """In-place cyclic Jacobi; returns (sweeps_done, off_frobenius)."""
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t p, q, j
    cdef int sweeps = 0
    cdef double off, apq, theta, t, c, s, xp, xq, diff
    if n < 2:
        return 0, 0.0
    off = _off_fro(a, n)
    while sweeps < max_sweeps:
        if off <= tol_off:
            return sweeps, off
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                diff = a[q, q] - a[p, p]
                if fabs(apq) < 1e-14 * fabs(diff):
                    # angle below float resolution; zeroing changes the matrix
                    # by < 1e-14 ||A|| relative
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    continue
                theta = 0.5 * diff / apq
                if fabs(theta) > 1e10:
                    t = 0.5 / theta
                else:
                    t = copysign(1.0, theta) / (fabs(theta) + sqrt(theta * theta + 1.0))
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                for j in range(n):
                    xp = a[p, j]
                    xq = a[q, j]
                    a[p, j] = c * xp - s * xq
                    a[q, j] = s * xp + c * xq
                for j in range(n):
                    xp = a[j, p]
                    xq = a[j, q]
                    a[j, p] = c * xp - s * xq
                    a[j, q] = s * xp + c * xq
                for j in range(n):
                    xp = v[j, p]
                    xq = v[j, q]
                    v[j, p] = c * xp - s * xq
                    v[j, q] = s * xp + c * xq
        sweeps += 1
        off = _off_fro(a, n)
    return sweeps, off


cdef double _off_fro(double[:, ::1] a, Py_ssize_t n):
    cdef Py_ssize_t i, j
    cdef double acc = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                acc += a[i, j] * a[i, j]
    return sqrt(acc)


def im2col(double[:, :, :, ::1] x, int k, int stride, int pad):
    """Unfold (B, C, H, W) into (B*Ho*Wo, C*k*k) with zero padding."""
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    out_arr = np.zeros((b * ho * wo, c * k * k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, i, j, ki, kj, row, hi, wj
    for bi in range(b):
        for i in range(ho):
            for j in range(wo):
                row = (bi * ho + i) * wo + j
                for ci in range(c):
                    for ki in range(k):
                        hi = i * stride + ki - pad
                        if hi < 0 or hi >= h:
                            continue
                        for kj in range(k):
                            wj = j * stride + kj - pad
                            if wj < 0 or wj >= w:
                                continue
                            out[row, (ci * k + ki) * k + kj] = x[bi, ci, hi, wj]
    return out_arr


def col2im(double[:, ::1] cols, Py_ssize_t b, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
           int k, int stride, int pad):
    """Adjoint of im2col: scatter-add rows of (B*Ho*Wo, C*k*k) onto (B, C, H, W)."""
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    out_arr = np.zeros((b, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, i, j, ki, kj, row, hi, wj
    for bi in range(b):
        for i in range(ho):
            for j in range(wo):
                row = (bi * ho + i) * wo + j
                for ci in range(c):
                    for ki in range(k):
                        hi = i * stride + ki - pad
                        if hi < 0 or hi >= h:
                            continue
                        for kj in range(k):
                            wj = j * stride + kj - pad
                            if wj < 0 or wj >= w:
                                continue
                            out[bi, ci, hi, wj] += cols[row, (ci * k + ki) * k + kj]
    return out_arr
