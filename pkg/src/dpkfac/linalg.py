"""Dense symmetric eigendecomposition, Kronecker spectra, and a radix-2 FFT.

Everything operates on float64 numpy arrays (matrices row-major, eigenvector
k in column k of ``SymEig.vectors``). The eigensolver is cyclic Jacobi
(compiled kernel when available); ``backend="lapack"`` delegates to
``numpy.linalg.eigh`` and is what ``"auto"`` picks above
``JACOBI_AUTO_MAX_DIM``, where Jacobi's cubic sweeps dominate runtime.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ContractError, ConvergenceError, SingularFactorError

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
# above this, cubic Jacobi sweeps dominate preconditioner refresh time
JACOBI_AUTO_MAX_DIM = 256


@dataclass(frozen=True)
class SymEig:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending."""

    values: np.ndarray
    vectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def _resolve_backend(backend, n: int) -> str:
    if backend is None:
        backend = os.environ.get("DPKFAC_EIG_BACKEND", "auto")
    if backend == "auto":
        return "jacobi" if n <= JACOBI_AUTO_MAX_DIM else "lapack"
    if backend in ("jacobi", "lapack"):
        return backend
    raise ContractError(f"unknown eig backend {backend!r}")


def sym_eig(a: np.ndarray, backend: str | None = None) -> SymEig:
    """Full eigendecomposition of a symmetric matrix.

    Raises ``ContractError`` for non-square or asymmetric input (relative
    asymmetry above 1e-10) and ``ConvergenceError`` if the Jacobi sweeps do
    not reach their off-diagonal tolerance.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"sym_eig needs a square matrix, got shape {a.shape}")
    n = a.shape[0]
    norm = np.linalg.norm(a)
    asym = np.linalg.norm(a - a.T)
    if asym > 1e-10 * max(norm, 1e-300):
        raise ContractError(
            f"matrix is not symmetric: relative asymmetry {asym / max(norm, 1e-300):.3e}"
        )
    work = np.ascontiguousarray((a + a.T) / 2.0)
    if _resolve_backend(backend, n) == "lapack":
        vals, vecs = np.linalg.eigh(work)
        return SymEig(values=vals[::-1].copy(), vectors=np.ascontiguousarray(vecs[:, ::-1]))
    vecs = np.eye(n)
    _, off = _kernels.jacobi_sweeps(work, vecs, JACOBI_TOL * norm, JACOBI_MAX_SWEEPS)
    if off > JACOBI_TOL * norm:
        raise ConvergenceError(
            f"Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps: "
            f"off-diagonal residual {off:.3e} (target {JACOBI_TOL * norm:.3e})"
        )
    diag = np.diagonal(work).copy()
    order = np.argsort(diag)[::-1]
    return SymEig(values=diag[order], vectors=np.ascontiguousarray(vecs[:, order]))


def inv_sqrt_from_eig(e: SymEig, gamma: float) -> np.ndarray:
    """Damped inverse square root ``Q (L + gamma I)^{-1/2} Q^T``."""
    if gamma < 0:
        raise ContractError("gamma must be non-negative")
    shifted = e.values + gamma
    if shifted.min() <= 0:
        raise SingularFactorError(
            f"damped spectrum not positive: min eigenvalue + gamma = {shifted.min():.3e}"
        )
    u = (e.vectors * shifted ** -0.5) @ e.vectors.T
    return (u + u.T) / 2.0


def sqrt_from_eig(e: SymEig) -> np.ndarray:
    """Symmetric square root ``Q L^{1/2} Q^T`` (PSD input assumed)."""
    vals = np.clip(e.values, 0.0, None)
    u = (e.vectors * np.sqrt(vals)) @ e.vectors.T
    return (u + u.T) / 2.0


def kron_spectrum(lam_a: np.ndarray, lam_g: np.ndarray) -> np.ndarray:
    """Spectrum of ``diag(lam_a) (x) diag(lam_g)``: all pairwise products, descending."""
    lam_a = np.asarray(lam_a, dtype=np.float64)
    lam_g = np.asarray(lam_g, dtype=np.float64)
    if lam_a.size == 0 or lam_g.size == 0:
        raise ContractError("kron_spectrum requires non-empty eigenvalue vectors")
    prods = np.outer(lam_a, lam_g).ravel()
    return np.sort(prods)[::-1].copy()


# ---------------------------------------------------------------------------
# radix-2 FFT on power-of-two grids


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


_BITREV_CACHE: dict[int, np.ndarray] = {}


def _bitrev(n: int) -> np.ndarray:
    idx = _BITREV_CACHE.get(n)
    if idx is None:
        bits = n.bit_length() - 1
        k = np.arange(n)
        idx = np.zeros(n, dtype=np.intp)
        for b in range(bits):
            idx = (idx << 1) | ((k >> b) & 1)
        _BITREV_CACHE[n] = idx
    return idx


def _fft_last_axis(x: np.ndarray, sign: float) -> np.ndarray:
    n = x.shape[-1]
    if n == 1:
        return x.astype(np.complex128, copy=True)
    y = np.ascontiguousarray(x[..., _bitrev(n)], dtype=np.complex128)
    m = 1
    while m < n:
        w = np.exp(sign * 2j * np.pi * np.arange(m) / (2 * m))
        blocks = y.reshape(y.shape[:-1] + (n // (2 * m), 2, m))
        even = blocks[..., 0, :]
        odd = blocks[..., 1, :] * w
        out = np.empty_like(blocks)
        out[..., 0, :] = even + odd
        out[..., 1, :] = even - odd
        y = out.reshape(y.shape)
        m *= 2
    return y


def _check_grid(g: np.ndarray) -> np.ndarray:
    g = np.asarray(g)
    if g.ndim < 2:
        raise ContractError("fft2 expects at least a 2-D grid")
    h, w = g.shape[-2], g.shape[-1]
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ContractError(f"grid dims must be powers of two, got {h}x{w}")
    return g


def fft2(g: np.ndarray) -> np.ndarray:
    """2-D DFT over the trailing two axes (each a power of two)."""
    g = _check_grid(g)
    y = _fft_last_axis(g, -1.0)
    y = _fft_last_axis(y.swapaxes(-1, -2), -1.0).swapaxes(-1, -2)
    return y


def ifft2(g: np.ndarray) -> np.ndarray:
    """Inverse of ``fft2`` (includes the 1/(H*W) scale)."""
    g = _check_grid(g)
    h, w = g.shape[-2], g.shape[-1]
    y = _fft_last_axis(g, +1.0)
    y = _fft_last_axis(y.swapaxes(-1, -2), +1.0).swapaxes(-1, -2)
    return y / (h * w)
