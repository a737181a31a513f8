"""Validation instruments: factor alignment metrics, Kronecker spectrum
reconstruction, stochastic Lanczos quadrature, Hessian-vector products by
finite differences, and per-layer signal-to-noise ratios."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ContractError
from .linalg import kron_spectrum, sym_eig
from .rng import Rng


def cosine_sim(c_star: np.ndarray, c_hat: np.ndarray) -> float:
    """Tr(C*^T C^) / (||C*||_F ||C^||_F); undefined for a zero matrix."""
    if c_star.shape != c_hat.shape:
        raise ContractError("cosine_sim needs matching shapes")
    ns, nh = np.linalg.norm(c_star), np.linalg.norm(c_hat)
    if ns == 0 or nh == 0:
        raise ContractError("cosine similarity undefined for a zero matrix")
    return float(np.clip(np.vdot(c_star, c_hat).real / (ns * nh), -1.0, 1.0))


def rel_frob(c_star: np.ndarray, c_hat: np.ndarray) -> float:
    """||C* - C^||_F / ||C*||_F; the reference must be nonzero."""
    if c_star.shape != c_hat.shape:
        raise ContractError("rel_frob needs matching shapes")
    ns = np.linalg.norm(c_star)
    if ns == 0:
        raise ContractError("rel_frob undefined for a zero reference")
    return float(np.linalg.norm(c_star - c_hat) / ns)


# ---------------------------------------------------------------------------
# spectrum reconstruction and comparison

SPECTRUM_TOP = 10_000


def reconstructed_spectrum(eig_a, eig_g, top: int = SPECTRUM_TOP) -> np.ndarray:
    """Spectrum of the Kronecker-factored block from its factor eigenvalues,
    descending, truncated to the top entries for reporting."""
    return kron_spectrum(eig_a, eig_g)[:top]


def layer_spectrum(factor_eigs: dict, top: int = SPECTRUM_TOP) -> dict:
    """Per-layer reconstructed spectra from {layer: (eig_a, eig_g)}."""
    return {i: reconstructed_spectrum(ea, eg, top) for i, (ea, eg) in factor_eigs.items()}


def log_spectrum_cosine(s1: np.ndarray, s2: np.ndarray) -> float:
    """Cosine of mean-centered log-spectra.

    Mean-centering first makes the value insensitive to a global scalar
    between the two spectra, which is exactly the per-layer constant the
    clipping norm and learning rate absorb.
    """
    if s1.shape != s2.shape:
        raise ContractError("spectra must have equal length")
    if s1.min() <= 0 or s2.min() <= 0:
        raise ContractError("log spectrum needs strictly positive eigenvalues")
    a = np.log(np.sort(s1)[::-1])
    b = np.log(np.sort(s2)[::-1])
    a -= a.mean()
    b -= b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ContractError("degenerate (flat) log spectrum")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# alignment tracking


def factor_alignment_rows(oracle: dict, candidate: dict, source: str, step: int):
    """Alignment of candidate factors against oracle factors.

    ``oracle`` and ``candidate`` map layer id -> (A_hat, G_hat). Emits one
    row per layer per factor (A, G, and the combined Kronecker block F,
    whose metrics follow from the factor inner products without
    materializing it): cosine, raw relative Frobenius error, and the
    relative error after scaling both factors to unit Frobenius norm.
    """
    rows = []
    for i in sorted(oracle):
        a_star, g_star = oracle[i]
        a_hat, g_hat = candidate[i]
        cos_a = cosine_sim(a_star, a_hat)
        cos_g = cosine_sim(g_star, g_hat)
        rows.append(_align_row(step, source, i, "A", cos_a, rel_frob(a_star, a_hat)))
        rows.append(_align_row(step, source, i, "G", cos_g, rel_frob(g_star, g_hat)))
        # ||A1(x)G1|| = ||A1|| ||G1||, <A1(x)G1, A2(x)G2> = <A1,A2><G1,G2>
        n1 = np.linalg.norm(a_star) * np.linalg.norm(g_star)
        n2 = np.linalg.norm(a_hat) * np.linalg.norm(g_hat)
        cos_f = cos_a * cos_g
        rel_f = math.sqrt(max(n1 * n1 + n2 * n2 - 2 * n1 * n2 * cos_f, 0.0)) / n1
        rows.append(_align_row(step, source, i, "F", cos_f, rel_f))
    return rows


def _align_row(step, source, layer, factor, cos, rel):
    # with both sides scaled to unit Frobenius norm the error is a pure
    # function of the cosine
    rel_unit = math.sqrt(max(2.0 - 2.0 * cos, 0.0))
    return {
        "step": step,
        "source": source,
        "layer": layer,
        "factor": factor,
        "cosine": cos,
        "rel_frob": rel,
        "rel_frob_unitnorm": rel_unit,
    }


# ---------------------------------------------------------------------------
# stochastic Lanczos quadrature


@dataclass
class SlqResult:
    """Per-probe Ritz nodes and weights (weights of each probe sum to 1)."""

    nodes: list
    weights: list

    def mean_moment(self, power: int = 1) -> float:
        vals = [float((w * n**power).sum()) for n, w in zip(self.nodes, self.weights)]
        return float(np.mean(vals))


def slq_density(hvp, dim: int, probes: int, lanczos_steps: int, rng: Rng) -> SlqResult:
    """Spectral density estimate of a symmetric operator given only
    matrix-vector products.

    Runs ``probes`` independent Lanczos tridiagonalizations of ``lanczos_steps``
    steps with full reorthogonalization; each yields Ritz nodes and
    first-component-squared weights. Early breakdown (invariant subspace hit)
    returns fewer nodes for that probe.
    """
    _check_symmetry(hvp, dim, rng)
    nodes, weights = [], []
    for _ in range(probes):
        alphas, betas = _lanczos(hvp, dim, lanczos_steps, rng)
        k = len(alphas)
        t = np.zeros((k, k))
        t[np.diag_indices(k)] = alphas
        for j, b in enumerate(betas):
            t[j, j + 1] = t[j + 1, j] = b
        e = sym_eig(t, backend="jacobi")
        nodes.append(e.values)
        weights.append(e.vectors[0, :] ** 2)
    return SlqResult(nodes=nodes, weights=weights)


def _check_symmetry(hvp, dim, rng, trials: int = 2, tol: float = 1e-6):
    for _ in range(trials):
        u = rng.standard_normal(dim)
        v = rng.standard_normal(dim)
        lhs = float(u @ hvp(v))
        rhs = float(hvp(u) @ v)
        if abs(lhs - rhs) > tol * max(abs(lhs), abs(rhs), 1e-30):
            raise ContractError(
                f"operator fails the symmetry check: <u,Hv>={lhs:.6e} vs <Hu,v>={rhs:.6e}"
            )


def _lanczos(hvp, dim, steps, rng):
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    basis = [v]
    alphas, betas = [], []
    w = np.asarray(hvp(v), dtype=np.float64)
    a = float(v @ w)
    alphas.append(a)
    w = w - a * v
    for _ in range(1, steps):
        w -= np.stack(basis).T @ (np.stack(basis) @ w)  # full reorthogonalization
        b = float(np.linalg.norm(w))
        if b < 1e-12 * max(abs(x) for x in alphas + [1.0]):
            break
        v_next = w / b
        w = np.asarray(hvp(v_next), dtype=np.float64)
        a = float(v_next @ w)
        w = w - a * v_next - b * basis[-1]
        basis.append(v_next)
        alphas.append(a)
        betas.append(b)
    return alphas, betas


# ---------------------------------------------------------------------------
# Hessian-vector products by central differences


def hvp_finite_diff(grad_fn, theta: np.ndarray, v: np.ndarray, h: float | None = None):
    """(grad(theta + h v) - grad(theta - h v)) / (2h); exact for quadratics."""
    nv = np.linalg.norm(v)
    if abs(nv - 1.0) > 1e-6:
        raise ContractError("direction v must be unit norm")
    if h is None:
        h = 1e-4 * max(1.0, float(np.linalg.norm(theta)))
    if h <= 0:
        raise ContractError("step h must be positive")
    return (grad_fn(theta + h * v) - grad_fn(theta - h * v)) / (2.0 * h)


def model_hvp_operator(model: nn.Model, x, y, h: float | None = None):
    """Hessian-vector products of the mean training loss at the current
    parameters; the model is restored after every call."""
    theta0 = model.flat_params()
    if h is None:
        h = 1e-4 * max(1.0, float(np.linalg.norm(theta0)))

    def grad_fn(theta):
        model.set_flat_params(theta)
        try:
            _, g = nn.batch_grad(model, x, y)
        finally:
            model.set_flat_params(theta0)
        return g

    def hvp(v):
        return hvp_finite_diff(grad_fn, theta0, v, h)

    return hvp, theta0.size


# ---------------------------------------------------------------------------
# layer signal-to-noise ratio


def layer_snr(mean_clipped: list[np.ndarray], sigma: float, clip: float, batch: int):
    """Per-layer ||g_bar|| / (sigma C sqrt(d_l) / B) for the logged SNR rows."""
    if sigma <= 0:
        raise ContractError("SNR undefined without mechanism noise (sigma > 0)")
    out = []
    for g in mean_clipped:
        noise = sigma * clip * math.sqrt(g.size) / batch
        out.append(float(np.linalg.norm(g)) / noise)
    return out
