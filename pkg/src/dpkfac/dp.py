"""Privacy mechanism and Renyi-DP accountant.

The mechanism is the standard one: per-sample (already preconditioned)
gradients are globally clipped to L2 norm C, summed, Gaussian noise of
per-coordinate std sigma*C is added to the *sum*, and only then is the
result averaged. Because clipping happens after the preconditioner, the L2
sensitivity of the noisy sum is exactly C no matter how large the
preconditioner entries are.

Accounting uses the integer-order upper bound for the Poisson-subsampled
Gaussian mechanism: at order alpha,

    eps(alpha) = log( sum_{k=0}^{alpha} C(alpha,k) (1-q)^{alpha-k} q^k
                      * exp((k^2 - k) / (2 sigma^2)) ) / (alpha - 1)

evaluated in log space, with eps(alpha) = alpha / (2 sigma^2) at q = 1.
Composition is additive over steps; conversion to (eps, delta) takes
min over orders of eps_rdp(alpha) + log(1/delta) / (alpha - 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationRangeError, ContractError
from .rng import Rng

DEFAULT_ORDERS = tuple(range(2, 65))


@dataclass(frozen=True)
class PrivacyParams:
    clip: float
    sigma: float
    sample_rate: float
    delta: float

    def __post_init__(self):
        if self.clip <= 0:
            raise ContractError("clip norm must be positive")
        if self.sigma < 0:
            raise ContractError("sigma must be >= 0")
        if not 0 < self.sample_rate <= 1:
            raise ContractError("sample_rate must be in (0, 1]")
        if not 0 < self.delta < 1:
            raise ContractError("delta must be in (0, 1)")

    @property
    def non_private(self) -> bool:
        """sigma = 0 runs are allowed for debugging but carry no guarantee."""
        return self.sigma == 0


def global_clip(per_layer: list[np.ndarray], clip: float, sample_id=None):
    """Scale one sample's gradient (list of per-layer matrices) onto the
    L2 ball of radius ``clip``; returns (clipped list, pre-clip norm)."""
    if clip <= 0:
        raise ContractError("clip norm must be positive")
    sq = 0.0
    for g in per_layer:
        s = float((g * g).sum())
        if not math.isfinite(s):
            who = "" if sample_id is None else f" (sample {sample_id})"
            raise FloatingPointError(f"non-finite gradient entries{who}")
        sq += s
    nu = math.sqrt(sq)
    scale = min(1.0, clip / nu) if nu > 0 else 1.0
    return [g * scale for g in per_layer], nu


def clip_coefficients(sq_norms: np.ndarray, clip: float):
    """Per-sample scale factors min(1, C/nu_i) for a batch of squared norms."""
    bad = ~np.isfinite(sq_norms)
    if bad.any():
        raise FloatingPointError(
            f"non-finite gradient entries (sample {int(np.flatnonzero(bad)[0])})"
        )
    nu = np.sqrt(sq_norms)
    with np.errstate(divide="ignore"):
        coeff = np.minimum(1.0, np.where(nu > 0, clip / np.where(nu > 0, nu, 1.0), 1.0))
    return coeff, nu


def privatize(
    sum_clipped: list[np.ndarray],
    batch_size: int,
    params: PrivacyParams,
    rng: Rng,
) -> list[np.ndarray]:
    """(sum of clipped gradients + N(0, (sigma C)^2 I)) / batch_size.

    Noise is added to the sum and only then averaged; with sigma = 0 the
    result is the exact clipped mean.
    """
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    std = params.sigma * params.clip
    out = []
    for g in sum_clipped:
        noise = std * rng.standard_normal(g.shape) if std > 0 else 0.0
        out.append((g + noise) / batch_size)
    return out


def rdp_step(q: float, sigma: float, alpha: int) -> float:
    """Per-step RDP epsilon of the subsampled Gaussian mechanism at integer
    order alpha >= 2."""
    if sigma == 0:
        raise ContractError("sigma = 0 has unbounded privacy loss")
    if sigma < 0 or not 0 < q <= 1:
        raise ContractError("need sigma > 0 and q in (0, 1]")
    if int(alpha) != alpha or alpha < 2:
        raise ContractError("alpha must be an integer >= 2")
    alpha = int(alpha)
    if q == 1.0:
        return alpha / (2.0 * sigma * sigma)
    logq = math.log(q)
    log1mq = math.log1p(-q)
    terms = [
        _log_binom(alpha, k)
        + (alpha - k) * log1mq
        + k * logq
        + (k * k - k) / (2.0 * sigma * sigma)
        for k in range(alpha + 1)
    ]
    return _logsumexp(terms) / (alpha - 1)


def _log_binom(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def _logsumexp(terms) -> float:
    m = max(terms)
    return m + math.log(sum(math.exp(t - m) for t in terms))


def rdp_vector(q: float, sigma: float, orders=DEFAULT_ORDERS) -> np.ndarray:
    return np.array([rdp_step(q, sigma, a) for a in orders])


@dataclass
class AccountantState:
    orders: tuple = DEFAULT_ORDERS
    rdp: np.ndarray = None
    steps: int = 0

    def __post_init__(self):
        if self.rdp is None:
            self.rdp = np.zeros(len(self.orders))

    def step(self, q: float, sigma: float, count: int = 1) -> None:
        """Compose ``count`` releases of the subsampled Gaussian mechanism."""
        self.rdp = self.rdp + count * rdp_vector(q, sigma, self.orders)
        self.steps += count


def epsilon_of(state: AccountantState, delta: float):
    """Convert accumulated RDP to (epsilon, best_order) at the given delta.

    Minimizes over the configured orders; ties go to the smallest order.
    """
    if state.steps < 1:
        raise ContractError("accountant has no steps to convert")
    if not 0 < delta < 1:
        raise ContractError("delta must be in (0, 1)")
    orders = np.asarray(state.orders, dtype=np.float64)
    eps = state.rdp + math.log(1.0 / delta) / (orders - 1.0)
    i = int(np.argmin(eps))
    return float(eps[i]), int(state.orders[i])


def epsilon_for(q: float, sigma: float, steps: int, delta: float, orders=DEFAULT_ORDERS):
    st = AccountantState(orders=orders)
    st.step(q, sigma, count=steps)
    return epsilon_of(st, delta)


SIGMA_RANGE = (0.3, 1e3)


def calibrate_sigma(
    target_epsilon: float,
    delta: float,
    q: float,
    steps: int,
    orders=DEFAULT_ORDERS,
) -> float:
    """Smallest noise multiplier (to 1e-3 relative) meeting the target.

    Bisection over sigma in [0.3, 1e3]; the returned sigma satisfies
    eps(sigma) <= target while eps(sigma * (1 - 1e-3)) exceeds it, which is
    the bracket certificate the tests check. Raises CalibrationRangeError if
    no such bracket exists inside the range.
    """
    if target_epsilon <= 0:
        raise ContractError("target_epsilon must be positive")
    lo, hi = SIGMA_RANGE

    def eps_at(s):
        return epsilon_for(q, s, steps, delta, orders)[0]

    if eps_at(hi) > target_epsilon:
        raise CalibrationRangeError(
            f"target epsilon {target_epsilon} unreachable: eps({hi}) = "
            f"{eps_at(hi):.4g} still exceeds it"
        )
    if eps_at(lo) <= target_epsilon:
        raise CalibrationRangeError(
            f"target epsilon {target_epsilon} already met at sigma = {lo}; "
            "no bracket inside the allowed range"
        )
    # invariant: eps(lo) > target >= eps(hi)
    while hi - lo > 5e-4 * hi:
        mid = 0.5 * (lo + hi)
        if eps_at(mid) <= target_epsilon:
            hi = mid
        else:
            lo = mid
    return hi
