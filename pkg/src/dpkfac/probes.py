"""Synthetic probe batches: spectrally shaped image noise, structural token
sequences, and uniform random labels.

These generators only consume a spec and an ``Rng`` — no dataset ever flows
in, which is the structural basis of the zero-privacy-cost claim for probe
construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .linalg import fft2, ifft2
from .rng import Rng


@dataclass(frozen=True)
class PinkNoiseSpec:
    batch: int
    channels: int
    height: int
    width: int
    alpha: float = 1.0
    eps0: float = 1e-6

    def __post_init__(self):
        if min(self.batch, self.channels, self.height, self.width) < 1:
            raise ContractError("pink noise spec needs all counts >= 1")
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ContractError("alpha must be finite and >= 0")
        if self.eps0 <= 0:
            raise ContractError("eps0 must be positive")


@dataclass(frozen=True)
class TokenNoiseSpec:
    batch: int
    max_len: int
    vocab: int
    cls_id: int
    sep_id: int
    pad_id: int
    min_len: int = 1
    uses_separator: bool = True
    weight_exponent: float = 0.0  # 0 = uniform payload; >0 = power-law over ranks

    def __post_init__(self):
        ids = (self.cls_id, self.sep_id, self.pad_id)
        if len(set(ids)) != 3 or max(ids) >= self.vocab or min(ids) < 0:
            raise ContractError("special token ids must be distinct and < vocab")
        if not 1 <= self.min_len <= self.max_len:
            raise ContractError("need 1 <= min_len <= max_len")
        # the separator occupies one slot past the payload
        if self.uses_separator and self.min_len > self.max_len - 1:
            raise ContractError("separator needs min_len <= max_len - 1")
        if self.batch < 1:
            raise ContractError("batch must be >= 1")


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def _radius_grid(h: int, w: int) -> np.ndarray:
    """Integer-index distance of each FFT bin from the zero-frequency bin."""
    ku = np.arange(h)
    ku = np.where(ku <= h // 2, ku, ku - h).astype(np.float64)
    kv = np.arange(w)
    kv = np.where(kv <= w // 2, kv, kv - w).astype(np.float64)
    return np.sqrt(ku[:, None] ** 2 + kv[None, :] ** 2)


def spectral_filter(h: int, w: int, alpha: float, eps0: float) -> np.ndarray:
    """Amplitude filter 1 / (r^(alpha/2) + eps0) on the unshifted FFT grid.

    The alpha/2 amplitude exponent makes the *power* spectrum decay as
    r^-alpha. The zero-frequency bin gets gain 0: a 1/eps0 gain there makes
    every field a near-constant offset (all batch energy in the DC mode),
    which defeats the probe; eps0 still guards the formula on the r > 0 bins.
    """
    r = _radius_grid(h, w)
    filt = 1.0 / (r ** (alpha / 2.0) + eps0)
    filt[0, 0] = 0.0
    return filt


def gen_pink_noise(spec: PinkNoiseSpec, rng: Rng) -> np.ndarray:
    """Batch of 1/f^alpha noise images, shape (batch, channels, H, W).

    Fields are drawn per channel on the smallest enclosing power-of-two grid,
    shaped in the frequency domain, cropped to (H, W), and normalized to zero
    mean / unit standard deviation over the whole batch.
    """
    n = _next_pow2(max(spec.height, spec.width))
    white = rng.standard_normal((spec.batch, spec.channels, n, n))
    shaped = ifft2(fft2(white) * spectral_filter(n, n, spec.alpha, spec.eps0)).real
    x = shaped[..., : spec.height, : spec.width]
    x = x - x.mean()
    sd = x.std()
    if sd > 0:
        x = x / sd
    return np.ascontiguousarray(x)


def gen_token_noise(spec: TokenNoiseSpec, rng: Rng):
    """Structural token probes: (ids, mask), both (batch, max_len) int64.

    Each row is CLS + random payload of drawn length, an optional separator
    one slot past the payload, PAD elsewhere; the mask is 1 on the first
    ``length`` positions and 0 after.
    """
    b, l = spec.batch, spec.max_len
    ids = np.full((b, l), spec.pad_id, dtype=np.int64)
    mask = np.zeros((b, l), dtype=np.int64)
    hi = spec.max_len - 1 if spec.uses_separator else spec.max_len
    lengths = rng.uniform_int(spec.min_len, hi + 1, size=b)
    payload = _sample_tokens(spec, rng, (b, l))
    for i in range(b):
        li = int(lengths[i])
        ids[i, :li] = payload[i, :li]
        ids[i, 0] = spec.cls_id
        if spec.uses_separator:
            ids[i, li] = spec.sep_id
        mask[i, :li] = 1
    return ids, mask


def _sample_tokens(spec: TokenNoiseSpec, rng: Rng, shape) -> np.ndarray:
    if spec.weight_exponent == 0.0:
        return rng.uniform_int(0, spec.vocab, size=shape)
    ranks = np.arange(1, spec.vocab + 1, dtype=np.float64)
    w = ranks ** -spec.weight_exponent
    cdf = np.cumsum(w / w.sum())
    u = rng.uniform(size=shape)
    return np.searchsorted(cdf, u).astype(np.int64)


def gen_labels(batch: int, num_classes: int, rng: Rng) -> np.ndarray:
    """Uniform random class labels in [0, num_classes)."""
    if num_classes < 2:
        raise ContractError("num_classes must be >= 2")
    return rng.uniform_int(0, num_classes, size=batch)


# ---------------------------------------------------------------------------
# spectrum measurement (test oracle and `gen-noise` CLI output)


def radial_power_spectrum(x: np.ndarray):
    """Ring-averaged power spectrum of fields shaped (..., H, W).

    Returns (radii, power): integer radial bins from 1 up to just below the
    Nyquist ring, power averaged over bins and all leading axes.
    """
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2], x.shape[-1]
    power = np.abs(fft2(x)) ** 2
    power = power.reshape(-1, h, w).mean(axis=0)
    r = np.rint(_radius_grid(h, w)).astype(np.intp)
    rmax = min(h, w) // 2 - 1
    radii = np.arange(1, rmax + 1)
    out = np.array([power[r == k].mean() for k in radii])
    return radii.astype(np.float64), out


def fit_log_slope(radii: np.ndarray, power: np.ndarray) -> float:
    """Least-squares slope of log(power) against log(radius)."""
    lx = np.log(radii)
    ly = np.log(power)
    lx = lx - lx.mean()
    return float((lx * (ly - ly.mean())).sum() / (lx * lx).sum())
