"""Entropy models for latent patches and hyper-latents.

Latents are modeled per element as a Gaussian convolved with U(-1/2, 1/2),
i.e. the probability of a value v is ``Phi((v - mu + 1/2)/sigma) -
Phi((v - mu - 1/2)/sigma)``.  Hyper-latents use a per-channel logistic
location/scale family under the same integration rule.  All rates are in bits;
conversion to channel symbols happens in the spatial-multiplexing layer.

Evaluation is done in the log-CDF domain so tail values stay finite and
nonnegative without catastrophic cancellation; analytic gradients are exposed
alongside the values for the manual backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

__all__ = [
    "GaussianParams",
    "FactorizedPrior",
    "SIGMA_MIN",
    "proxy_quantize",
    "hard_quantize",
    "discretized_gaussian_nll",
    "discretized_gaussian_nll_grad",
    "patch_nll",
    "factorized_nll",
    "factorized_nll_grad",
    "side_info_rate",
]

SIGMA_MIN = 1e-6
_LN2 = np.log(2.0)
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
# Ceiling applied when a bin probability underflows to zero in float64
# (|v - mu| beyond roughly 38 sigma).  Keeps the contract "finite, >= 0".
_MAX_NLL_BITS = 1.0e6


@dataclass(frozen=True)
class GaussianParams:
    """Per-element (mu, sigma) of the conditional Gaussian latent model.

    ``sigma`` is clamped at ``SIGMA_MIN`` on construction.
    """

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.shape != sigma.shape:
            raise ValueError(f"mu shape {mu.shape} != sigma shape {sigma.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ValueError("GaussianParams entries must be finite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", np.maximum(sigma, SIGMA_MIN))


@dataclass(frozen=True)
class FactorizedPrior:
    """Per-channel logistic location/scale prior for the hyper-latent."""

    loc: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        loc = np.atleast_1d(np.asarray(self.loc, dtype=np.float64))
        scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        if loc.shape != scale.shape:
            raise ValueError(f"loc shape {loc.shape} != scale shape {scale.shape}")
        if np.any(scale <= 0):
            raise ValueError("prior scale must be > 0")
        object.__setattr__(self, "loc", loc)
        object.__setattr__(self, "scale", scale)


def proxy_quantize(v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Additive U(-1/2, 1/2) noise standing in for rounding during training."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("proxy_quantize input must be finite")
    return v + rng.uniform(-0.5, 0.5, size=v.shape)


def hard_quantize(v: np.ndarray) -> np.ndarray:
    """Entrywise rounding to the nearest integer, halves away from zero."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("hard_quantize input must be finite")
    return (np.sign(v) * np.floor(np.abs(v) + 0.5)).astype(np.int64)


def _log_bin_prob_from_log_cdfs(log_hi: np.ndarray, log_lo: np.ndarray) -> np.ndarray:
    """log(exp(log_hi) - exp(log_lo)) with log_hi >= log_lo, both <= 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        diff = np.where(log_lo < log_hi, np.log1p(-np.exp(log_lo - log_hi)), -np.inf)
    return log_hi + diff


def _gaussian_log_bin_prob(v, mu, sigma):
    """Log probability of the integration bin [v-1/2, v+1/2] under N(mu, sigma^2).

    Also returns the unfolded bin edges in standardized coordinates for
    gradient evaluation.
    """
    delta = v - mu
    hi = (delta + 0.5) / sigma
    lo = (delta - 0.5) / sigma
    # Fold onto the lower tail; Phi(hi)-Phi(lo) = Phi(-lo)-Phi(-hi) by symmetry.
    folded = -np.abs(delta)
    log_hi = log_ndtr((folded + 0.5) / sigma)
    log_lo = log_ndtr((folded - 0.5) / sigma)
    return _log_bin_prob_from_log_cdfs(log_hi, log_lo), hi, lo


def discretized_gaussian_nll(v: np.ndarray, params: GaussianParams) -> np.ndarray:
    """Per-element code length in bits of ``v`` under the quantized-Gaussian model."""
    v = np.asarray(v, dtype=np.float64)
    log_p, _, _ = _gaussian_log_bin_prob(v, params.mu, params.sigma)
    nll = -log_p / _LN2
    return np.minimum(np.where(np.isfinite(nll), nll, _MAX_NLL_BITS), _MAX_NLL_BITS)


def discretized_gaussian_nll_grad(v, mu, sigma):
    """NLL in bits plus analytic gradients w.r.t. ``v``, ``mu`` and ``sigma``.

    The bin-edge density ratios ``phi(edge)/p`` are evaluated in the log
    domain, which stays accurate deep into the tails.
    """
    v = np.asarray(v, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64), SIGMA_MIN)
    log_p, hi, lo = _gaussian_log_bin_prob(v, mu, sigma)
    nll = -log_p / _LN2
    nll = np.minimum(np.where(np.isfinite(nll), nll, _MAX_NLL_BITS), _MAX_NLL_BITS)
    with np.errstate(over="ignore", invalid="ignore"):
        r_hi = np.exp(-0.5 * hi * hi - _LOG_SQRT_2PI - log_p)
        r_lo = np.exp(-0.5 * lo * lo - _LOG_SQRT_2PI - log_p)
    r_hi = np.where(np.isfinite(r_hi), r_hi, 0.0)
    r_lo = np.where(np.isfinite(r_lo), r_lo, 0.0)
    d_v = -(r_hi - r_lo) / (sigma * _LN2)
    d_mu = -d_v
    d_sigma = (hi * r_hi - lo * r_lo) / (sigma * _LN2)
    return nll, d_v, d_mu, d_sigma


def patch_nll(y_i: np.ndarray, params: GaussianParams) -> float:
    """Total bits for one latent patch: sum of its per-element code lengths."""
    return float(np.sum(discretized_gaussian_nll(y_i, params)))


def _logistic_log_cdf(x: np.ndarray) -> np.ndarray:
    # log sigmoid(x) = -softplus(-x), stable in both tails.
    return -np.logaddexp(0.0, -x)


def _logistic_log_bin_prob(z, loc, scale):
    delta = z - loc
    hi = (delta + 0.5) / scale
    lo = (delta - 0.5) / scale
    log_p = _log_bin_prob_from_log_cdfs(_logistic_log_cdf(hi), _logistic_log_cdf(lo))
    return log_p, hi, lo


def factorized_nll(z: np.ndarray, prior: FactorizedPrior) -> float:
    """Total bits for the hyper-latent under the factorized logistic prior.

    ``z`` has shape ``(..., n_channels)``; the prior broadcasts over leading axes.
    """
    z = np.asarray(z, dtype=np.float64)
    log_p, _, _ = _logistic_log_bin_prob(z, prior.loc, prior.scale)
    nll = -log_p / _LN2
    nll = np.minimum(np.where(np.isfinite(nll), nll, _MAX_NLL_BITS), _MAX_NLL_BITS)
    return float(np.sum(nll))


def factorized_nll_grad(z, loc, scale):
    """Per-element bits plus gradients w.r.t. ``z``, ``loc`` and ``scale``.

    Gradients for ``loc``/``scale`` are per element (callers reduce over the
    broadcast axes themselves).
    """
    z = np.asarray(z, dtype=np.float64)
    log_p, hi, lo = _logistic_log_bin_prob(z, loc, scale)
    nll = -log_p / _LN2
    nll = np.minimum(np.where(np.isfinite(nll), nll, _MAX_NLL_BITS), _MAX_NLL_BITS)
    # Logistic density at the edges, as a ratio to the bin probability.
    log_f_hi = _logistic_log_cdf(hi) + _logistic_log_cdf(-hi)
    log_f_lo = _logistic_log_cdf(lo) + _logistic_log_cdf(-lo)
    with np.errstate(over="ignore", invalid="ignore"):
        r_hi = np.exp(log_f_hi - log_p)
        r_lo = np.exp(log_f_lo - log_p)
    r_hi = np.where(np.isfinite(r_hi), r_hi, 0.0)
    r_lo = np.where(np.isfinite(r_lo), r_lo, 0.0)
    d_z = -(r_hi - r_lo) / (scale * _LN2)
    d_loc = -d_z
    d_scale = (hi * r_hi - lo * r_lo) / (scale * _LN2)
    return nll, d_z, d_loc, d_scale


def side_info_rate(z_nll_bits: float, c_z: float) -> float:
    """Channel symbols needed to carry ``z_nll_bits`` over a link of capacity ``c_z``.

    Ideal entropy-coding accounting; no actual coder is run.
    """
    if c_z <= 0:
        raise ValueError(f"c_z must be > 0, got {c_z}")
    return z_nll_bits / c_z
