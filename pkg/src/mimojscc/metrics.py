"""Reconstruction quality metrics: PSNR and multi-scale SSIM."""

from __future__ import annotations

import logging

import numpy as np
from scipy.ndimage import correlate1d

log = logging.getLogger("mimojscc")

__all__ = ["psnr", "ms_ssim"]

PSNR_CAP_DB = 100.0

# Conventional 5-scale weights.
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WIN_SIZE = 11
_WIN_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def psnr(x: np.ndarray, x_hat: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    mse = np.mean((x - x_hat) ** 2)
    if mse == 0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak**2 / mse), PSNR_CAP_DB)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable 2-D correlation, 'valid' region only.  img is (h, w)."""
    margin = window.size // 2
    out = correlate1d(img, window, axis=0, mode="constant")
    out = correlate1d(out, window, axis=1, mode="constant")
    return out[margin:-margin, margin:-margin]


def _ssim_channel(x: np.ndarray, y: np.ndarray, window: np.ndarray, peak: float):
    """Mean luminance and contrast-structure terms for one channel."""
    c1 = (_K1 * peak) ** 2
    c2 = (_K2 * peak) ** 2
    mu_x = _filter_valid(x, window)
    mu_y = _filter_valid(y, window)
    sxx = _filter_valid(x * x, window) - mu_x * mu_x
    syy = _filter_valid(y * y, window) - mu_y * mu_y
    sxy = _filter_valid(x * y, window) - mu_x * mu_y
    lum = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    cs = (2.0 * sxy + c2) / (sxx + syy + c2)
    return float(lum.mean()), float(cs.mean())


def _downsample2(img: np.ndarray) -> np.ndarray:
    """2x2 average pooling; odd trailing rows/cols are dropped."""
    h, w = img.shape
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[0::2, 1::2] + img[1::2, 0::2] + img[1::2, 1::2])


def ms_ssim(x: np.ndarray, x_hat: np.ndarray, peak: float = 1.0) -> float:
    """Multi-scale SSIM with the conventional 5-scale weights.

    Uses an 11x11 Gaussian window (sigma 1.5) and stability constants
    k1 = 0.01, k2 = 0.03.  Inputs smaller than 11 * 2**(scales-1) per side get
    fewer scales automatically (weights renormalized, scale count logged);
    contrast-structure terms are clamped at zero so the result stays in [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    if x.ndim == 2:
        x = x[:, :, None]
        x_hat = x_hat[:, :, None]
    h, w = x.shape[:2]
    max_scales = 0
    side = min(h, w)
    while side >= _WIN_SIZE and max_scales < len(MS_SSIM_WEIGHTS):
        max_scales += 1
        side //= 2
    if max_scales < 1:
        raise ValueError(f"image {h}x{w} too small for an 11x11 SSIM window")
    if max_scales < len(MS_SSIM_WEIGHTS):
        log.info("ms_ssim: using %d scales for a %dx%d image", max_scales, h, w)
    weights = np.asarray(MS_SSIM_WEIGHTS[:max_scales])
    weights = weights / weights.sum()

    window = _gaussian_window(_WIN_SIZE, _WIN_SIGMA)
    n_ch = x.shape[2]
    per_channel = np.ones(n_ch)
    a = [x[:, :, ch] for ch in range(n_ch)]
    b = [x_hat[:, :, ch] for ch in range(n_ch)]
    for scale in range(max_scales):
        for ch in range(n_ch):
            lum, cs = _ssim_channel(a[ch], b[ch], window, peak)
            if scale == max_scales - 1:
                term = max(lum * cs, 0.0)
            else:
                term = max(cs, 0.0)
            per_channel[ch] *= term ** weights[scale]
        if scale != max_scales - 1:
            a = [_downsample2(im) for im in a]
            b = [_downsample2(im) for im in b]
    result = float(per_channel.mean())
    return min(max(result, 0.0), 1.0)
