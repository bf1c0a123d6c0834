"""Source data: synthetic Gauss-Markov textures and image-directory ingestion."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from scipy.linalg import cholesky, toeplitz

log = logging.getLogger("mimojscc")

__all__ = ["ar1_textures", "load_image_dir", "center_crop_to_multiple"]

# Raster formats Pillow can read losslessly.
IMAGE_SUFFIXES = {".png", ".bmp", ".ppm", ".tif", ".tiff"}


def _ar1_factor(size: int, rho: float) -> np.ndarray:
    """Cholesky factor of the Toeplitz(rho^|i-j|) AR(1) covariance."""
    return cholesky(toeplitz(rho ** np.arange(size)), lower=True)


def ar1_textures(
    size: int,
    rho: float,
    count: int,
    seed,
    channels: int = 3,
    amplitude: float = 0.25,
) -> np.ndarray:
    """Separable AR(1) textures quantized to 8-bit levels and scaled to [0, 1].

    Each channel of each image is ``L E L^T`` with i.i.d. standard normal E,
    giving correlation ``rho^|di| * rho^|dj|`` in both axes, then mapped to
    pixels as ``0.5 + amplitude * field`` (clipped).  Returns an array of
    shape ``(count, size, size, channels)``.
    """
    if not 0 <= rho < 1:
        raise ValueError(f"rho must be in [0, 1), got {rho}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    factor = _ar1_factor(size, rho)
    eps = rng.standard_normal((count, channels, size, size))
    fields = factor @ eps @ factor.T
    pixels = np.clip(0.5 + amplitude * fields, 0.0, 1.0)
    pixels = np.round(pixels * 255.0) / 255.0
    return pixels.transpose(0, 2, 3, 1)


def center_crop_to_multiple(img: np.ndarray, multiple: int) -> np.ndarray:
    """Center-crop height and width down to the nearest multiple."""
    h, w = img.shape[:2]
    nh, nw = (h // multiple) * multiple, (w // multiple) * multiple
    if nh < multiple or nw < multiple:
        raise ValueError(f"image {h}x{w} too small for patch size {multiple}")
    top, left = (h - nh) // 2, (w - nw) // 2
    return img[top : top + nh, left : left + nw]


def load_image_dir(path, patch_size: int) -> list:
    """Load 8-bit RGB images from a directory as [0, 1] float arrays.

    Images whose dimensions are not divisible by ``patch_size`` are
    center-cropped (logged); unreadable files are skipped with a warning.
    """
    from PIL import Image, UnidentifiedImageError

    root = Path(path)
    if not root.is_dir():
        raise ValueError(f"dataset directory does not exist: {root}")
    images = []
    skipped = 0
    for file in sorted(root.iterdir()):
        if file.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            with Image.open(file) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except (OSError, UnidentifiedImageError) as exc:
            skipped += 1
            log.warning("skipping unreadable image %s: %s", file, exc)
            continue
        h, w = arr.shape[:2]
        if h % patch_size or w % patch_size:
            arr = center_crop_to_multiple(arr, patch_size)
            log.info("center-cropped %s from %dx%d to %dx%d",
                     file.name, h, w, arr.shape[0], arr.shape[1])
        images.append(arr)
    if skipped:
        log.warning("skipped %d unreadable file(s) in %s", skipped, root)
    if not images:
        raise ValueError(f"no readable images found in {root}")
    return images
