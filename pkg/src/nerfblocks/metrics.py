"""Image quality metrics: PSNR and SSIM over [0, 1] float images."""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d

__all__ = ["psnr", "ssim", "luminance", "MetricError"]


class MetricError(ValueError):
    """Raised on incompatible metric inputs."""


def _check_pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """10 log10(1 / MSE) for images in [0, 1]; +inf for identical images."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def luminance(img):
    """Rec. 601 luma of an (H, W, 3) image; grayscale passes through."""
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        return img
    return img @ np.array([0.299, 0.587, 0.114])


def _gaussian_kernel(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean local SSIM with a Gaussian window, on luminance.

    Windows are 'valid' (no padding); images must be at least window-sized.
    """
    a, b = _check_pair(a, b)
    x = luminance(a)
    y = luminance(b)
    if min(x.shape) < window:
        raise MetricError(f"image {x.shape} smaller than the {window}x{window} SSIM window")
    kern = _gaussian_kernel(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    mu_x = convolve2d(x, kern, mode="valid")
    mu_y = convolve2d(y, kern, mode="valid")
    xx = convolve2d(x * x, kern, mode="valid")
    yy = convolve2d(y * y, kern, mode="valid")
    xy = convolve2d(x * y, kern, mode="valid")
    var_x = xx - mu_x**2
    var_y = yy - mu_y**2
    cov = xy - mu_x * mu_y

    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))
