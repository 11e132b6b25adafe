"""Image losses and quality metrics with their gradients."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 99.0


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


_KERNEL = gaussian_kernel()


def _blur(img: np.ndarray) -> np.ndarray:
    # zero-padded "same" filtering over the two spatial axes
    out = correlate1d(img, _KERNEL, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _KERNEL, axis=1, mode="constant", cval=0.0)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    a, b = _check_pair(a, b)
    return _ssim_terms(a, b, data_range)[0]


def _ssim_terms(a, b, data_range):
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _blur(a), _blur(b)
    var_a = _blur(a * a) - mu_a**2
    var_b = _blur(b * b) - mu_b**2
    cov = _blur(a * b) - mu_a * mu_b
    a1 = 2.0 * mu_a * mu_b + c1
    a2 = 2.0 * cov + c2
    b1 = mu_a**2 + mu_b**2 + c1
    b2 = var_a + var_b + c2
    s = a1 * a2 / (b1 * b2)
    return s, (mu_a, mu_b, a1, a2, b1, b2)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5) over pixels and channels."""
    return float(np.mean(ssim_map(a, b, data_range)))


def ssim_with_grad(a, b, data_range: float = 1.0):
    """(ssim, d ssim / d a, d ssim / d b)."""
    a, b = _check_pair(a, b)
    s, (mu_a, mu_b, a1, a2, b1, b2) = _ssim_terms(a, b, data_range)
    scale = 1.0 / s.size
    d_var = -s / b2 * scale  # same for var_a and var_b
    d_cov = 2.0 * a1 / (b1 * b2) * scale
    common = 2.0 * a2 / (b1 * b2) * scale
    d_mu_a = common * mu_b - s * 2.0 * mu_a / b1 * scale
    d_mu_b = common * mu_a - s * 2.0 * mu_b / b1 * scale
    blur_var, blur_cov = _blur(d_var), _blur(d_cov)
    g_a = _blur(d_mu_a - 2.0 * mu_a * d_var - mu_b * d_cov) + 2.0 * a * blur_var + b * blur_cov
    g_b = _blur(d_mu_b - 2.0 * mu_b * d_var - mu_a * d_cov) + 2.0 * b * blur_var + a * blur_cov
    return float(np.mean(s)), g_a, g_b


def l1(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_with_grad(a, b):
    a, b = _check_pair(a, b)
    d = a - b
    g = np.sign(d) / d.size
    return float(np.mean(np.abs(d))), g, -g


def dssim_loss_with_grad(a, b, weight: float):
    """L1 + weight * (1 - SSIM) / 2, with gradients for both images."""
    v1, g1a, g1b = l1_with_grad(a, b)
    if weight == 0.0:
        return v1, g1a, g1b
    s, gsa, gsb = ssim_with_grad(a, b)
    return v1 + weight * (1.0 - s) / 2.0, g1a - 0.5 * weight * gsa, g1b - 0.5 * weight * gsb


def mse(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """PSNR in dB for values in [0, 1]; identical images report the 99 dB cap."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / err)))
