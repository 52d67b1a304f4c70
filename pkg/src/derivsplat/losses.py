"""Photometric losses with analytic image gradients, plus PSNR/SSIM metrics."""

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeMismatchError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP = 100.0


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _mask_weights(mask, shape):
    if mask is None:
        return np.ones(shape)
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == len(shape) - 1:
        m = m[..., None]
    return np.broadcast_to(m, shape)


def l1_loss(rendered, reference, mask=None):
    """Mean absolute error over (masked) pixels; returns ``(loss, dloss/drendered)``."""
    x, y = _check(rendered, reference)
    w = _mask_weights(mask, x.shape)
    n = max(w.sum(), 1.0)
    diff = x - y
    return float(np.sum(w * np.abs(diff)) / n), w * np.sign(diff) / n


def _gauss_window():
    r = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(r**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


_WINDOW = _gauss_window()


def _blur(img):
    out = correlate1d(img, _WINDOW, axis=0, mode="constant")
    return correlate1d(out, _WINDOW, axis=1, mode="constant")


def _ssim_terms(x, y):
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * (exy - mx * my) + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2
    return mx, my, a1, a2, b1, b2


def ssim_metric(rendered, reference):
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, zero padding) over pixels and channels."""
    x, y = _check(rendered, reference)
    _, _, a1, a2, b1, b2 = _ssim_terms(x, y)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def dssim_loss(rendered, reference):
    """``1 - SSIM`` with its gradient w.r.t. ``rendered``."""
    x, y = _check(rendered, reference)
    mx, my, a1, a2, b1, b2 = _ssim_terms(x, y)
    s = a1 * a2 / (b1 * b2)
    w = -1.0 / s.size
    den = b1 * b2
    d_mx = w * ((2 * my * a2 - 2 * my * a1) / den - s * (2 * mx / b1 - 2 * mx / b2))
    d_exx = w * (-s / b2)
    d_exy = w * (2 * a1 / den)
    grad = _blur(d_mx) + 2 * x * _blur(d_exx) + y * _blur(d_exy)
    return float(1.0 - s.mean()), grad


def total_loss(rendered, reference, lambda_l1=0.8, lambda_dssim=0.2, mask=None):
    """Weighted L1 + D-SSIM objective and its image gradient."""
    l1, g1 = l1_loss(rendered, reference, mask)
    ds, g2 = dssim_loss(rendered, reference)
    return lambda_l1 * l1 + lambda_dssim * ds, lambda_l1 * g1 + lambda_dssim * g2


def psnr(rendered, reference):
    x, y = _check(rendered, reference)
    mse = float(np.mean((x - y) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))
