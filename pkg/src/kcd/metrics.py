"""Image quality metrics (fastMRI conventions) and error-map rendering."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .fourier import ValidationError

__all__ = ["psnr", "ssim", "error_map", "render_error_map", "to_uint8"]

_EPS = float(np.finfo(np.float64).eps)


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return pred, target


def psnr(pred, target, data_range: float) -> float:
    """``10 log10(data_range^2 / MSE)`` in dB; ``inf`` for an exact match.

    A match counts as exact when the RMS error is at or below float64
    resolution of ``data_range`` (so finite values top out near 313 dB);
    FFT round-off from a perfect reconstruction lands there.
    """
    pred, target = _pair(pred, target)
    if not data_range > 0:
        raise ValidationError(f"data_range must be positive, got {data_range}")
    mse = np.mean((pred - target) ** 2)
    if mse <= (_EPS * data_range) ** 2:
        return math.inf
    return float(10.0 * np.log10(data_range ** 2 / mse))


def ssim(pred, target, data_range: float, window: int = 7, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully contained ``window x window`` uniform windows.

    Local variances and covariance use the unbiased ``1/(N-1)`` estimate, as in
    scikit-image's default used by the fastMRI evaluation code.
    """
    pred, target = _pair(pred, target)
    if pred.ndim != 2:
        raise ValidationError(f"ssim expects 2D images, got {pred.ndim}D")
    if window < 2 or window % 2 == 0 or window > min(pred.shape):
        raise ValidationError(f"window must be odd, >= 3 and <= {min(pred.shape)}, got {window}")
    if not data_range > 0:
        raise ValidationError(f"data_range must be positive, got {data_range}")
    n = window * window
    wx = sliding_window_view(pred, (window, window))
    wy = sliding_window_view(target, (window, window))
    ux = wx.mean(axis=(-2, -1))
    uy = wy.mean(axis=(-2, -1))
    cov_norm = n / (n - 1)
    vx = cov_norm * ((wx - ux[..., None, None]) ** 2).mean(axis=(-2, -1))
    vy = cov_norm * ((wy - uy[..., None, None]) ** 2).mean(axis=(-2, -1))
    vxy = cov_norm * ((wx - ux[..., None, None]) * (wy - uy[..., None, None])).mean(axis=(-2, -1))
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux ** 2 + uy ** 2 + c1) * (vx + vy + c2))
    return float(s.mean())


def error_map(pred, target, data_range: float, magnification: float = 5.0) -> np.ndarray:
    """``magnification * |pred - target|`` clipped to ``[0, data_range]``."""
    pred, target = _pair(pred, target)
    return np.minimum(magnification * np.abs(pred - target), data_range)


def render_error_map(pred, target, data_range: float, magnification: float = 5.0) -> np.ndarray:
    """8-bit rendering on the absolute scale ``0..data_range``."""
    e = error_map(pred, target, data_range, magnification)
    return np.round(e * (255.0 / data_range)).astype(np.uint8)


def to_uint8(image) -> np.ndarray:
    """Min-max normalize a real image to 8 bits (constant images map to 0)."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi <= lo:
        return np.zeros(image.shape, dtype=np.uint8)
    return np.round((image - lo) * (255.0 / (hi - lo))).astype(np.uint8)
