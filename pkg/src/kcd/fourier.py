"""Centered orthonormal 2D Fourier transforms between image space and k-space.

Conventions used throughout the package:

* arrays are ``complex128`` with shape ``(..., H, W)``;
* normalization is orthonormal (``1/sqrt(HW)`` overall), so Parseval holds;
* k-space is stored DC-centered, with the zero frequency at ``(H // 2, W // 2)``.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ValidationError",
    "as_complex_image",
    "forward_transform",
    "inverse_transform",
    "magnitude",
]


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


def as_complex_image(x, name: str = "x") -> np.ndarray:
    """Return ``x`` as a finite complex128 array with at least two dimensions."""
    arr = np.asarray(x)
    if arr.ndim < 2:
        raise ValidationError(f"{name} must be at least 2D, got shape {arr.shape}")
    arr = arr.astype(np.complex128, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def forward_transform(x) -> np.ndarray:
    """Image -> centered k-space, orthonormal."""
    x = as_complex_image(x)
    k = np.fft.fft2(np.fft.ifftshift(x, axes=(-2, -1)), norm="ortho")
    return np.fft.fftshift(k, axes=(-2, -1))


def inverse_transform(k) -> np.ndarray:
    """Centered k-space -> image, orthonormal. Exact inverse of :func:`forward_transform`."""
    k = as_complex_image(k, "k")
    x = np.fft.ifft2(np.fft.ifftshift(k, axes=(-2, -1)), norm="ortho")
    return np.fft.fftshift(x, axes=(-2, -1))


def magnitude(x) -> np.ndarray:
    return np.abs(np.asarray(x))
