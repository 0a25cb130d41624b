"""K-space degradation operator and the zero-filled reconstruction."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .fourier import ValidationError, as_complex_image, forward_transform, inverse_transform
from .masks import MaskSchedule, SamplingMask, mask_at

__all__ = ["zero_filled", "degrade", "degradation_strip", "save_strip_png"]


def _mask_bits(mask) -> np.ndarray:
    return mask.bits if isinstance(mask, SamplingMask) else np.asarray(mask, dtype=bool)


def zero_filled(k, mask) -> np.ndarray:
    """Inverse transform of the masked k-space, ``F^-1(M o k)``."""
    k = as_complex_image(k, "k")
    bits = _mask_bits(mask)
    if k.shape[-2:] != bits.shape:
        raise ValidationError(f"k-space shape {k.shape[-2:]} does not match mask shape {bits.shape}")
    return inverse_transform(k * bits)


def degrade(x0, t: int, schedule: MaskSchedule) -> np.ndarray:
    """``D(x0, t) = F^-1(M_t o F(x0))``.

    Also used on network estimates; the estimate is always re-transformed.
    """
    bits = mask_at(schedule, t)
    return zero_filled(forward_transform(x0), bits)


def degradation_strip(x0, schedule: MaskSchedule, steps) -> list[np.ndarray]:
    return [degrade(x0, int(t), schedule) for t in steps]


def save_strip_png(images, path) -> None:
    """Write magnitudes side by side as one 8-bit PNG, min-max normalized over the strip."""
    from PIL import Image

    mags = [np.abs(im) for im in images]
    lo = min(float(m.min()) for m in mags)
    hi = max(float(m.max()) for m in mags)
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    row = np.concatenate(mags, axis=1)
    Image.fromarray(np.round((row - lo) * scale).astype(np.uint8), mode="L").save(Path(path))
