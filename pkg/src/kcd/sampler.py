"""Generation loops: one-shot, naive re-degradation, and improved cold sampling.

All loops start from the zero-filled reconstruction of the measured k-space
(``x_T``) and call the restorer exactly ``T`` times, always passing the peak
magnitude of ``x_T`` as the trajectory's intensity reference.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .degradation import degrade, zero_filled
from .fourier import ValidationError, as_complex_image, forward_transform, inverse_transform
from .masks import SamplingMask, make_schedule, mask_at

__all__ = [
    "ReconResult",
    "sample_naive",
    "sample_cold",
    "sample_one_shot",
    "multi_sample",
    "derive_seeds",
    "pixel_std",
]

SAMPLERS = ("one-shot", "naive", "cold")


@dataclass
class ReconResult:
    estimate: np.ndarray
    sampler_kind: str
    steps_used: int
    samples: list = field(default_factory=list)
    uncertainty: np.ndarray | None = None
    metrics: dict = field(default_factory=dict)


def _setup(k, mask: SamplingMask, T):
    k = as_complex_image(k, "k")
    if k.shape != mask.shape:
        raise ValidationError(f"k-space shape {k.shape} does not match mask shape {mask.shape}")
    if not (isinstance(T, (int, np.integer)) and T >= 1):
        raise ValidationError(f"T must be a positive integer, got {T!r}")
    x_T = zero_filled(k, mask)
    return k, x_T, float(np.max(np.abs(x_T)))


def _consistent(x, k, mask):
    # optional: re-insert the measured k-space samples into the estimate
    kx = forward_transform(x)
    return inverse_transform(np.where(mask.bits, k, kx))


def sample_naive(model, k, mask: SamplingMask, T: int, seed: int = 0, *,
                 independent_subsets: bool = False, data_consistency: bool = False) -> ReconResult:
    """``x0_hat = R(x_t, t); x_{t-1} = D(x0_hat, t - 1)`` for ``t = T..1``."""
    k, x, scale = _setup(k, mask, T)
    schedule = make_schedule(mask, T, seed, independent=independent_subsets)
    for t in range(T, 0, -1):
        x0_hat = model.apply(x, t, T, scale)
        x = degrade(x0_hat, t - 1, schedule)
    if data_consistency:
        x = _consistent(x, k, mask)
    return ReconResult(x, "naive", T)


def sample_cold(model, k, mask: SamplingMask, T: int, seed: int = 0, *,
                independent_subsets: bool = False, data_consistency: bool = False) -> ReconResult:
    """``x_{t-1} = x_t - D(x0_hat, t) + D(x0_hat, t - 1)`` with ``x0_hat = R(x_t, t)``.

    The update is carried out on the k-space of ``x_t`` as
    ``K_{t-1} = K_t + (M_{t-1} - M_t) o F(x0_hat)``, which is the same linear
    map but never touches measured samples and adds each newly revealed
    entry exactly once (no round-off drift across steps).
    """
    k, x, scale = _setup(k, mask, T)
    schedule = make_schedule(mask, T, seed, independent=independent_subsets)
    kt = k * mask.bits
    for t in range(T, 0, -1):
        x0_hat = model.apply(x, t, T, scale)
        delta = mask_at(schedule, t - 1).astype(np.int8) - mask_at(schedule, t)
        kt = kt + delta * forward_transform(x0_hat)
        x = inverse_transform(kt)
    if data_consistency:
        x = _consistent(x, k, mask)
    return ReconResult(x, "cold", T)


def sample_one_shot(model, k, mask: SamplingMask, T: int = 1, seed: int = 0, **kwargs) -> ReconResult:
    """Plain U-Net baseline: a single restorer call on the zero-filled image.

    Identical in value to :func:`sample_naive` with ``T = 1``.
    """
    result = sample_naive(model, k, mask, 1, seed, **kwargs)
    result.sampler_kind = "one-shot"
    return result


_DISPATCH = {"one-shot": sample_one_shot, "naive": sample_naive, "cold": sample_cold}


def run_sampler(kind: str, model, k, mask, T, seed=0, **kwargs) -> ReconResult:
    if kind not in _DISPATCH:
        raise ValidationError(f"unknown sampler {kind!r}; expected one of {SAMPLERS}")
    return _DISPATCH[kind](model, k, mask, T, seed, **kwargs)


def derive_seeds(master_seed: int, n: int) -> list[int]:
    """``n`` distinct, reproducible 63-bit seeds from one master seed."""
    state = np.random.SeedSequence(int(master_seed)).generate_state(n, dtype=np.uint64)
    return [int(s >> np.uint64(1)) for s in state]


def pixel_std(images) -> np.ndarray:
    """Pixelwise population standard deviation, exactly zero for identical inputs."""
    stack = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    d = stack - stack[0]
    d = d - d.mean(axis=0)
    return np.sqrt((d ** 2).mean(axis=0))


def multi_sample(model, k, mask: SamplingMask, T: int, n_samples: int, master_seed: int = 0,
                 aggregation: str = "mean", sampler: str = "cold", jobs: int = 1,
                 **kwargs) -> ReconResult:
    """Run ``n_samples`` trajectories with different schedule seeds and aggregate.

    The estimate is the pixelwise mean (or median) of the complex samples; the
    uncertainty map is the pixelwise standard deviation of their magnitudes.
    """
    if n_samples < 1:
        raise ValidationError(f"n_samples must be >= 1, got {n_samples}")
    if aggregation not in ("mean", "median"):
        raise ValidationError(f"unknown aggregation {aggregation!r}")
    seeds = derive_seeds(master_seed, n_samples)

    def one(seed):
        return run_sampler(sampler, model, k, mask, T, seed, **kwargs).estimate

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            samples = list(pool.map(one, seeds))
    else:
        samples = [one(s) for s in seeds]
    stack = np.stack(samples)
    if aggregation == "mean":
        # fixed-order sum keeps the reduction bit-reproducible
        estimate = np.zeros_like(samples[0])
        for s in samples:
            estimate = estimate + s
        estimate = estimate / n_samples
    else:
        estimate = np.median(stack.real, axis=0) + 1j * np.median(stack.imag, axis=0)
    uncertainty = pixel_std([np.abs(s) for s in samples])
    return ReconResult(estimate, sampler, T, samples=samples, uncertainty=uncertainty)
