"""Under-sampling masks and the time-indexed k-space degradation schedule.

Four mask families are supported.  The 1D families select whole k-space
columns (phase-encode lines); ``gaussian-2d`` selects individual pixels.

A :class:`MaskSchedule` turns a measurement mask ``M`` into a sequence
``M_0 = J, ..., M_T = M``: the complement of ``M`` is put in a seeded order
once, and ``M_t`` keeps the first ``floor(|M^c| * (T - t) / T)`` entries of
that order on top of ``M``.  Masks therefore nest, ``M_{t+1} <= M_t``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fourier import ValidationError

__all__ = [
    "FAMILIES",
    "LINE_FAMILIES",
    "SamplingMask",
    "MaskSchedule",
    "default_center_fraction",
    "make_mask",
    "make_schedule",
    "mask_at",
    "center_columns",
    "center_square",
]

LINE_FAMILIES = ("cartesian-random", "cartesian-equispaced", "gaussian-1d")
FAMILIES = LINE_FAMILIES + ("gaussian-2d",)


def default_center_fraction(acceleration: float) -> float:
    """fastMRI pairing: 0.08 at 4x, 0.04 at 8x, i.e. ``0.32 / R`` in general."""
    return 0.32 / float(acceleration)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def center_columns(width: int, center_fraction: float) -> slice:
    n = _round_half_up(center_fraction * width)
    start = (width - n + 1) // 2
    return slice(start, start + n)


def center_square(height: int, width: int, center_fraction: float) -> tuple[slice, slice]:
    # round() guards against sqrt() landing a hair above an integer
    side = math.ceil(round(math.sqrt(center_fraction) * min(height, width), 9))
    r0 = (height - side + 1) // 2
    c0 = (width - side + 1) // 2
    return slice(r0, r0 + side), slice(c0, c0 + side)


@dataclass(frozen=True, eq=False)
class SamplingMask:
    """Binary k-space mask (True = sample kept) plus the parameters that made it."""

    bits: np.ndarray
    family: str
    acceleration: float
    center_fraction: float
    seed: int

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise ValidationError(f"mask must be 2D, got shape {bits.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def granularity(self) -> str:
        return "pixel" if self.family == "gaussian-2d" else "column"

    @property
    def sampled_fraction(self) -> float:
        return float(self.bits.mean())

    def descriptor(self) -> dict:
        return {
            "family": self.family,
            "acceleration": self.acceleration,
            "center_fraction": self.center_fraction,
            "seed": int(self.seed),
            "shape": [self.height, self.width],
        }

    @classmethod
    def from_descriptor(cls, desc: dict) -> "SamplingMask":
        h, w = desc["shape"]
        return make_mask(desc["family"], h, w, desc["acceleration"],
                         desc["center_fraction"], desc["seed"])

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.descriptor(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load_json(cls, path) -> "SamplingMask":
        return cls.from_descriptor(json.loads(Path(path).read_text()))

    def save_png(self, path) -> None:
        from PIL import Image

        Image.fromarray(self.bits.astype(np.uint8) * 255, mode="L").save(path)

    @staticmethod
    def load_png_bits(path) -> np.ndarray:
        from PIL import Image

        return np.asarray(Image.open(path).convert("L")) > 127


def _gaussian_weights(dist2: np.ndarray, n_pick: int) -> np.ndarray:
    """Weights ``exp(-d^2 / 2 sigma^2)`` with sigma bisected so they sum to ``n_pick``."""
    if n_pick >= dist2.size:
        return np.ones_like(dist2, dtype=np.float64)

    def total(log_sigma):
        return np.exp(-dist2 / (2.0 * math.exp(2.0 * log_sigma))).sum()

    lo, hi = math.log(1e-3), math.log(1e3 * (1.0 + math.sqrt(dist2.max())))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if total(mid) < n_pick:
            lo = mid
        else:
            hi = mid
    # the upper end keeps the weight sum >= n_pick, so enough entries are non-zero
    return np.exp(-dist2 / (2.0 * math.exp(2.0 * hi)))


def _pick_weighted(rng, candidates: np.ndarray, weights: np.ndarray, n: int) -> np.ndarray:
    if n == 0:
        return candidates[:0]
    return rng.choice(candidates, size=n, replace=False, p=weights / weights.sum())


def make_mask(family: str, height: int, width: int, acceleration: float,
              center_fraction: float, seed: int) -> SamplingMask:
    """Generate a deterministic under-sampling mask.

    Parameters
    ----------
    family : str
        One of ``cartesian-random``, ``cartesian-equispaced``, ``gaussian-1d``,
        ``gaussian-2d``.
    height, width : int
        k-space grid shape.
    acceleration : float
        Acceleration factor R; the mask keeps ``round(N / R)`` of ``N``
        columns (1D families) or pixels (``gaussian-2d``).
    center_fraction : float
        Fully sampled low-frequency region: that fraction of the columns for
        1D families, a centered square of area fraction ``center_fraction``
        of ``min(H, W)^2`` for ``gaussian-2d``.
    seed : int
        Seed for the random part of the pattern.

    Raises
    ------
    ValidationError
        For unknown families or infeasible parameter combinations.
    """
    if family not in FAMILIES:
        raise ValidationError(f"unknown mask family {family!r}; expected one of {FAMILIES}")
    if height < 1 or width < 1:
        raise ValidationError(f"mask shape must be positive, got {(height, width)}")
    if not acceleration >= 1:
        raise ValidationError(f"acceleration must be >= 1, got {acceleration}")
    if not 0.0 <= center_fraction <= 1.0:
        raise ValidationError(f"center_fraction must lie in [0, 1], got {center_fraction}")
    seed = int(seed)
    if seed < 0:
        raise ValidationError(f"seed must be non-negative, got {seed}")

    def build(bits):
        return SamplingMask(bits, family, float(acceleration), float(center_fraction), seed)

    if acceleration == 1:
        return build(np.ones((height, width), dtype=bool))

    rng = np.random.default_rng(seed)

    if family == "gaussian-2d":
        rows, cols = center_square(height, width, center_fraction)
        bits = np.zeros((height, width), dtype=bool)
        bits[rows, cols] = True
        n_total = _round_half_up(height * width / acceleration)
        n_center = int(bits.sum())
        if n_center > n_total:
            raise ValidationError(
                f"center region ({n_center} px) exceeds the {n_total} px allowed at R={acceleration}")
        candidates = np.flatnonzero(~bits.ravel())
        r, c = np.divmod(candidates, width)
        dist2 = (r - height // 2) ** 2 + (c - width // 2) ** 2.0
        weights = _gaussian_weights(dist2, n_total - n_center)
        picked = _pick_weighted(rng, candidates, weights, n_total - n_center)
        bits.ravel()[picked] = True
        return build(bits)

    if center_fraction * width < 1:
        raise ValidationError(
            f"center_fraction * width must be >= 1 for line masks, got {center_fraction * width:g}")
    line = np.zeros(width, dtype=bool)
    line[center_columns(width, center_fraction)] = True
    n_total = _round_half_up(width / acceleration)
    n_center = int(line.sum())
    if n_center > n_total:
        raise ValidationError(
            f"center region ({n_center} columns) exceeds the {n_total} columns allowed at R={acceleration}")
    candidates = np.flatnonzero(~line)
    n_extra = n_total - n_center

    if family == "cartesian-random":
        picked = rng.choice(candidates, size=n_extra, replace=False)
    elif family == "cartesian-equispaced":
        if n_extra:
            offset = rng.random()
            pos = np.floor((np.arange(n_extra) + offset) * candidates.size / n_extra).astype(int)
            picked = candidates[pos]
        else:
            picked = candidates[:0]
    else:  # gaussian-1d
        dist2 = (candidates - width // 2) ** 2.0
        picked = _pick_weighted(rng, candidates, _gaussian_weights(dist2, n_extra), n_extra)
    line[picked] = True
    return build(np.broadcast_to(line, (height, width)).copy())


@dataclass(frozen=True, eq=False)
class MaskSchedule:
    """Base mask ``M`` plus a seeded ordering of its complement.

    ``complement_order`` holds column indices for line masks and flat pixel
    indices for ``gaussian-2d``.  With ``independent=True`` every step draws
    its own ordering instead (no nesting guarantee).
    """

    base: SamplingMask
    total_steps: int
    seed: int
    complement_order: np.ndarray = field(repr=False)
    independent: bool = False

    @property
    def granularity(self) -> str:
        return self.base.granularity

    def complement_count(self, t: int) -> int:
        """Number of complement entries added back at step ``t``."""
        self._check_step(t)
        return self.complement_order.size * (self.total_steps - t) // self.total_steps

    def _check_step(self, t):
        if not (isinstance(t, (int, np.integer)) and 0 <= t <= self.total_steps):
            raise ValidationError(f"step t={t!r} outside 0..{self.total_steps}")

    def __call__(self, t: int) -> np.ndarray:
        return mask_at(self, t)


def make_schedule(mask: SamplingMask, total_steps: int, seed: int,
                  independent: bool = False) -> MaskSchedule:
    if not (isinstance(total_steps, (int, np.integer)) and total_steps >= 1):
        raise ValidationError(f"total_steps must be a positive integer, got {total_steps!r}")
    if mask.granularity == "column":
        complement = np.flatnonzero(~mask.bits[0])
    else:
        complement = np.flatnonzero(~mask.bits.ravel())
    order = np.random.default_rng(int(seed)).permutation(complement)
    order.setflags(write=False)
    return MaskSchedule(mask, int(total_steps), int(seed), order, independent)


def mask_at(schedule: MaskSchedule, t: int) -> np.ndarray:
    """Boolean ``M_t = M + M_t^c`` for step ``t`` (``M_0`` is all ones, ``M_T = M``)."""
    n = schedule.complement_count(t)
    order = schedule.complement_order
    if schedule.independent and 0 < t < schedule.total_steps:
        order = np.random.default_rng([schedule.seed, int(t)]).permutation(order)
    bits = schedule.base.bits.copy()
    if n:
        if schedule.granularity == "column":
            bits[:, order[:n]] = True
        else:
            bits.ravel()[order[:n]] = True
    return bits
