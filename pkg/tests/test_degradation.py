import numpy as np
import pytest

from kcd.data import generate_phantoms, shepp_logan
from kcd.degradation import degradation_strip, degrade, save_strip_png, zero_filled
from kcd.fourier import ValidationError, forward_transform, inverse_transform
from kcd.masks import FAMILIES, make_mask, make_schedule
from kcd.metrics import psnr

from conftest import oracle_psnr, oracle_zero_filled, random_complex


@pytest.fixture
def phantom():
    return generate_phantoms(1, 64, seed=3)[0].image


def test_zero_filled_full_and_empty(rng):
    k = random_complex(rng, (8, 12))
    assert np.array_equal(zero_filled(k, np.ones((8, 12))), inverse_transform(k))
    assert np.all(zero_filled(k, np.zeros((8, 12))) == 0)
    with pytest.raises(ValidationError):
        zero_filled(k, np.ones((8, 8)))


def test_zero_filled_shepp_logan_matches_oracle_pipeline():
    x = shepp_logan(64).astype(complex)
    mask = make_mask("cartesian-random", 64, 64, 4, 0.08, 0)
    ours = psnr(np.abs(zero_filled(forward_transform(x), mask)), np.abs(x), np.abs(x).max())
    ref = np.abs(oracle_zero_filled(x, mask.bits))
    expected = oracle_psnr(ref, np.abs(x), np.abs(x).max())
    assert abs(ours - expected) < 1e-6
    assert 10 < ours < 40


@pytest.mark.parametrize("family", FAMILIES)
def test_endpoints(phantom, family):
    mask = make_mask(family, 64, 64, 4, 0.08, 1)
    s = make_schedule(mask, 16, 2)
    d0 = degrade(phantom, 0, s)
    assert np.max(np.abs(d0 - phantom)) / np.max(np.abs(phantom)) < 1e-10
    assert np.array_equal(degrade(phantom, 16, s), zero_filled(forward_transform(phantom), mask))


@pytest.mark.parametrize("family", FAMILIES)
def test_psnr_non_increasing_in_t(phantom, family):
    mask = make_mask(family, 64, 64, 4, 0.08, 1)
    T = 16
    s = make_schedule(mask, T, 5)
    ref = np.abs(phantom)
    values = [psnr(np.abs(degrade(phantom, t, s)), ref, ref.max()) for t in range(1, T + 1)]
    assert all(b <= a + 1e-9 for a, b in zip(values, values[1:]))


def test_out_of_range_step(phantom):
    s = make_schedule(make_mask("cartesian-random", 64, 64, 4, 0.08, 1), 4, 0)
    with pytest.raises(ValidationError):
        degrade(phantom, 5, s)


@pytest.mark.parametrize("family", FAMILIES)
def test_linearity_projection_zero(rng, family):
    mask = make_mask(family, 32, 32, 4, 0.08, 4)
    s = make_schedule(mask, 8, 1)
    x, y = random_complex(rng, (32, 32)), random_complex(rng, (32, 32))
    a, b = 1.5 - 0.5j, -2.0 + 0.25j
    for t in (0, 3, 8):
        lhs = degrade(a * x + b * y, t, s)
        rhs = a * degrade(x, t, s) + b * degrade(y, t, s)
        assert np.max(np.abs(lhs - rhs)) < 1e-10
        once = degrade(x, t, s)
        assert np.max(np.abs(degrade(once, t, s) - once)) < 1e-10
        assert np.max(np.abs(degrade(np.zeros((32, 32)), t, s))) < 1e-12


def test_strip(phantom, tmp_path):
    mask = make_mask("gaussian-2d", 64, 64, 4, 0.08, 1)
    s = make_schedule(mask, 20, 0)
    assert len(degradation_strip(phantom, s, [0])) == 1
    first, last = degradation_strip(phantom, s, [0, 20])
    assert np.max(np.abs(first - phantom)) < 1e-12
    assert np.array_equal(last, zero_filled(forward_transform(phantom), mask))
    steps = [0, 5, 10, 15, 20]
    strip = degradation_strip(phantom, s, steps)
    ref = np.abs(phantom)
    values = [psnr(np.abs(im), ref, ref.max()) for im in strip]
    assert values[0] > 250  # round-off only
    assert all(b < a for a, b in zip(values, values[1:]))
    save_strip_png(strip, tmp_path / "strip.png")
    from PIL import Image

    img = np.asarray(Image.open(tmp_path / "strip.png"))
    assert img.shape == (64, 64 * 5) and img.dtype == np.uint8
    assert img.max() == 255 and img.min() == 0
