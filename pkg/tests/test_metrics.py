import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uwdiff.data import ImagePair
from uwdiff.metrics import (LabelRange, PSNR_CAP, degradation_label, psnr, quality_report, ssim,
                            uciqe, uciqe_terms, uicm, uiqm)
from oracles import ref_psnr, ref_ssim, ref_uciqe, ref_uiqm


def test_psnr_identical_is_cap(rng):
    a = rng.random((16, 16, 3))
    assert psnr(a, a) == PSNR_CAP


def test_psnr_uniform_offset_hand_value():
    # a uniform offset of 16 grey levels: 20 log10(255/16)
    expected = 24.048404
    a = np.full((8, 8, 3), 0.5)
    assert psnr(a + 16 / 255, a) == pytest.approx(expected, abs=1e-5)


def test_psnr_gaussian_noise_monte_carlo(rng):
    ref = rng.uniform(0.3, 0.7, (100, 100))
    noisy = np.clip(ref + rng.normal(0, 0.1, ref.shape), 0, 1)
    # oracle: mse of N(0, 0.1^2) is 0.01 -> 20 dB; clipping is rare for refs in [0.3, 0.7]
    assert psnr(noisy, ref) == pytest.approx(20.0, abs=0.5)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_ssim_identity_and_constant(textured_image):
    assert ssim(textured_image, textured_image) == 1.0
    gray = np.full((20, 20, 3), 0.37)
    assert ssim(gray, gray) == 1.0


def test_ssim_inverted_texture_is_low(textured_image):
    value = ssim(1 - textured_image, textured_image)
    assert value < 0.2
    assert value == pytest.approx(ref_ssim(1 - textured_image, textured_image), abs=1e-4)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


@pytest.mark.parametrize("seed", range(5))
def test_full_reference_parity(seed):
    r = np.random.default_rng(seed)
    ref = r.random((32, 40, 3))
    pred = np.clip(ref + r.normal(0, 0.05 * (seed + 1), ref.shape), 0, 1)
    assert psnr(pred, ref) == pytest.approx(ref_psnr(pred, ref), abs=1e-6)
    assert ssim(pred, ref) == pytest.approx(ref_ssim(pred, ref), abs=1e-4)
    assert ssim(pred[..., 0], ref[..., 0]) == pytest.approx(ref_ssim(pred[..., 0], ref[..., 0]), abs=1e-4)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (12, 12, 3), elements=st.floats(0, 1)),
       arrays(np.float64, (12, 12, 3), elements=st.floats(0, 1)))
def test_symmetry(a, b):
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(arrays(np.float64, (12, 12, 3), elements=st.floats(0, 1)))
def test_ssim_self_is_one(a):
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_uicm_gray_is_zero():
    assert uicm(np.full((20, 20, 3), 0.4)) == 0.0


def test_uciqe_constant_image_terms():
    sigma_c, con_l, _ = uciqe_terms(np.full((20, 20, 3), [0.2, 0.5, 0.6]))
    assert sigma_c == pytest.approx(0.0, abs=1e-12)
    assert con_l == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_no_reference_cross_implementation(seed):
    r = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:30, 0:30] / 29
    img = np.clip(np.stack([0.2 + 0.3 * xx, 0.4 + 0.2 * np.sin(6 * yy), 0.6 - 0.2 * xx * yy], -1)
                  + r.normal(0, 0.03, (30, 30, 3)), 0, 1)
    assert uiqm(img) == pytest.approx(ref_uiqm(img), abs=1e-4)
    assert uciqe(img) == pytest.approx(ref_uciqe(img), abs=1e-4)


def test_storage_order_invariance(textured_image):
    f = np.asfortranarray(textured_image)
    assert uiqm(f) == uiqm(textured_image)
    assert uciqe(f) == uciqe(textured_image)


def test_uiqm_non_rgb():
    with pytest.raises(ValueError):
        uiqm(np.zeros((20, 20)))


def test_quality_report_no_reference(textured_image):
    rep = quality_report(textured_image)
    assert rep.psnr is None and rep.ssim is None
    assert np.isfinite(rep.uiqm) and np.isfinite(rep.uciqe)


def _pair_with_psnr(target_db: float) -> ImagePair:
    ref = np.full((8, 8, 3), 0.2, np.float32)
    delta = 10 ** (-target_db / 20)
    return ImagePair(raw=ref + delta, reference=ref, id="x")


def test_label_boundaries():
    lr = LabelRange(10.0, 30.0)
    assert degradation_label(_pair_with_psnr(30.0), lr) == pytest.approx(0.0, abs=1e-5)
    assert degradation_label(_pair_with_psnr(10.0), lr) == pytest.approx(1.0, abs=1e-5)
    assert degradation_label(_pair_with_psnr(20.0), lr) == pytest.approx(0.5, abs=1e-5)
    assert degradation_label(_pair_with_psnr(5.0), lr) == 1.0
    assert degradation_label(_pair_with_psnr(45.0), lr) == 0.0


@given(st.floats(0, 120), st.floats(0, 120))
def test_label_monotone(a, b):
    lr = LabelRange(12.0, 35.0)
    lo, hi = sorted((a, b))
    assert lr.score(lo) >= lr.score(hi)
    assert 0.0 <= lr.score(a) <= 1.0


def test_label_range_invalid():
    with pytest.raises(ValueError):
        LabelRange(20.0, 20.0)
    assert LabelRange.fit([14.0, 22.0, 18.0]) == LabelRange(14.0, 22.0)
