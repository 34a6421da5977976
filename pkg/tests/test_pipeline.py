import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retinexnet import numerics as nx
from retinexnet.data import to_batch, from_batch
from retinexnet.denoise import DenoiseConfig
from retinexnet.model import DecomNetConfig, EnhanceNetConfig, WeightStore, decom_forward, init_weights
from retinexnet.pipeline import decompose_image, enhance_image, psnr, ssim


@pytest.fixture(scope="module")
def w():
    return init_weights(DecomNetConfig(width=4), EnhanceNetConfig(width=4), seed=2)


def _img(h, wd, seed=0):
    return np.random.default_rng(seed).uniform(size=(h, wd, 3))


class TestEnhanceImage:
    @pytest.mark.parametrize("h,wd", [(16, 16), (13, 21), (9, 8)])
    def test_output_size_and_range(self, w, h, wd):
        e = enhance_image(_img(h, wd), w)
        assert e.S_hat.shape == (h, wd, 3)
        assert e.R.shape == (h, wd, 3) and e.I.shape == (h, wd) and e.I_hat.shape == (h, wd)
        assert np.all((e.S_hat >= 0) & (e.S_hat <= 1))

    def test_bypass_is_decom_reconstruction(self, w):
        img = _img(12, 12, 1)
        e = enhance_image(img, w, bypass_adjustment=True)
        with nx.no_grad():
            out = decom_forward(w, to_batch(img))
        recon = from_batch(out.R.data)[0] * np.asarray(out.I.data[0, 0], dtype=np.float64)[..., None]
        np.testing.assert_array_equal(e.S_hat, np.clip(recon, 0, 1))
        np.testing.assert_array_equal(e.I_hat, e.I)

    def test_denoise_applied_to_reflectance(self, w):
        img = _img(16, 16, 2)
        plain = enhance_image(img, w)
        den = enhance_image(img, w, DenoiseConfig(base_strength=0.2))
        np.testing.assert_array_equal(den.I_hat, plain.I_hat)
        assert not np.array_equal(den.R, plain.R)
        np.testing.assert_allclose(den.S_hat, np.clip(den.R * den.I_hat[..., None], 0, 1))

    def test_missing_weights(self, w):
        with pytest.raises(ValueError):
            enhance_image(_img(8, 8), WeightStore())
        with pytest.raises(ValueError):
            enhance_image(_img(8, 8), WeightStore(w.subset("decom.")))

    def test_decompose_image(self, w):
        R, I = decompose_image(_img(10, 11), w)
        assert R.shape == (10, 11, 3) and I.shape == (10, 11)


class TestPsnr:
    def test_identical_is_inf(self):
        a = _img(4, 4)
        assert psnr(a, a) == math.inf

    def test_uniform_offset(self):
        a = np.full((4, 4, 3), 0.3)
        assert psnr(a, a + 0.1) == pytest.approx(20.0)

    @given(st.integers(0, 10_000))
    def test_loop_oracle(self, seed):
        a, b = _img(5, 6, seed), _img(5, 6, seed + 1)
        total = 0.0
        for v, u in zip(a.ravel(), b.ravel()):
            total += (v - u) ** 2
        assert psnr(a, b) == pytest.approx(10 * math.log10(a.size / total), rel=1e-12)

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            psnr(_img(4, 4), _img(4, 5))


class TestSsim:
    def test_identical_is_one(self):
        a = _img(16, 16)
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_constant_images_closed_form(self):
        # constant images have zero variance, leaving only the luminance term
        x, y = 0.2, 0.6
        expected = (2 * x * y + 0.01 ** 2) / (x * x + y * y + 0.01 ** 2)
        assert ssim(np.full((12, 12, 3), x), np.full((12, 12, 3), y)) == pytest.approx(expected, rel=1e-9)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_symmetric_and_bounded(self, seed):
        a, b = _img(14, 15, seed), _img(14, 15, seed + 7)
        s = ssim(a, b)
        assert s == pytest.approx(ssim(b, a), abs=1e-12)
        assert -1 <= s <= 1

    def test_noise_lowers_ssim(self):
        a = _img(24, 24)
        noisy = np.clip(a + np.random.default_rng(1).normal(0, 0.2, a.shape), 0, 1)
        assert ssim(a, noisy) < ssim(a, np.clip(a + 0.01, 0, 1))

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim(_img(10, 20), _img(10, 20))
