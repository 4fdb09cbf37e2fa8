import numpy as np
import pytest

from signrecon.errors import ConfigError, InvalidInputError
from signrecon.metrics import PSNR_CAP_DB, psnr, ssim


class TestPSNR:
    def test_identical_images_capped(self, rng):
        a = rng.random((32, 32))
        assert psnr(a, a) == PSNR_CAP_DB

    def test_uniform_error_point_one_is_20db(self, rng):
        a = rng.random((32, 32)) * 0.8 + 0.1
        assert abs(psnr(a, a + 0.1) - 20.0) < 0.01

    def test_uniform_error_point_five(self, rng):
        a = rng.random((32, 32)) * 0.4
        assert abs(psnr(a, a + 0.5) - 6.0206) < 0.01

    def test_monotone_in_error_magnitude(self, rng):
        a = rng.random((32, 32)) * 0.5
        values = [psnr(a, a + e) for e in (0.05, 0.1, 0.2, 0.4)]
        assert all(v1 > v2 for v1, v2 in zip(values, values[1:]))

    def test_symmetric_in_error(self, rng):
        a = rng.random((32, 32)) * 0.5 + 0.25
        e = 0.1
        assert abs(psnr(a, a + e) - psnr(a, a - e)) < 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            psnr(np.zeros((4, 4)), np.zeros((5, 5)))

    def test_data_range_scaling(self, rng):
        a = rng.random((16, 16))
        assert abs(psnr(a * 2, a * 2 + 0.1, data_range=2.0) - psnr(a, a + 0.05)) < 1e-9


def structured_image(rng, n=64):
    img = np.tile(np.linspace(0.1, 0.9, n), (n, 1))
    img[16:48, 16:48] += 0.3
    img[24:40, 24:40] -= 0.5
    return np.clip(img + 0.02 * rng.standard_normal((n, n)), 0, 1)


class TestSSIM:
    def test_identical_is_exactly_one(self, rng):
        a = structured_image(rng)
        assert ssim(a, a) == 1.0

    def test_negation_about_mean_is_low(self, rng):
        a = structured_image(rng)
        negated = np.clip(2 * a.mean() - a, 0, 1)
        assert ssim(a, negated) < 0.1

    def test_tiny_noise_stays_high(self, rng):
        a = structured_image(rng)
        b = a + 1e-4 * rng.standard_normal(a.shape)
        assert ssim(a, b) > 0.999

    def test_small_image_rejected(self):
        with pytest.raises(ConfigError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            ssim(np.zeros((16, 16)), np.zeros((16, 17)))

    def test_value_range(self, rng):
        a = structured_image(rng)
        b = rng.random(a.shape)
        value = ssim(a, b)
        assert -1.0 <= value <= 1.0
