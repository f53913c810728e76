"""Photon-counting and idealized additive noise."""

import numpy as np
import pytest

from splitct.core import ContractViolation, RngStream, SpectralSinogram
from splitct.noise import NoiseConfig, apply_noise


def _stream(label="noise", seed=0):
    return RngStream(seed, label)


def _half_sino(shape=(100, 100, 100)):
    return SpectralSinogram(np.full(shape, 0.5))


class TestNoiseConfig:
    def test_defaults(self):
        cfg = NoiseConfig(seed=_stream())
        assert cfg.kind == "poisson_electronic"
        assert cfg.i0 == 1e5
        assert cfg.sigma_e == 1e-3

    def test_rejects_unknown_kind(self):
        with pytest.raises(ContractViolation, match="unknown noise kind"):
            NoiseConfig(kind="salt_and_pepper", seed=_stream())

    def test_rejects_small_flux(self):
        with pytest.raises(ContractViolation, match="i0"):
            NoiseConfig(i0=0.5, seed=_stream())

    @pytest.mark.parametrize("kw", [dict(sigma_e=-1e-3), dict(sigma_g=-0.1)])
    def test_rejects_negative_std(self, kw):
        with pytest.raises(ContractViolation, match=">= 0"):
            NoiseConfig(seed=_stream(), **kw)

    def test_gaussian_requires_sigma(self):
        with pytest.raises(ContractViolation, match="sigma_g"):
            NoiseConfig(kind="gaussian", seed=_stream())


class TestApplyNoise:
    def test_none_is_identity(self):
        y = _half_sino((4, 5, 3))
        out = apply_noise(NoiseConfig(kind="none", seed=_stream()), y)
        assert out is y

    def test_gaussian_zero_sigma_is_identity(self):
        y = _half_sino((4, 5, 3))
        out = apply_noise(
            NoiseConfig(kind="gaussian", sigma_g=0.0, seed=_stream()), y
        )
        np.testing.assert_array_equal(out.data, y.data)

    def test_seed_determinism(self):
        y = _half_sino((8, 9, 5))
        cfg = NoiseConfig(seed=_stream(seed=3))
        a = apply_noise(cfg, y)
        b = apply_noise(cfg, y)
        np.testing.assert_array_equal(a.data, b.data)
        c = apply_noise(NoiseConfig(seed=_stream(seed=4)), y)
        assert not np.array_equal(a.data, c.data)

    def test_gaussian_moments(self):
        y = _half_sino()
        cfg = NoiseConfig(kind="gaussian", sigma_g=0.01, seed=_stream(seed=8))
        noise = apply_noise(cfg, y).data - 0.5
        n = noise.size
        assert abs(noise.mean()) <= 3.0 * 0.01 / np.sqrt(n)
        assert abs(noise.std() / 0.01 - 1.0) < 0.05

    def test_poisson_electronic_moments(self):
        y = _half_sino()
        cfg = NoiseConfig(i0=1e5, sigma_e=1e-3, seed=_stream(seed=7))
        out = apply_noise(cfg, y).data
        n = out.size
        expected_var = 0.5 / 1e5 + 1e-3 ** 2
        se_mean = np.sqrt(expected_var / n)
        assert abs(out.mean() - 0.5) <= 3.0 * se_mean
        assert abs(out.var() / expected_var - 1.0) < 0.05

    def test_entrywise_independence(self):
        y = _half_sino()
        cfg = NoiseConfig(i0=1e5, sigma_e=1e-3, seed=_stream(seed=7))
        noise = apply_noise(cfg, y).data - 0.5
        for axis in range(3):
            a = np.moveaxis(noise, axis, 0)
            lag1 = np.corrcoef(a[:-1].ravel(), a[1:].ravel())[0, 1]
            assert abs(lag1) < 0.01

    def test_poisson_rejects_negative_intensity(self):
        y = SpectralSinogram(np.full((2, 2, 1), -0.1))
        with pytest.raises(ContractViolation, match="nonnegative"):
            apply_noise(NoiseConfig(seed=_stream()), y)

    def test_poisson_quantized_without_electronic_noise(self):
        y = _half_sino((10, 10, 2))
        cfg = NoiseConfig(i0=100.0, sigma_e=0.0, seed=_stream(seed=9))
        out = apply_noise(cfg, y).data
        counts = out * 100.0
        np.testing.assert_allclose(counts, np.round(counts), atol=1e-9)
