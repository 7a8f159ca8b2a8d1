import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refir.evalkit.metrics import PSNR_CAP, get_metric, psnr, register_metric, ssim


def naive_ssim(a, b, window=8, c1=1e-4, c2=9e-4):
    vals = []
    for ch in range(a.shape[0]):
        for i in range(a.shape[1] - window + 1):
            for j in range(a.shape[2] - window + 1):
                x = a[ch, i:i + window, j:j + window].ravel()
                y = b[ch, i:i + window, j:j + window].ravel()
                mx, my = x.mean(), y.mean()
                cov = ((x - mx) * (y - my)).mean()
                vals.append((2 * mx * my + c1) * (2 * cov + c2)
                            / ((mx ** 2 + my ** 2 + c1) * (x.var() + y.var() + c2)))
    return float(np.mean(vals))


class TestPSNR:
    def test_hand_case(self):
        assert psnr(np.zeros((3, 4, 4)), np.full((3, 4, 4), 0.5)) == pytest.approx(6.0206, abs=1e-4)

    def test_identical_is_capped(self, rng):
        x = rng.random((3, 8, 8))
        assert psnr(x, x) == PSNR_CAP

    def test_peak(self):
        assert psnr(np.zeros(4), np.full(4, 127.5), peak=255) == pytest.approx(6.0206, abs=1e-4)

    def test_errors(self):
        with pytest.raises(ValueError):
            psnr(np.zeros(3), np.zeros(4))
        with pytest.raises(ValueError):
            psnr(np.zeros(3), np.zeros(3), peak=0)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-3, 0.3), st.floats(1.01, 3.0), st.integers(0, 2**31 - 1))
    def test_monotone_in_noise(self, sigma, factor, seed):
        rng = np.random.default_rng(seed)
        x, n = rng.random((1, 8, 8)), rng.normal(size=(1, 8, 8))
        assert psnr(x, x + sigma * factor * n) < psnr(x, x + sigma * n)


class TestSSIM:
    def test_identity(self, rng):
        x = rng.random((3, 16, 16))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_constant_closed_form(self):
        a, b = 0.2, 0.7
        expected = (2 * a * b + 1e-4) / (a * a + b * b + 1e-4)
        assert ssim(np.full((8, 8), a), np.full((8, 8), b)) == pytest.approx(expected, rel=1e-12)

    def test_naive_oracle(self, rng):
        a, b = rng.random((2, 11, 10)), rng.random((2, 11, 10))
        assert ssim(a, b) == pytest.approx(naive_ssim(a, b), abs=1e-10)

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((4, 4)), np.zeros((4, 4)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((1, 9, 9)), rng.random((1, 9, 9))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
        assert -1 <= ssim(a, b) <= 1


def test_registry():
    register_metric("mae", lambda a, b: float(np.abs(a - b).mean()))
    assert get_metric("mae")(np.zeros(2), np.ones(2)) == 1.0
    assert get_metric("psnr") is psnr
    with pytest.raises(KeyError, match="unknown"):
        get_metric("lpips")
