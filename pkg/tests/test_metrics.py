"""PSNR/SSIM tests, including the independent SSIM reference check."""

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from xmct import metrics
from xmct.errors import ConfigError, ShapeError


def noisy_pair(seed=0, n=64, sigma=0.01):
    rng = np.random.default_rng(seed)
    base = np.clip(rng.random((n, n)) * 0.8 + 0.1, 0, 1)
    other = np.clip(base + sigma * rng.standard_normal((n, n)), 0, 1)
    return base, other


class TestPSNR:
    def test_identical_images_hit_cap(self):
        x, _ = noisy_pair()
        assert metrics.psnr(x, x) == 99.0

    def test_constant_offset_closed_form(self):
        x = np.zeros((16, 16))
        assert metrics.psnr(x + 0.1, x) == pytest.approx(20.0, abs=1e-12)

    def test_symmetry(self):
        x, y = noisy_pair(1)
        assert metrics.psnr(x, y) == metrics.psnr(y, x)

    def test_strictly_decreasing_in_noise(self):
        rng = np.random.default_rng(2)
        base = np.clip(rng.random((64, 64)), 0, 1)
        noise = rng.standard_normal((64, 64))
        values = [metrics.psnr(base + s * noise, base)
                  for s in (0.005, 0.01, 0.02, 0.04, 0.08)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_shape_guard(self):
        with pytest.raises(ShapeError):
            metrics.psnr(np.zeros((4, 4)), np.zeros((5, 5)))

    def test_data_range_guard(self):
        with pytest.raises(ConfigError):
            metrics.psnr(np.zeros((4, 4)), np.zeros((4, 4)), data_range=0.0)


class TestSSIM:
    def test_identical_images(self):
        x, _ = noisy_pair(3)
        assert metrics.ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_high_variance_image(self):
        rng = np.random.default_rng(4)
        x = (rng.random((64, 64)) > 0.5).astype(float)
        assert metrics.ssim(x, 1.0 - x) < 0.2

    def test_small_noise_band(self):
        x, y = noisy_pair(5, sigma=0.01)
        assert 0.8 < metrics.ssim(x, y) < 1.0

    def test_matches_reference_implementation(self):
        # independent oracle: skimage with the standard Wang et al. settings
        for seed in range(3):
            x, y = noisy_pair(seed, sigma=0.05)
            ours = metrics.ssim(x, y, data_range=1.0, window=11)
            ref = structural_similarity(x, y, data_range=1.0,
                                        gaussian_weights=True, sigma=1.5,
                                        use_sample_covariance=False)
            assert ours == pytest.approx(ref, abs=1e-10)

    def test_symmetry(self):
        x, y = noisy_pair(6, sigma=0.05)
        assert metrics.ssim(x, y) == pytest.approx(metrics.ssim(y, x), abs=1e-12)

    def test_window_guards(self):
        x, y = noisy_pair(7)
        with pytest.raises(ConfigError):
            metrics.ssim(x, y, window=4)
        with pytest.raises(ConfigError):
            metrics.ssim(x, y, window=1)
        with pytest.raises(ShapeError):
            metrics.ssim(np.zeros((5, 5)), np.zeros((5, 5)), window=7)


class TestReport:
    def test_volume_report_and_csv(self):
        rng = np.random.default_rng(8)
        ref = np.clip(rng.random((3, 16, 16)), 0, 1)
        rec = np.clip(ref + 0.05 * rng.standard_normal(ref.shape), 0, 1)
        rep = metrics.volume_report(rec, ref, volume=0, views=16, steps=10,
                                    noise=0.05, mode="unimodal")
        assert len(rep.psnr_slices) == 3
        assert all(-1.0 <= s <= 1.0 for s in rep.ssim_slices)
        text = metrics.reports_to_csv([rep])
        lines = text.strip().split("\n")
        assert lines[0] == ",".join(metrics.METRIC_CSV_COLUMNS)
        assert len(lines) == 4
        assert lines[1].startswith("0,16,10,0.05,unimodal,0,")

    def test_mean_aggregation(self):
        rep = metrics.MetricReport(0, 8, 5, 0.0, "crossmodal",
                                   psnr_slices=[10.0, 20.0], ssim_slices=[0.5, 0.7])
        assert rep.mean_psnr == pytest.approx(15.0)
        assert rep.mean_ssim == pytest.approx(0.6)
