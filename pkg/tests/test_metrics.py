import numpy as np
import pytest

from gsloc.errors import ShapeMismatch
from gsloc.metrics import (EvalReport, FrameResult, compute_psnr,
                           compute_psnr_ssim, compute_ssim)


class TestPSNR:
    def test_identical_images_capped(self):
        img = np.random.default_rng(0).uniform(0, 1, size=(32, 32, 3))
        psnr, ssim = compute_psnr_ssim(img, img.copy())
        assert psnr == 100.0
        assert ssim == pytest.approx(1.0, abs=1e-9)

    def test_uniform_offset_analytic(self):
        a = np.zeros((64, 64, 3))
        b = np.full((64, 64, 3), 0.1)
        assert compute_psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            compute_psnr(np.zeros((4, 4)), np.zeros((5, 5)))


class TestSSIM:
    def test_shift_decreases_similarity(self):
        rng = np.random.default_rng(1)
        base = rng.uniform(0, 1, size=(48, 48))
        # correlated texture so the shift is meaningful
        from scipy.ndimage import gaussian_filter
        img = gaussian_filter(base, 2.0)
        shifted = np.roll(img, 7, axis=1)
        assert compute_ssim(img, shifted) < compute_ssim(img, img.copy())

    def test_bounded(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0, 1, size=(40, 40, 3))
        b = rng.uniform(0, 1, size=(40, 40, 3))
        s = compute_ssim(a, b)
        assert -1.0 <= s <= 1.0


class TestEvalReport:
    def test_medians_exclude_failures(self):
        frames = [FrameResult(0, True, dt_cm=1.0, dr_deg=0.2),
                  FrameResult(1, True, dt_cm=3.0, dr_deg=0.4),
                  FrameResult(2, False)]
        rep = EvalReport.from_frames(frames)
        assert rep.median_dt_cm == pytest.approx(2.0)
        assert rep.median_dr_deg == pytest.approx(0.3)
        assert rep.failure_rate == pytest.approx(1.0 / 3.0)

    def test_median_matches_independent_computation(self):
        rng = np.random.default_rng(3)
        dts = rng.uniform(0, 5, size=9)
        frames = [FrameResult(i, True, dt_cm=d, dr_deg=d / 10) for i, d in enumerate(dts)]
        rep = EvalReport.from_frames(frames)
        assert rep.median_dt_cm == pytest.approx(sorted(dts)[4])
