"""Rendering and localization quality metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve

from .errors import ShapeMismatch

PSNR_CAP_DB = 100.0


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-r * r / (2.0 * sigma * sigma))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def compute_psnr(rendered: np.ndarray, reference: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1]; identical images report the cap."""
    if rendered.shape != reference.shape:
        raise ShapeMismatch(f"{rendered.shape} vs {reference.shape}")
    mse = float(np.mean((np.asarray(rendered, float) - np.asarray(reference, float)) ** 2))
    if mse <= 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def compute_ssim(rendered: np.ndarray, reference: np.ndarray,
                 window: int = 11, sigma: float = 1.5,
                 k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with an 11x11 Gaussian window, channel-averaged, L = 1."""
    if rendered.shape != reference.shape:
        raise ShapeMismatch(f"{rendered.shape} vs {reference.shape}")
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    kern = _gaussian_kernel(window, sigma)
    c1 = k1 * k1
    c2 = k2 * k2
    vals = []
    pad = window // 2
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx = convolve(x, kern, mode="reflect")
        my = convolve(y, kern, mode="reflect")
        mxx = convolve(x * x, kern, mode="reflect")
        myy = convolve(y * y, kern, mode="reflect")
        mxy = convolve(x * y, kern, mode="reflect")
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        ssim_map = ((2 * mx * my + c1) * (2 * cov + c2)) \
            / ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(ssim_map[pad:-pad, pad:-pad].mean())
    return float(np.mean(vals))


def compute_psnr_ssim(rendered: np.ndarray, reference: np.ndarray):
    return compute_psnr(rendered, reference), compute_ssim(rendered, reference)


@dataclass
class FrameResult:
    frame_id: int
    converged: bool
    dt_cm: float = float("nan")
    dr_deg: float = float("nan")
    n_matches: int = 0
    n_inliers: int = 0
    mean_reprojection: float = float("nan")


@dataclass
class EvalReport:
    """Aggregate localization/rendering report.

    Medians cover localized frames only; failures are reported as a rate.
    """
    frames: list = field(default_factory=list)
    median_dt_cm: float = float("nan")
    median_dr_deg: float = float("nan")
    failure_rate: float = 0.0
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    model_bytes: int = 0
    timings: dict = field(default_factory=dict)

    @classmethod
    def from_frames(cls, frames: list) -> "EvalReport":
        rep = cls(frames=list(frames))
        ok = [f for f in frames if f.converged and np.isfinite(f.dt_cm)]
        if ok:
            rep.median_dt_cm = float(np.median([f.dt_cm for f in ok]))
            rep.median_dr_deg = float(np.median([f.dr_deg for f in ok]))
        if frames:
            rep.failure_rate = 1.0 - sum(f.converged for f in frames) / len(frames)
        return rep

    def summary(self) -> dict:
        out = {
            "frames": len(self.frames),
            "median_dt_cm": self.median_dt_cm,
            "median_dr_deg": self.median_dr_deg,
            "failure_rate": self.failure_rate,
            "model_bytes": self.model_bytes,
        }
        if self.psnr:
            out["mean_psnr_db"] = float(np.mean(self.psnr))
            out["mean_ssim"] = float(np.mean(self.ssim))
        out.update(self.timings)
        return out
