"""Shared fixtures and independent reference implementations.

The reference renderer below is deliberately written from scratch
(per-pixel loops, scipy for quaternion-to-matrix) so the fast tiled
implementation is checked against an independent derivation of the same
blending contract.
"""

from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from gsloc import CameraIntrinsics, PipelineConfig, Pose
from gsloc.primitives import GaussianCloud


@pytest.fixture
def small_camera():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=32.0, cy=24.0,
                            width=64, height=48)


@pytest.fixture
def default_cfg():
    return PipelineConfig()


def random_cloud(n: int, rng: np.random.Generator,
                 z_range=(1.0, 3.0), spread=0.4,
                 scale_range=(0.05, 0.2), opacity_range=(0.0, 3.0)) -> GaussianCloud:
    cloud = GaussianCloud(0)
    mu = np.stack([rng.uniform(-spread, spread, size=n),
                   rng.uniform(-spread * 0.75, spread * 0.75, size=n),
                   rng.uniform(*z_range, size=n)], axis=1)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    cloud.append(mu=mu, q=q,
                 log_scale=np.log(rng.uniform(*scale_range, size=(n, 3))),
                 opacity_logit=rng.uniform(*opacity_range, size=n),
                 color=rng.uniform(0.1, 0.9, size=(n, 3)),
                 score_logit=rng.normal(0, 1, size=n),
                 is_key=np.zeros(n, dtype=bool),
                 spawn_score=np.zeros(n))
    return cloud


def quat_to_matrix_scipy(q_wxyz: np.ndarray) -> np.ndarray:
    """Independent quaternion conversion (scipy uses xyzw ordering)."""
    w, x, y, z = q_wxyz
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def reference_render(cloud: GaussianCloud, pose: Pose, K: CameraIntrinsics,
                     cfg: PipelineConfig):
    """Slow per-pixel renderer implementing the documented blend contract:

    alpha = min(clamp, opacity * exp(-0.5 * d^T inv(Sigma2d) d)) inside the
    cutoff ellipse, front-to-back compositing with early termination once
    transmittance drops below the floor.
    """
    H, W = K.height, K.width
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    score = np.zeros((H, W))
    alpha_map = np.zeros((H, W))

    R_wc = quat_to_matrix_scipy(pose.q / np.linalg.norm(pose.q))
    Wmat = R_wc.T

    splats = []
    for i in range(len(cloud)):
        t_cam = Wmat @ (cloud.mu[i] - pose.t)
        x, y, z = t_cam
        if z <= max(cfg.near_plane, cfg.cull_near):
            continue
        Rp = quat_to_matrix_scipy(cloud.q[i] / np.linalg.norm(cloud.q[i]))
        S = np.diag(np.exp(cloud.log_scale[i]))
        cov = Rp @ S @ S.T @ Rp.T
        J = np.array([[K.fx / z, 0, -K.fx * x / z**2],
                      [0, K.fy / z, -K.fy * y / z**2]])
        cov2d = J @ Wmat @ cov @ Wmat.T @ J.T + cfg.cov2d_lowpass * np.eye(2)
        mu2d = np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])
        opac = 1.0 / (1.0 + np.exp(-cloud.opacity_logit[i]))
        sc = 1.0 / (1.0 + np.exp(-cloud.score_logit[i]))
        splats.append((z, mu2d, np.linalg.inv(cov2d), opac, cloud.color[i], sc))
    splats.sort(key=lambda s: s[0])

    cut2 = cfg.cutoff_sigma**2
    for v in range(H):
        for u in range(W):
            T = 1.0
            for (z, mu2d, M, opac, col, sc) in splats:
                if T < cfg.transmittance_min:
                    break
                d = np.array([u, v], dtype=float) - mu2d
                md = d @ M @ d
                if md > cut2:
                    continue
                a = min(cfg.alpha_clamp, opac * np.exp(-0.5 * md))
                w = a * T
                color[v, u] += w * col
                depth[v, u] += w * z
                score[v, u] += w * sc
                alpha_map[v, u] += w
                T *= 1.0 - a
    return color, depth, score, alpha_map
