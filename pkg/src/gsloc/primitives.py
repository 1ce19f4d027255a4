"""Gaussian primitive storage and covariance composition.

Primitives are kept in structure-of-arrays form (GaussianCloud) so the
rasterizer and optimizer can run vectorized; GaussianPrimitive is a
convenience view of one row.  Scale is stored in log-space and
opacity / landmark probability in logit-space, so plain gradient steps
can never push the activated values out of range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import quat_to_rot

SCALE_MIN = 1e-7   # meters, activated
SCALE_MAX = 10.0
LOG_SCALE_MIN = np.log(SCALE_MIN)
LOG_SCALE_MAX = np.log(SCALE_MAX)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def compose_covariance(s: np.ndarray, q: np.ndarray) -> np.ndarray:
    """3x3 covariance R @ diag(s) @ diag(s)^T @ R^T from activated scale and unit quaternion."""
    R = quat_to_rot(np.asarray(q, dtype=np.float64) / np.linalg.norm(q))
    A = R * np.asarray(s, dtype=np.float64)[None, :]
    return A @ A.T


def compose_covariances(s: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Batched covariance: activated scales (N, 3) + rotations (N, 3, 3) -> (N, 3, 3)."""
    A = R * s[:, None, :]
    return A @ np.swapaxes(A, 1, 2)


@dataclass
class GaussianPrimitive:
    """A single primitive; raw (pre-activation) parameterization."""
    mu: np.ndarray
    q: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    color: np.ndarray
    score_logit: float
    is_key: bool = False

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def landmark_probability(self) -> float:
        return float(sigmoid(self.score_logit))

    def covariance(self) -> np.ndarray:
        return compose_covariance(self.scale, self.q)


class GaussianCloud:
    """Structure-of-arrays container for N Gaussian primitives.

    Arrays (float64 unless noted):
      mu (N, 3), q (N, 4) unit, log_scale (N, 3), opacity_logit (N,),
      color (N, 3), score_logit (N,), is_key (N,) bool,
      spawn_score (N,) -- the 2D keypoint score at spawn time, 0 for non-keys.
    """

    PARAM_NAMES = ("mu", "q", "log_scale", "opacity_logit", "color", "score_logit")

    def __init__(self, capacity: int = 0):
        self.mu = np.zeros((capacity, 3))
        self.q = np.zeros((capacity, 4))
        self.q[:, 0] = 1.0
        self.log_scale = np.full((capacity, 3), np.log(0.01))
        self.opacity_logit = np.zeros(capacity)
        self.color = np.zeros((capacity, 3))
        self.score_logit = np.zeros(capacity)
        self.is_key = np.zeros(capacity, dtype=bool)
        self.spawn_score = np.zeros(capacity)
        self.revision = 0

    def __len__(self) -> int:
        return self.mu.shape[0]

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            mu=self.mu[i].copy(), q=self.q[i].copy(),
            log_scale=self.log_scale[i].copy(),
            opacity_logit=float(self.opacity_logit[i]),
            color=self.color[i].copy(),
            score_logit=float(self.score_logit[i]),
            is_key=bool(self.is_key[i]),
        )

    # activated views ------------------------------------------------------
    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    @property
    def landmark_probability(self) -> np.ndarray:
        return sigmoid(self.score_logit)

    def append(self, mu, q, log_scale, opacity_logit, color, score_logit,
               is_key, spawn_score) -> None:
        """Append a block of primitives (all arguments batched)."""
        self.mu = np.concatenate([self.mu, np.atleast_2d(mu)])
        self.q = np.concatenate([self.q, np.atleast_2d(q)])
        self.log_scale = np.concatenate([self.log_scale, np.atleast_2d(log_scale)])
        self.opacity_logit = np.concatenate([self.opacity_logit, np.atleast_1d(opacity_logit)])
        self.color = np.concatenate([self.color, np.atleast_2d(color)])
        self.score_logit = np.concatenate([self.score_logit, np.atleast_1d(score_logit)])
        self.is_key = np.concatenate([self.is_key, np.atleast_1d(is_key).astype(bool)])
        self.spawn_score = np.concatenate([self.spawn_score, np.atleast_1d(spawn_score)])
        self.revision += 1

    def keep(self, mask: np.ndarray) -> None:
        """Drop primitives where mask is False (used by opacity pruning)."""
        self.mu = self.mu[mask]
        self.q = self.q[mask]
        self.log_scale = self.log_scale[mask]
        self.opacity_logit = self.opacity_logit[mask]
        self.color = self.color[mask]
        self.score_logit = self.score_logit[mask]
        self.is_key = self.is_key[mask]
        self.spawn_score = self.spawn_score[mask]
        self.revision += 1

    def normalize_quats(self) -> None:
        self.q /= np.linalg.norm(self.q, axis=1, keepdims=True)

    def clamp_scales(self) -> None:
        np.clip(self.log_scale, LOG_SCALE_MIN, LOG_SCALE_MAX, out=self.log_scale)

    def copy(self) -> "GaussianCloud":
        out = GaussianCloud(0)
        for name in (*self.PARAM_NAMES, "is_key", "spawn_score"):
            setattr(out, name, getattr(self, name).copy())
        out.revision = self.revision
        return out


@dataclass
class SceneModel:
    """A reconstructed scene: primitives, optional descriptor field, bounds."""
    cloud: GaussianCloud = field(default_factory=GaussianCloud)
    descriptor_field: object | None = None  # DescriptorField, set after distillation
    bounds_min: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bounds_max: np.ndarray = field(default_factory=lambda: np.ones(3))
    config_hash: str = ""

    def check_bounds(self, margin: float = 1.0) -> bool:
        """All primitive centers inside bounds expanded by ``margin`` meters."""
        if len(self.cloud) == 0:
            return True
        lo = self.bounds_min - margin
        hi = self.bounds_max + margin
        return bool(np.all(self.cloud.mu >= lo) and np.all(self.cloud.mu <= hi))

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.bounds_max - self.bounds_min))
