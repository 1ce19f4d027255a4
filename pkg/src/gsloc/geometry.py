"""SE(3) poses, pinhole cameras, and projection math.

Conventions, used everywhere in the package:
  * quaternions are (w, x, y, z), unit norm;
  * Pose is world-from-camera: p_world = R @ p_cam + t, so ``t`` is the
    camera center expressed in world coordinates;
  * pixel coordinates are (u, v) with u along image width;
  * depth is the camera-frame z coordinate in meters (not ray length).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, InvalidDepth

_QUAT_NORM_TOL = 1e-9


# ---------------------------------------------------------------------------
# quaternions


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("cannot normalize a zero quaternion")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to 3x3 rotation matrix."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_rots(q: np.ndarray) -> np.ndarray:
    """Batched quaternion-to-rotation: (N, 4) -> (N, 3, 3).

    Quaternions are normalized internally so slightly drifted inputs
    still produce orthonormal matrices.
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix to unit quaternion (w, x, y, z), w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 0.5 / np.sqrt(tr + 1.0)
        q = np.array([0.25 / s,
                      (R[2, 1] - R[1, 2]) * s,
                      (R[0, 2] - R[2, 0]) * s,
                      (R[1, 0] - R[0, 1]) * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q = quat_normalize(q)
    if q[0] < 0:
        q = -q
    return q


def quat_from_axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle_rad
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def random_unit_quat(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return quat_normalize(q)


# ---------------------------------------------------------------------------
# pose and camera types


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform.

    ``q`` rotates camera-frame vectors into the world frame; ``t`` is the
    camera center in world coordinates.
    """

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-6:
            q = q / n
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @property
    def rotation(self) -> np.ndarray:
        """3x3 world-from-camera rotation."""
        return quat_to_rot(self.q)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous world-from-camera matrix."""
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.t
        return T

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(q=rot_to_quat(T[:3, :3]), t=T[:3, 3].copy())

    def inverse(self) -> "Pose":
        qi = quat_conjugate(self.q)
        Ri = self.rotation.T
        return Pose(q=qi, t=-Ri @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """self @ other as homogeneous transforms."""
        q = quat_normalize(quat_multiply(self.q, other.q))
        t = self.rotation @ other.t + self.t
        return Pose(q=q, t=t)

    def transform(self, p_cam: np.ndarray) -> np.ndarray:
        """Camera-frame point(s) to world frame. Accepts (3,) or (N, 3)."""
        p = np.asarray(p_cam, dtype=np.float64)
        return p @ self.rotation.T + self.t

    def world_to_camera(self, p_world: np.ndarray) -> np.ndarray:
        p = np.asarray(p_world, dtype=np.float64)
        return (p - self.t) @ self.rotation


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------------------
# projection


def project_point(p_world: np.ndarray, pose: Pose, K: CameraIntrinsics):
    """Pinhole projection. Returns ((u, v), depth); raises BehindCamera."""
    p = pose.world_to_camera(np.asarray(p_world, dtype=np.float64))
    z = p[2]
    if z <= 1e-6:
        raise BehindCamera(f"camera-frame z = {z:.3g}")
    u = K.fx * p[0] / z + K.cx
    v = K.fy * p[1] / z + K.cy
    return np.array([u, v]), float(z)


def project_points(p_world: np.ndarray, pose: Pose, K: CameraIntrinsics):
    """Batched projection without the frustum check.

    Returns (uv (N, 2), depth (N,)); callers mask on depth themselves.
    """
    p = pose.world_to_camera(np.asarray(p_world, dtype=np.float64))
    z = p[:, 2]
    safe = np.where(np.abs(z) > 1e-12, z, 1e-12)
    uv = np.stack([K.fx * p[:, 0] / safe + K.cx,
                   K.fy * p[:, 1] / safe + K.cy], axis=1)
    return uv, z


def unproject_pixel(uv: np.ndarray, depth: float, pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    """Back-project pixel (u, v) at the given depth into world coordinates."""
    if not np.isfinite(depth) or depth <= 0:
        raise InvalidDepth(f"depth = {depth!r}")
    u, v = np.asarray(uv, dtype=np.float64)
    p_cam = np.array([(u - K.cx) / K.fx * depth,
                      (v - K.cy) / K.fy * depth,
                      depth])
    return pose.transform(p_cam)


def unproject_pixels(uv: np.ndarray, depth: np.ndarray, pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    """Batched back-projection: (N, 2) pixels + (N,) depths -> (N, 3) world points."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    p_cam = np.stack([(uv[:, 0] - K.cx) / K.fx * depth,
                      (uv[:, 1] - K.cy) / K.fy * depth,
                      depth], axis=1)
    return pose.transform(p_cam)


def pose_errors(estimate: Pose, truth: Pose):
    """Translation error in cm and rotation error in degrees."""
    dt_cm = 100.0 * float(np.linalg.norm(estimate.t - truth.t))
    Rrel = estimate.rotation.T @ truth.rotation
    arg = np.clip((np.trace(Rrel) - 1.0) / 2.0, -1.0, 1.0)
    dr_deg = float(np.degrees(np.arccos(arg)))
    return dt_cm, dr_deg
