"""Synthetic room generator: the test oracle for the full pipeline.

Builds a closed box room with a few solid objects, all with exact
analytic ray intersections, a procedural albedo, a band-limited random
unit descriptor field defined over 3D space, and a keypoint score
function made of sharp Gaussian dots anchored to the surfaces.  Rendered
frames (color, depth, score map, feature map) are bit-deterministic per
seed and written in the standard dataset layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import write_dataset
from .geometry import CameraIntrinsics, Pose
from .localize import QueryObservation, thumbnail_descriptor


@dataclass
class SynthConfig:
    room_size: tuple = (3.2, 2.8, 2.2)     # interior extent, meters
    n_spheres: int = 3
    n_boxes: int = 2
    n_frames: int = 50
    n_queries: int = 20
    width: int = 128
    height: int = 96
    fx: float = 120.0
    fy: float = 120.0
    feature_dim: int = 64
    feature_downscale: int = 2              # feature map at image/this resolution
    feature_corr_length: float = 0.12       # meters; band limit of the field
    feature_basis: int = 48
    n_corners: int = 900                    # score-dot anchors on the surfaces
    dot_sigma: float = 0.006                # meters; score dot sharpness
    orbit_radius_frac: float = 0.30         # of min room half-extent
    object_keepout: float = 0.75            # meters; xy radius clear of objects
    query_jitter: float = 0.08              # meters of camera-center jitter
    keypoint_threshold: float = 0.1         # query keypoint detection level
    descriptor_noise: float = 0.0           # stddev added to query descriptors
    max_keypoints: int = 400


# ---------------------------------------------------------------------------
# geometry: exact ray casting in "z-units" so t equals camera-frame depth


class RoomScene:
    """Axis-centered room interior plus solid spheres and boxes.

    Objects are kept outside a central keep-out cylinder so orbiting
    cameras never fly into or graze them.
    """

    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        half = np.asarray(cfg.room_size, dtype=np.float64) / 2.0
        self.lo = -half
        self.hi = half
        keepout = cfg.object_keepout
        self.spheres = []   # (center, radius, base_color)
        self.boxes = []     # (lo, hi, base_color)
        for _ in range(cfg.n_spheres):
            r = rng.uniform(0.12, 0.25)
            c = self._outer_position(rng, keepout + r, margin=r + 0.05)
            self.spheres.append((c, r, rng.uniform(0.2, 0.9, size=3)))
        for _ in range(cfg.n_boxes):
            size = rng.uniform(0.2, 0.45, size=3)
            c = self._outer_position(rng, keepout + 0.3, margin=0.3)
            blo = np.clip(c - size / 2, self.lo + 0.02, self.hi - size - 0.02)
            self.boxes.append((blo, blo + size, rng.uniform(0.2, 0.9, size=3)))
        self.wall_colors = rng.uniform(0.35, 0.85, size=(6, 3))

    def _outer_position(self, rng: np.random.Generator, min_xy_radius: float,
                        margin: float) -> np.ndarray:
        """Random center in the annulus between the keep-out and the walls."""
        max_r = min(self.hi[0], self.hi[1]) - margin
        min_r = min(min_xy_radius, max_r - 1e-3)
        ang = rng.uniform(0, 2 * np.pi)
        rad = rng.uniform(min_r, max_r)
        z = rng.uniform(self.lo[2] + margin, self.hi[2] - margin)
        return np.array([rad * np.cos(ang), rad * np.sin(ang), z])

    # -- ray casting; directions need not be unit length -------------------
    def _room_exit(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        t = np.full(d.shape[0], np.inf)
        for ax in range(3):
            da = d[:, ax]
            with np.errstate(divide="ignore", invalid="ignore"):
                bound = np.where(da > 0, self.hi[ax], self.lo[ax])
                ta = (bound - o[ax]) / da
            ta = np.where(np.abs(da) < 1e-12, np.inf, ta)
            t = np.minimum(t, ta)
        return t

    def _sphere_hit(self, o, d, center, radius):
        oc = o - center
        A = np.sum(d * d, axis=1)
        B = 2.0 * d @ oc
        C = oc @ oc - radius * radius
        disc = B * B - 4 * A * C
        t = np.full(d.shape[0], np.inf)
        ok = disc >= 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-B - sq) / (2 * A)
        t1 = (-B + sq) / (2 * A)
        tt = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        t[ok] = tt[ok]
        return t

    def _box_hit(self, o, d, blo, bhi):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
        t1 = (blo - o) * inv
        t2 = (bhi - o) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tmax >= tmin) & (tmin > 1e-9)
        return np.where(hit, tmin, np.inf)

    def cast(self, origin: np.ndarray, dirs: np.ndarray):
        """First-hit parameter t and shape id per ray (0 = walls)."""
        t = self._room_exit(origin, dirs)
        shape = np.zeros(dirs.shape[0], dtype=int)
        sid = 1
        for center, radius, _ in self.spheres:
            ts = self._sphere_hit(origin, dirs, center, radius)
            closer = ts < t
            t = np.where(closer, ts, t)
            shape = np.where(closer, sid, shape)
            sid += 1
        for blo, bhi, _ in self.boxes:
            tb = self._box_hit(origin, dirs, blo, bhi)
            closer = tb < t
            t = np.where(closer, tb, t)
            shape = np.where(closer, sid, shape)
            sid += 1
        return t, shape

    def base_color(self, points: np.ndarray, shape: np.ndarray) -> np.ndarray:
        out = np.zeros((points.shape[0], 3))
        walls = shape == 0
        if walls.any():
            # pick the wall (face of the room box) each point lies on
            p = points[walls]
            d_lo = np.abs(p - self.lo)
            d_hi = np.abs(p - self.hi)
            face = np.argmin(np.concatenate([d_lo, d_hi], axis=1), axis=1)
            out[walls] = self.wall_colors[face]
        sid = 1
        for _, _, col in self.spheres:
            out[shape == sid] = col
            sid += 1
        for _, _, col in self.boxes:
            out[shape == sid] = col
            sid += 1
        return out

    def surface_point(self, rng: np.random.Generator) -> np.ndarray:
        """One random point on the room walls or object surfaces."""
        n_shapes = 1 + len(self.spheres) + len(self.boxes)
        pick = rng.integers(0, n_shapes)
        if pick == 0:
            face = rng.integers(0, 6)
            ax = face % 3
            p = rng.uniform(self.lo, self.hi)
            p[ax] = self.lo[ax] if face < 3 else self.hi[ax]
            return p
        pick -= 1
        if pick < len(self.spheres):
            center, radius, _ = self.spheres[pick]
            v = rng.normal(size=3)
            return center + radius * v / np.linalg.norm(v)
        blo, bhi = self.boxes[pick - len(self.spheres)][:2]
        face = rng.integers(0, 6)
        ax = face % 3
        p = rng.uniform(blo, bhi)
        p[ax] = blo[ax] if face < 3 else bhi[ax]
        return p


class RandomUnitField:
    """Band-limited random unit-vector field over 3D space.

    d(p) = normalize(B @ cos(W p + phi)); frequencies are Gaussian with
    stddev 1/corr_length, so nearby points get highly aligned vectors and
    points much farther than corr_length decorrelate.
    """

    def __init__(self, dim: int, corr_length: float, n_basis: int,
                 rng: np.random.Generator):
        self.freq = rng.normal(0.0, 1.0 / corr_length, size=(n_basis, 3))
        self.phase = rng.uniform(0.0, 2.0 * np.pi, size=n_basis)
        self.mix = rng.normal(0.0, 1.0, size=(dim, n_basis)) / np.sqrt(n_basis)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        basis = np.cos(pts @ self.freq.T + self.phase)
        raw = basis @ self.mix.T
        return raw / np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-12)


class CornerScore:
    """Keypoint score: max over sharp Gaussian dots anchored on surfaces."""

    def __init__(self, anchors: np.ndarray, sigma: float):
        self.anchors = anchors
        self.sigma = sigma

    def __call__(self, points: np.ndarray, chunk: int = 8192) -> np.ndarray:
        pts = np.atleast_2d(points)
        out = np.zeros(pts.shape[0])
        inv = 1.0 / (2.0 * self.sigma * self.sigma)
        for lo in range(0, pts.shape[0], chunk):
            d2 = np.sum((pts[lo:lo + chunk, None, :] - self.anchors[None, :, :]) ** 2,
                        axis=2)
            out[lo:lo + chunk] = np.exp(-d2.min(axis=1) * inv)
        return out


# ---------------------------------------------------------------------------
# cameras


def look_at_pose(center: np.ndarray, target: np.ndarray,
                 world_up=(0.0, 0.0, 1.0)) -> Pose:
    """World-from-camera pose with z forward, x right, y down."""
    zc = np.asarray(target, float) - np.asarray(center, float)
    zc = zc / np.linalg.norm(zc)
    up = np.asarray(world_up, float)
    xc = np.cross(zc, up)
    n = np.linalg.norm(xc)
    if n < 1e-6:
        xc = np.cross(zc, np.array([1.0, 0.0, 0.0]))
        n = np.linalg.norm(xc)
    xc /= n
    yc = np.cross(zc, xc)
    R = np.stack([xc, yc, zc], axis=1)
    from .geometry import rot_to_quat
    return Pose(q=rot_to_quat(R), t=np.asarray(center, float))


def orbit_trajectory(n: int, radius: float, rng: np.random.Generator,
                     jitter: float = 0.0, phase: float = 0.0) -> list[Pose]:
    """Cameras on a gently bobbing orbit, each looking across the room.

    The look-at target swings smoothly with the orbit angle so nearby
    angles produce similar views (what image retrieval relies on).
    """
    poses = []
    for i in range(n):
        ang = phase + 2.0 * np.pi * i / n
        z_off = 0.25 * np.sin(3.0 * ang + phase)
        center = np.array([radius * np.cos(ang), radius * np.sin(ang), z_off])
        if jitter > 0:
            center = center + rng.normal(0.0, jitter, size=3)
        target = np.array([0.3 * radius * np.cos(ang + np.pi),
                           0.3 * radius * np.sin(ang + np.pi),
                           0.15 * np.sin(2.0 * ang)])
        poses.append(look_at_pose(center, target))
    return poses


# ---------------------------------------------------------------------------
# rendering


class SyntheticScene:
    """Scene bundle: geometry, descriptor field, score function, cameras."""

    def __init__(self, cfg: SynthConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.geometry = RoomScene(cfg, rng)
        self.feature_field = RandomUnitField(cfg.feature_dim,
                                             cfg.feature_corr_length,
                                             cfg.feature_basis, rng)
        anchors = np.stack([self.geometry.surface_point(rng)
                            for _ in range(cfg.n_corners)])
        self.score_fn = CornerScore(anchors, cfg.dot_sigma)
        self.intrinsics = CameraIntrinsics(
            fx=cfg.fx, fy=cfg.fy, cx=cfg.width / 2.0, cy=cfg.height / 2.0,
            width=cfg.width, height=cfg.height)
        radius = cfg.orbit_radius_frac * float(np.min(self.geometry.hi))
        self.train_poses = orbit_trajectory(cfg.n_frames, radius, rng)
        self.query_poses = orbit_trajectory(cfg.n_queries, radius * 1.15, rng,
                                            jitter=cfg.query_jitter, phase=0.37)
        self._rng = rng

    def _pixel_dirs(self, pose: Pose, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
        """World-frame direction per pixel, scaled so t equals camera z."""
        K = self.intrinsics
        rays_cam = np.stack([(us - K.cx) / K.fx, (vs - K.cy) / K.fy,
                             np.ones_like(us)], axis=1)
        return rays_cam @ pose.rotation.T

    def render_frame(self, pose: Pose) -> dict:
        """Exact color, depth, score, and feature maps for one camera."""
        cfg = self.cfg
        K = self.intrinsics
        H, W = K.height, K.width
        vs, us = np.mgrid[0:H, 0:W].astype(np.float64)
        dirs = self._pixel_dirs(pose, us.ravel(), vs.ravel())
        t, shape = self.geometry.cast(pose.t, dirs)
        pts = pose.t + t[:, None] * dirs

        color = self.geometry.base_color(pts, shape)
        # procedural shading ties appearance to geometry without view
        # dependence; two scales keep thumbnails of different walls distinct
        tex = 0.72 + 0.18 * np.sin(9.0 * pts[:, 0]) * np.sin(7.0 * pts[:, 1] + 2.0 * pts[:, 2]) \
            + 0.10 * np.sin(2.1 * pts[:, 0] + 3.3 * pts[:, 1] + 1.7 * pts[:, 2])
        score = self.score_fn(pts)
        color = np.clip(color * tex[:, None] * (1.0 - 0.35 * score[:, None]), 0.0, 1.0)

        hf = H // cfg.feature_downscale
        wf = W // cfg.feature_downscale
        vf, uf = np.mgrid[0:hf, 0:wf].astype(np.float64)
        uf = (uf.ravel() + 0.5) * W / wf - 0.5
        vf = (vf.ravel() + 0.5) * H / hf - 0.5
        fdirs = self._pixel_dirs(pose, uf, vf)
        ft, _ = self.geometry.cast(pose.t, fdirs)
        fpts = pose.t + ft[:, None] * fdirs
        feat = self.feature_field(fpts).astype(np.float32)

        return {
            "color": color.reshape(H, W, 3),
            "depth": t.reshape(H, W),
            "score": score.reshape(H, W),
            "feat": feat.reshape(hf, wf, cfg.feature_dim),
            "pose": pose,
        }

    def query_observation(self, pose: Pose, frame_id: int = -1,
                          rng: np.random.Generator | None = None) -> QueryObservation:
        """Keypoints + descriptors as a 2D feature extractor would emit them."""
        frame = self.render_frame(pose)
        kps, scores = detect_keypoints(frame["score"], self.cfg.keypoint_threshold,
                                       self.cfg.max_keypoints)
        dirs = self._pixel_dirs(pose, kps[:, 0].astype(float), kps[:, 1].astype(float))
        t, _ = self.geometry.cast(pose.t, dirs)
        pts = pose.t + t[:, None] * dirs
        desc = self.feature_field(pts)
        if self.cfg.descriptor_noise > 0 and rng is not None:
            desc = desc + rng.normal(0.0, self.cfg.descriptor_noise, size=desc.shape)
            desc /= np.maximum(np.linalg.norm(desc, axis=1, keepdims=True), 1e-12)
        return QueryObservation(keypoints=kps.astype(np.float64), scores=scores,
                                descriptors=desc, intrinsics=self.intrinsics,
                                thumbnail=thumbnail_descriptor(frame["color"]),
                                frame_id=frame_id)


def detect_keypoints(score_map: np.ndarray, threshold: float,
                     max_count: int = 400):
    """3x3 local maxima of a score map above a threshold, strongest first."""
    from scipy.ndimage import maximum_filter
    local_max = (score_map == maximum_filter(score_map, size=3)) \
        & (score_map > threshold)
    vs, us = np.nonzero(local_max)
    strengths = score_map[vs, us]
    order = np.argsort(-strengths)[:max_count]
    kps = np.stack([us[order], vs[order]], axis=1)
    return kps, strengths[order]


def generate_synthetic(cfg: SynthConfig, out_dir: Path, seed: int = 0) -> SyntheticScene:
    """Write train/ and query/ dataset directories; deterministic per seed."""
    scene = SyntheticScene(cfg, seed=seed)
    out = Path(out_dir)
    train = [scene.render_frame(p) for p in scene.train_poses]
    write_dataset(out / "train", train, scene.intrinsics)
    queries = [scene.render_frame(p) for p in scene.query_poses]
    write_dataset(out / "query", queries, scene.intrinsics)
    return scene
