"""Saliency scoring of key primitives and greedy landmark selection.

A primitive's saliency combines its learned landmark probability, the
widest angle between the cameras that observed it, and a multi-view
distance-consistency term; selection greedily takes the highest-saliency
candidate outside an exclusion radius around everything selected so far,
halving the radius whenever no candidate remains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .errors import EmptyInput, NoObservations
from .geometry import project_points, unproject_pixels
from .primitives import SceneModel, sigmoid
from .render import render

_EPS = 1e-9


@dataclass
class SaliencyRecord:
    primitive_index: int
    sig: float      # landmark probability, (0, 1)
    gen: float      # widest viewing-direction angle, radians
    geo: float      # distance-consistency score, [0, 4]
    total: float    # 2*sig + min(2, gen) + geo


class ObservationSet:
    """Per-primitive observing camera centers and surface-distance errors."""

    def __init__(self):
        self._centers: dict[int, list] = {}
        self._dists: dict[int, list] = {}

    def add(self, prim_index: int, cam_center: np.ndarray, dist: float) -> None:
        self._centers.setdefault(prim_index, []).append(np.asarray(cam_center, float))
        self._dists.setdefault(prim_index, []).append(float(dist))

    def add_batch(self, prim_indices, cam_center, dists) -> None:
        for i, d in zip(prim_indices, dists):
            self.add(int(i), cam_center, float(d))

    def for_primitive(self, prim_index: int):
        """(centers (k, 3), dists (k,)); empty arrays when never observed."""
        centers = self._centers.get(prim_index, [])
        dists = self._dists.get(prim_index, [])
        return np.array(centers).reshape(-1, 3), np.array(dists)

    def count(self, prim_index: int) -> int:
        return len(self._dists.get(prim_index, []))

    def primitives(self):
        return sorted(self._dists.keys())


def significance(prim_or_logit) -> float:
    """Activated landmark probability of a primitive."""
    logit_val = getattr(prim_or_logit, "score_logit", prim_or_logit)
    return float(sigmoid(logit_val))


def generalizability(mu: np.ndarray, centers: np.ndarray) -> float:
    """Largest angle (radians) between any two viewing directions.

    Observations closer than 1e-6 m to the primitive are skipped as
    degenerate; fewer than two usable observations give 0.
    """
    mu = np.asarray(mu, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    dirs = centers - mu
    norms = np.linalg.norm(dirs, axis=1)
    usable = norms >= 1e-6
    dirs = dirs[usable] / norms[usable, None]
    if dirs.shape[0] < 2:
        return 0.0
    dots = dirs @ dirs.T
    np.fill_diagonal(dots, 1.0)
    return float(np.arccos(np.clip(dots.min(), -1.0, 1.0)))


def geometry_consistency(dists: np.ndarray, tr: float) -> float:
    """min(2, tr/mean) + min(2, tr/std) over the multi-view distance errors."""
    dists = np.asarray(dists, dtype=np.float64).ravel()
    if dists.size == 0:
        raise NoObservations("geometry consistency needs at least one observation")
    mean = float(np.mean(dists))
    std = float(np.std(dists))
    return min(2.0, tr / max(mean, _EPS)) + min(2.0, tr / max(std, _EPS))


def saliency(prim_index: int, score_logit: float, mu: np.ndarray,
             obs: ObservationSet, tr: float) -> SaliencyRecord:
    centers, dists = obs.for_primitive(prim_index)
    sig = significance(score_logit)
    gen = generalizability(mu, centers)
    geo = geometry_consistency(dists, tr)
    return SaliencyRecord(primitive_index=prim_index, sig=sig, gen=gen, geo=geo,
                          total=2.0 * sig + min(2.0, gen) + geo)


# ---------------------------------------------------------------------------
# observation building (visibility proxy over the reconstruction keyframes)


@dataclass
class ObservationStats:
    """Aggregates per primitive, enough to score saliency without raw lists."""
    count: np.ndarray       # (N,)
    max_angle: np.ndarray   # (N,) radians
    dist_mean: np.ndarray   # (N,)
    dist_std: np.ndarray    # (N,)


def build_observations(scene: SceneModel, keyframes, cfg: PipelineConfig | None = None,
                       key_only: bool = True) -> ObservationSet:
    """Collect observations of (key) primitives across the keyframes.

    A primitive observes camera i when its center projects inside the
    image with positive depth and the model's rendered depth estimate at
    that pixel (alpha-normalized blend) matches the primitive's depth
    within ``visibility_depth_tol``; the per-view distance error compares
    the center to the keyframe's back-projected measured depth at the
    same pixel.
    """
    cfg = cfg or PipelineConfig()
    cloud = scene.cloud
    idx = np.nonzero(cloud.is_key)[0] if key_only else np.arange(len(cloud))
    obs = ObservationSet()
    if idx.size == 0:
        return obs
    mu = cloud.mu[idx]
    for kf in keyframes:
        uv, z = project_points(mu, kf.pose, kf.intrinsics)
        K = kf.intrinsics
        u = np.round(uv[:, 0]).astype(int)
        v = np.round(uv[:, 1]).astype(int)
        inside = (z > cfg.near_plane) & (u >= 0) & (u < K.width) \
            & (v >= 0) & (v < K.height)
        if not inside.any():
            continue
        rendered = render(cloud, kf.pose, kf.intrinsics, cfg)
        ui, vi = u[inside], v[inside]
        depth_est = rendered.depth[vi, ui] / np.maximum(rendered.alpha[vi, ui], 1e-6)
        visible = np.abs(depth_est - z[inside]) <= cfg.visibility_depth_tol
        meas = kf.depth[vi, ui]
        has_depth = np.isfinite(meas) & (meas > 0) & (meas <= cfg.max_depth)
        ok = visible & has_depth
        if not ok.any():
            continue
        sel = np.nonzero(inside)[0][ok]
        surf = unproject_pixels(np.stack([ui[ok], vi[ok]], axis=1).astype(float),
                                meas[ok], kf.pose, kf.intrinsics)
        d = np.linalg.norm(mu[sel] - surf, axis=1)
        obs.add_batch(idx[sel], kf.pose.t, d)
    return obs


def observation_stats(scene: SceneModel, obs: ObservationSet) -> ObservationStats:
    """Reduce an ObservationSet to per-primitive sufficient statistics."""
    n = len(scene.cloud)
    stats = ObservationStats(count=np.zeros(n, dtype=int), max_angle=np.zeros(n),
                             dist_mean=np.zeros(n), dist_std=np.zeros(n))
    for i in obs.primitives():
        centers, dists = obs.for_primitive(i)
        stats.count[i] = dists.size
        stats.max_angle[i] = generalizability(scene.cloud.mu[i], centers)
        stats.dist_mean[i] = float(np.mean(dists))
        stats.dist_std[i] = float(np.std(dists))
    return stats


def saliency_from_stats(scene: SceneModel, stats: ObservationStats,
                        tr: float) -> tuple[np.ndarray, np.ndarray]:
    """(indices, totals) for every key primitive with >= 1 observation."""
    cloud = scene.cloud
    ok = cloud.is_key & (stats.count > 0)
    idx = np.nonzero(ok)[0]
    sig = sigmoid(cloud.score_logit[idx])
    gen = np.minimum(2.0, stats.max_angle[idx])
    geo = np.minimum(2.0, tr / np.maximum(stats.dist_mean[idx], _EPS)) \
        + np.minimum(2.0, tr / np.maximum(stats.dist_std[idx], _EPS))
    return idx, 2.0 * sig + gen + geo


# ---------------------------------------------------------------------------
# greedy selection


class _SpatialGrid:
    """Uniform hash grid over selected points for radius queries."""

    def __init__(self, cell: float):
        self.cell = cell
        self.cells: dict[tuple, list] = {}

    def insert(self, p: np.ndarray) -> None:
        key = tuple(np.floor(p / self.cell).astype(np.int64))
        self.cells.setdefault(key, []).append(p)

    def any_within(self, p: np.ndarray, r: float) -> bool:
        reach = int(np.ceil(r / self.cell))
        base = np.floor(p / self.cell).astype(np.int64)
        r2 = r * r
        for dx in range(-reach, reach + 1):
            for dy in range(-reach, reach + 1):
                for dz in range(-reach, reach + 1):
                    pts = self.cells.get((base[0] + dx, base[1] + dy, base[2] + dz))
                    if not pts:
                        continue
                    for q in pts:
                        d = p - q
                        if d @ d <= r2:
                            return True
        return False


def select_landmarks(positions: np.ndarray, saliency_scores: np.ndarray,
                     r0: float, n_target: int,
                     radius_floor: float = 1e-4) -> list[int]:
    """Greedy max-saliency selection with a shrinking exclusion radius.

    Repeatedly picks the highest-saliency candidate strictly farther than
    the current radius from every selected landmark (ties broken by lower
    index); when no candidate qualifies the radius is halved, down to
    ``radius_floor``.  Returns selected indices in pick order; stops at
    ``n_target`` or when the input is exhausted.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    saliency_scores = np.asarray(saliency_scores, dtype=np.float64).ravel()
    n = positions.shape[0]
    if n == 0 or n_target < 1 or r0 <= 0:
        raise EmptyInput("selection needs candidates, a positive target and radius")

    priority = np.lexsort((np.arange(n), -saliency_scores))
    grid = _SpatialGrid(cell=r0)
    taken = np.zeros(n, dtype=bool)
    selected: list[int] = []
    r = r0
    while len(selected) < min(n_target, n):
        found = -1
        for i in priority:
            if taken[i]:
                continue
            if not grid.any_within(positions[i], r):
                found = i
                break
        if found >= 0:
            selected.append(int(found))
            taken[found] = True
            grid.insert(positions[found])
        else:
            if r <= radius_floor:
                break
            r = max(r / 2.0, radius_floor)
    return selected
