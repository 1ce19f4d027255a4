"""6-DoF localization of query images against a reconstructed scene.

Pipeline per query: retrieve the closest reference keyframe (16x16
grayscale thumbnails, or a user-supplied pairs file), keep landmarks
inside the reference frustum, match query descriptors to decoded 3D
descriptors by mutual-nearest cosine similarity with a ratio test, and
solve the pose with RANSAC + P3P + LM refinement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .errors import EmptyDatabase, InsufficientMatches, NoConsensus
from .geometry import CameraIntrinsics, Pose, project_points
from .pnp import PoseEstimate, solve_pnp_ransac
from .primitives import SceneModel

THUMBNAIL_SIZE = 16


@dataclass
class QueryObservation:
    """Detected 2D keypoints with descriptors for one query image."""
    keypoints: np.ndarray      # (M, 2) pixel coordinates
    scores: np.ndarray         # (M,)
    descriptors: np.ndarray    # (M, D) unit-norm
    intrinsics: CameraIntrinsics
    thumbnail: np.ndarray      # (16, 16) grayscale retrieval descriptor
    frame_id: int = -1


@dataclass
class Match2D3D:
    keypoint_index: int
    landmark_index: int
    cosine: float


@dataclass
class LocalizationResult:
    estimate: PoseEstimate | None
    reference_id: int
    n_candidates: int
    n_matches: int
    status: str = "ok"

    @property
    def converged(self) -> bool:
        return self.estimate is not None and self.estimate.converged


def thumbnail_descriptor(image: np.ndarray, size: int = THUMBNAIL_SIZE) -> np.ndarray:
    """Mean-pooled grayscale thumbnail of an (H, W, 3) image in [0, 1]."""
    gray = np.asarray(image, dtype=np.float64).mean(axis=2)
    H, W = gray.shape
    rows = np.arange(H) * size // H
    cols = np.arange(W) * size // W
    out = np.zeros((size, size))
    counts = np.zeros((size, size))
    np.add.at(out, (rows[:, None].repeat(W, 1), cols[None, :].repeat(H, 0)), gray)
    np.add.at(counts, (rows[:, None].repeat(W, 1), cols[None, :].repeat(H, 0)), 1.0)
    return out / np.maximum(counts, 1.0)


def retrieve_reference(query: QueryObservation, thumbnails: dict,
                       pairs: dict | None = None) -> int:
    """Closest database frame by thumbnail L2 distance (pairs file wins)."""
    return retrieve_references(query, thumbnails, topk=1, pairs=pairs)[0]


def retrieve_references(query: QueryObservation, thumbnails: dict,
                        topk: int = 1, pairs: dict | None = None) -> list[int]:
    """Top-k closest database frames; a pairs-file entry pins the first."""
    if pairs is not None and query.frame_id in pairs:
        pinned = [pairs[query.frame_id]]
        if topk <= 1:
            return pinned
    else:
        pinned = []
    if not thumbnails:
        raise EmptyDatabase("no reference thumbnails")
    ids = sorted(thumbnails.keys())
    dists = np.array([float(np.sum((thumbnails[i] - query.thumbnail) ** 2))
                      for i in ids])
    ranked = [ids[i] for i in np.argsort(dists)]
    out = pinned + [r for r in ranked if r not in pinned]
    return out[:max(1, topk)]


def candidate_landmarks(scene: SceneModel, landmark_indices: np.ndarray,
                        ref_pose: Pose, K: CameraIntrinsics,
                        near_plane: float = 0.01, decode: bool = True):
    """Landmarks whose centers project inside the reference frustum.

    Returns (kept cloud indices, positions, decoded descriptors); pass
    decode=False to skip descriptor decoding (frustum test only).
    """
    landmark_indices = np.asarray(landmark_indices, dtype=np.int64)
    if landmark_indices.size == 0:
        return landmark_indices, np.zeros((0, 3)), np.zeros((0, 0))
    pos = scene.cloud.mu[landmark_indices]
    uv, z = project_points(pos, ref_pose, K)
    keep = (z > near_plane) & (uv[:, 0] >= 0) & (uv[:, 0] < K.width) \
        & (uv[:, 1] >= 0) & (uv[:, 1] < K.height)
    kept = landmark_indices[keep]
    pos = pos[keep]
    if not decode:
        return kept, pos, None
    if scene.descriptor_field is None:
        raise ValueError("scene has no trained descriptor field")
    desc = scene.descriptor_field.batch_decode(pos) if kept.size else np.zeros((0, 0))
    return kept, pos, desc


def match(query_desc: np.ndarray, cand_desc: np.ndarray,
          cosine_floor: float = 0.7, ratio: float = 0.95) -> list[Match2D3D]:
    """Mutual-nearest-neighbor cosine matching with an angular ratio test.

    A pair is accepted when it is the mutual best, its cosine is at least
    the floor, and the best angular distance is at most ``ratio`` times
    the second best (skipped with a single candidate).
    """
    if query_desc.size == 0 or cand_desc.size == 0:
        return []
    sim = query_desc @ cand_desc.T
    best_j = np.argmax(sim, axis=1)
    best_i = np.argmax(sim, axis=0)
    out = []
    n_cand = cand_desc.shape[0]
    for i, j in enumerate(best_j):
        if best_i[j] != i:
            continue
        cos1 = sim[i, j]
        if cos1 < cosine_floor:
            continue
        if n_cand >= 2:
            row = sim[i].copy()
            row[j] = -np.inf
            cos2 = row.max()
            th1 = np.arccos(np.clip(cos1, -1.0, 1.0))
            th2 = np.arccos(np.clip(cos2, -1.0, 1.0))
            if th1 > ratio * th2:
                continue
        out.append(Match2D3D(keypoint_index=i, landmark_index=int(j),
                             cosine=float(cos1)))
    return out


def localize(query: QueryObservation, scene: SceneModel,
             landmark_indices: np.ndarray, thumbnails: dict,
             reference_poses: dict, cfg: PipelineConfig | None = None,
             pairs: dict | None = None) -> LocalizationResult:
    """Full query localization; NoConsensus is reported, not raised.

    ``reference_poses`` maps database frame id -> Pose for frustum culling.
    Raises InsufficientMatches when fewer than 4 correspondences survive
    matching (including the zero-keypoint case).
    """
    cfg = cfg or PipelineConfig()
    refs = retrieve_references(query, thumbnails, topk=cfg.retrieval_topk,
                               pairs=pairs)
    ref_id = refs[0]
    union: list[int] = []
    for rid in refs:
        kept_r, _, _ = candidate_landmarks(scene, landmark_indices,
                                           reference_poses[rid],
                                           query.intrinsics, cfg.near_plane,
                                           decode=False)
        union.extend(kept_r.tolist())
    kept = np.array(sorted(set(union)), dtype=np.int64)
    pos = scene.cloud.mu[kept]
    desc = scene.descriptor_field.batch_decode(pos) if kept.size \
        else np.zeros((0, query.descriptors.shape[1] if query.descriptors.size else 0))
    matches = match(query.descriptors, desc, cfg.cosine_floor, cfg.ratio_test)
    if len(matches) < 4:
        raise InsufficientMatches(
            f"{len(matches)} matches against reference {ref_id}")
    pix = query.keypoints[[m.keypoint_index for m in matches]]
    pts = pos[[m.landmark_index for m in matches]]
    try:
        estimate = solve_pnp_ransac(
            pix, pts, query.intrinsics, iters=cfg.ransac_iters,
            threshold_px=cfg.ransac_threshold_px, seed=cfg.seed,
            min_inliers=cfg.min_inliers,
            min_inlier_fraction=cfg.min_inlier_fraction,
            confidence=cfg.ransac_confidence)
    except NoConsensus as exc:
        return LocalizationResult(estimate=None, reference_id=ref_id,
                                  n_candidates=int(kept.size),
                                  n_matches=len(matches),
                                  status=f"no consensus: {exc}")
    return LocalizationResult(estimate=estimate, reference_id=ref_id,
                              n_candidates=int(kept.size),
                              n_matches=len(matches))
