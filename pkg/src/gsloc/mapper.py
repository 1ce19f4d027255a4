"""Incremental scene reconstruction from posed RGB-D keyframes.

Each ingested keyframe spawns key primitives at every pixel whose 2D
keypoint score exceeds a threshold plus a sparse random sample of the
remaining valid-depth pixels; a short optimization burst over a few
sampled frames follows each ingestion, and a refinement phase runs at
the end.  Key primitive centers are frozen and their scales pulled
toward ``delta * (1 - spawn_score)`` by the regularization loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .config import PipelineConfig
from .errors import EmptyDataset, NonFiniteLoss, NoValidDepth, ShapeMismatch
from .geometry import CameraIntrinsics, Pose, unproject_pixels
from .primitives import GaussianCloud, SceneModel, logit
from .render import MapGradients, ParamGradients, RenderedMaps, render_backward, render_with_state


@dataclass
class KeyframeRecord:
    """One posed RGB-D frame with its precomputed 2D feature and score maps."""
    color: np.ndarray              # (H, W, 3) in [0, 1]
    depth: np.ndarray              # (H, W) meters, 0 = invalid
    pose: Pose
    intrinsics: CameraIntrinsics
    feature_map: np.ndarray        # (H_f, W_f, D_f), unit-norm vectors
    score_map: np.ndarray          # (H, W) in [0, 1]
    frame_id: int = -1

    def valid_depth_mask(self, max_depth: float = 20.0) -> np.ndarray:
        d = self.depth
        return np.isfinite(d) & (d > 0) & (d <= max_depth)

    def validate(self) -> None:
        H, W = self.depth.shape
        if self.color.shape[:2] != (H, W) or self.score_map.shape != (H, W):
            raise ShapeMismatch("color/depth/score shapes disagree")
        norms = np.linalg.norm(self.feature_map, axis=-1)
        filled = norms > 0
        if filled.any() and np.abs(norms[filled] - 1.0).max() > 1e-3:
            raise ValueError("feature map vectors must be unit norm")


@dataclass
class LossWeights:
    """Weights of the five loss terms plus the spawn thresholds they use."""
    lambda1: float = 1.0    # color
    lambda2: float = 0.5    # depth
    lambda3: float = 1.0    # rendered keypoint score
    lambda4: float = 1.0    # descriptor distillation (trained by the field)
    lambda5: float = 0.01   # key-primitive scale regularization
    delta: float = 0.02     # meters, target scale span for key primitives
    key_score_threshold: float = 0.005
    sample_fraction: float = 1.0 / 64.0

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "LossWeights":
        return cls(lambda1=cfg.lambda_color, lambda2=cfg.lambda_depth,
                   lambda3=cfg.lambda_score, lambda4=cfg.lambda_distill,
                   lambda5=cfg.lambda_reg, delta=cfg.scale_delta,
                   key_score_threshold=cfg.key_score_threshold,
                   sample_fraction=cfg.sample_fraction)


class AdamState:
    """Per-parameter-group Adam moments, resized alongside the cloud."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def ensure(self, name: str, shape) -> None:
        if name not in self.m:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)
        elif self.m[name].shape[0] < shape[0]:
            pad = (shape[0] - self.m[name].shape[0],) + shape[1:]
            self.m[name] = np.concatenate([self.m[name], np.zeros(pad)])
            self.v[name] = np.concatenate([self.v[name], np.zeros(pad)])

    def keep(self, mask: np.ndarray) -> None:
        for name in self.m:
            self.m[name] = self.m[name][mask]
            self.v[name] = self.v[name][mask]

    def update(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        m, v = self.m[name], self.v[name]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        t = self.step_count
        mhat = m / (1 - self.beta1**t)
        vhat = v / (1 - self.beta2**t)
        param -= lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class MapperState:
    """Mutable reconstruction state: spawn occupancy, RNG, optimizer."""
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    occupied: set = field(default_factory=set)
    adam: AdamState = field(default_factory=AdamState)

    def occupancy_from(self, cloud: GaussianCloud, voxel: float) -> None:
        cells = np.floor(cloud.mu / voxel).astype(np.int64)
        self.occupied.update(map(tuple, cells))


def initialize_from_keyframe(scene: SceneModel, kf: KeyframeRecord,
                             weights: LossWeights, state: MapperState | None = None,
                             cfg: PipelineConfig | None = None) -> int:
    """Spawn primitives from one keyframe; returns the number added.

    Every valid-depth pixel with score above the key threshold spawns a
    key primitive; a ``sample_fraction`` random subset of the remaining
    valid pixels spawns non-key primitives.  A voxel-hash occupancy check
    suppresses spawns within ~1 cm of previously spawned primitives.
    """
    cfg = cfg or PipelineConfig()
    if state is None:
        state = MapperState(rng=np.random.default_rng(cfg.seed))
        state.occupancy_from(scene.cloud, cfg.dedup_voxel)

    valid = kf.valid_depth_mask(cfg.max_depth)
    if not valid.any():
        raise NoValidDepth(f"keyframe {kf.frame_id} has no valid depth")

    key_mask = valid & (kf.score_map > weights.key_score_threshold)
    rest = np.nonzero((valid & ~key_mask).ravel())[0]
    n_sample = int(round(weights.sample_fraction * rest.size))
    sampled = state.rng.choice(rest, size=min(n_sample, rest.size), replace=False) \
        if n_sample > 0 else np.empty(0, dtype=np.int64)

    H, W = kf.depth.shape
    key_flat = np.nonzero(key_mask.ravel())[0]
    flat = np.concatenate([key_flat, np.sort(sampled)])
    is_key = np.zeros(flat.size, dtype=bool)
    is_key[:key_flat.size] = True

    vv, uu = np.divmod(flat, W)
    uv = np.stack([uu, vv], axis=1).astype(np.float64)
    depths = kf.depth.ravel()[flat]
    points = unproject_pixels(uv, depths, kf.pose, kf.intrinsics)

    # occupancy suppression against everything spawned so far
    cells = np.floor(points / cfg.dedup_voxel).astype(np.int64)
    fresh = np.ones(flat.size, dtype=bool)
    seen_now = set()
    occupied = state.occupied
    for i, cell in enumerate(map(tuple, cells)):
        if cell in occupied or cell in seen_now:
            fresh[i] = False
        else:
            seen_now.add(cell)
    occupied.update(seen_now)

    points = points[fresh]
    flat = flat[fresh]
    is_key = is_key[fresh]
    n_new = points.shape[0]
    if n_new == 0:
        return 0

    # isotropic initial scale from local point spacing within this keyframe
    k = cfg.init_scale_neighbor
    if n_new > k:
        tree = cKDTree(points)
        dist, _ = tree.query(points, k=k + 1)
        spacing = np.clip(dist[:, k], 1e-4, cfg.init_scale_max)
    else:
        spacing = np.full(n_new, cfg.dedup_voxel * 2.0)
    log_scale = np.repeat(np.log(spacing)[:, None], 3, axis=1)

    colors = kf.color.reshape(-1, 3)[flat]
    spawn_scores = np.where(is_key, kf.score_map.ravel()[flat], 0.0)
    quats = np.zeros((n_new, 4))
    quats[:, 0] = 1.0

    scene.cloud.append(mu=points, q=quats, log_scale=log_scale,
                       opacity_logit=np.zeros(n_new), color=colors,
                       score_logit=np.zeros(n_new), is_key=is_key,
                       spawn_score=spawn_scores)

    lo = points.min(axis=0)
    hi = points.max(axis=0)
    if len(scene.cloud) == n_new:
        scene.bounds_min, scene.bounds_max = lo, hi
    else:
        scene.bounds_min = np.minimum(scene.bounds_min, lo)
        scene.bounds_max = np.maximum(scene.bounds_max, hi)
    return n_new


# ---------------------------------------------------------------------------
# losses


def reconstruction_losses(rendered: RenderedMaps, kf: KeyframeRecord,
                          cfg: PipelineConfig | None = None):
    """(L_color, L_depth, L_score): masked L1 terms plus score-map BCE."""
    losses, _ = reconstruction_loss_grads(rendered, kf, cfg, want_grads=False)
    return losses


def reconstruction_loss_grads(rendered: RenderedMaps, kf: KeyframeRecord,
                              cfg: PipelineConfig | None = None,
                              want_grads: bool = True):
    """Loss terms and, optionally, per-pixel gradients w.r.t. the maps.

    Color and depth are mean L1 over pixels with rendered alpha above the
    mask threshold (depth additionally requires a valid measurement); the
    score term is mean binary cross-entropy over all pixels with the
    rendered score clamped away from {0, 1}.  The alpha mask is treated
    as constant (no gradient flows through mask membership).
    """
    cfg = cfg or PipelineConfig()
    if rendered.color.shape != kf.color.shape or rendered.depth.shape != kf.depth.shape:
        raise ShapeMismatch(
            f"rendered {rendered.color.shape} vs keyframe {kf.color.shape}")

    mask = rendered.alpha > cfg.alpha_mask_threshold
    n_c = int(mask.sum())
    diff_c = rendered.color - kf.color
    l_color = float(np.abs(diff_c[mask]).mean()) if n_c else 0.0

    mask_d = mask & kf.valid_depth_mask(cfg.max_depth)
    n_d = int(mask_d.sum())
    diff_d = rendered.depth - kf.depth
    l_depth = float(np.abs(diff_d[mask_d]).mean()) if n_d else 0.0

    lo, hi = cfg.bce_clamp, 1.0 - cfg.bce_clamp
    pred = np.clip(rendered.score, lo, hi)
    target = kf.score_map
    bce = -(target * np.log(pred) + (1.0 - target) * np.log(1.0 - pred))
    l_score = float(bce.mean())

    grads = None
    if want_grads:
        g_color = np.zeros_like(rendered.color)
        if n_c:
            g_color[mask] = np.sign(diff_c[mask]) / (n_c * 3)
        g_depth = np.zeros_like(rendered.depth)
        if n_d:
            g_depth[mask_d] = np.sign(diff_d[mask_d]) / n_d
        inside = (rendered.score > lo) & (rendered.score < hi)
        g_score = np.where(inside, (pred - target) / (pred * (1.0 - pred)), 0.0)
        g_score /= target.size
        grads = MapGradients(color=g_color, depth=g_depth, score=g_score)
    return (l_color, l_depth, l_score), grads


def regularization_loss(scene: SceneModel, weights: LossWeights) -> float:
    loss, _ = regularization_loss_grads(scene, weights)
    return loss


def regularization_loss_grads(scene: SceneModel, weights: LossWeights):
    """Key-primitive scale penalty sum |exp(s) - delta*(1 - m)| and its gradient."""
    cloud = scene.cloud
    keys = cloud.is_key
    grad = np.zeros_like(cloud.log_scale)
    if not keys.any():
        return 0.0, grad
    s = np.exp(cloud.log_scale[keys])
    target = (weights.delta * (1.0 - cloud.spawn_score[keys]))[:, None]
    diff = s - target
    loss = float(np.abs(diff).sum())
    grad[keys] = np.sign(diff) * s   # d|exp(s)-t|/d log_s
    return loss, grad


_PARAM_LR = {
    "mu": "lr_position",
    "q": "lr_rotation",
    "log_scale": "lr_scale",
    "opacity_logit": "lr_opacity",
    "color": "lr_color",
    "score_logit": "lr_score",
}


def optimize_step(scene: SceneModel, keyframes: list[KeyframeRecord],
                  weights: LossWeights, state: MapperState,
                  cfg: PipelineConfig | None = None) -> dict:
    """One Adam step over the weighted loss of a keyframe batch.

    Losses and gradients are averaged over the batch; the regularization
    term is evaluated once per step.  Raises NonFiniteLoss naming the
    offending term if any loss is NaN/inf.
    """
    cfg = cfg or PipelineConfig()
    cloud = scene.cloud
    if len(cloud) == 0:
        raise EmptyDataset("cannot optimize an empty scene")

    total_grads = ParamGradients.zeros(len(cloud))
    sums = {"color": 0.0, "depth": 0.0, "score": 0.0}
    for kf in keyframes:
        maps, rstate = render_with_state(cloud, kf.pose, kf.intrinsics, cfg)
        (l_c, l_d, l_s), grads = reconstruction_loss_grads(maps, kf, cfg)
        for name, val in (("color", l_c), ("depth", l_d), ("score", l_s)):
            if not np.isfinite(val):
                raise NonFiniteLoss(f"{name} loss is {val}")
            sums[name] += val
        grads.color *= weights.lambda1
        grads.depth *= weights.lambda2
        grads.score *= weights.lambda3
        total_grads.add(render_backward(rstate, grads,
                                        freeze_key_positions=cfg.freeze_key_positions))

    nb = len(keyframes)
    total_grads = total_grads.scaled(1.0 / nb)
    l_c, l_d, l_s = sums["color"] / nb, sums["depth"] / nb, sums["score"] / nb

    l_reg, reg_grad = regularization_loss_grads(scene, weights)
    if not np.isfinite(l_reg):
        raise NonFiniteLoss(f"regularization loss is {l_reg}")
    total_grads.log_scale += weights.lambda5 * reg_grad

    total = weights.lambda1 * l_c + weights.lambda2 * l_d \
        + weights.lambda3 * l_s + weights.lambda5 * l_reg

    adam = state.adam
    adam.step_count += 1
    for name, lr_key in _PARAM_LR.items():
        param = getattr(cloud, name)
        adam.ensure(name, param.shape)
        adam.update(name, param, getattr(total_grads, name), getattr(cfg, lr_key))
    cloud.normalize_quats()
    cloud.clamp_scales()
    cloud.revision += 1

    return {"color": l_c, "depth": l_d, "score": l_s, "reg": l_reg, "total": total}


def prune(scene: SceneModel, state: MapperState, threshold: float) -> int:
    """Drop primitives whose activated opacity fell below the threshold."""
    keep = scene.cloud.opacity >= threshold
    removed = int((~keep).sum())
    if removed:
        scene.cloud.keep(keep)
        state.adam.keep(keep)
    return removed


def reconstruct(keyframes: list[KeyframeRecord], cfg: PipelineConfig | None = None,
                log_fn=None) -> SceneModel:
    """Full incremental reconstruction over a keyframe list.

    Per keyframe: spawn primitives, then run ``iters_per_ingest`` steps on
    a random batch of ``frames_per_batch`` ingested frames; opacity pruning
    every ``prune_interval`` ingestions; a refinement phase afterwards.
    Deterministic for a fixed config seed.
    """
    cfg = cfg or PipelineConfig()
    if not keyframes:
        raise EmptyDataset("no keyframes")
    weights = LossWeights.from_config(cfg)
    scene = SceneModel()
    state = MapperState(rng=np.random.default_rng(cfg.seed))

    for i, kf in enumerate(keyframes):
        initialize_from_keyframe(scene, kf, weights, state, cfg)
        ingested = keyframes[:i + 1]
        batch_ids = state.rng.choice(len(ingested),
                                     size=min(cfg.frames_per_batch, len(ingested)),
                                     replace=False)
        batch = [ingested[j] for j in batch_ids]
        for _ in range(cfg.iters_per_ingest):
            stats = optimize_step(scene, batch, weights, state, cfg)
        if cfg.prune_interval > 0 and (i + 1) % cfg.prune_interval == 0:
            prune(scene, state, cfg.prune_opacity)
        if log_fn is not None:
            log_fn(f"ingest {i + 1}/{len(keyframes)}: {len(scene.cloud)} primitives, "
                   f"loss {stats['total']:.4f}")

    for it in range(cfg.refine_iters):
        batch_ids = state.rng.choice(len(keyframes),
                                     size=min(cfg.refine_batch, len(keyframes)),
                                     replace=False)
        stats = optimize_step(scene, [keyframes[j] for j in batch_ids],
                              weights, state, cfg)
        if log_fn is not None and (it + 1) % 50 == 0:
            log_fn(f"refine {it + 1}/{cfg.refine_iters}: loss {stats['total']:.4f}")
    prune(scene, state, cfg.prune_opacity)
    return scene
