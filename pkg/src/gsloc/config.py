"""Pipeline configuration.

One flat dataclass holds every tunable of the toolkit with its default.
Config files are a plain ``key = value`` text format (``#`` comments,
booleans as true/false); ``.json`` files are accepted too.  Unknown keys
are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path


@dataclass
class PipelineConfig:
    # -- reproducibility
    seed: int = 0

    # -- rasterizer
    tile_size: int = 16
    alpha_clamp: float = 0.99
    transmittance_min: float = 1e-4
    cov2d_lowpass: float = 0.3          # px^2 added to 2D covariance diagonal
    cutoff_sigma: float = 3.5           # Mahalanobis radius beyond which a splat contributes 0
    near_plane: float = 0.01            # meters; projection-op precondition
    cull_near: float = 0.2              # meters; rasterizer depth cull (EWA footprints
                                        # of sideways splats explode as z -> 0)
    sh_degree: int = 0                  # 0 = plain RGB; >0 stores extra SH coefficients
    render_f32: bool = False            # float32 tile math (training-speed mode)

    # -- mapping losses and schedule
    lambda_color: float = 1.0
    lambda_depth: float = 0.5
    lambda_score: float = 1.0
    lambda_distill: float = 1.0
    lambda_reg: float = 0.01
    key_score_threshold: float = 0.005
    sample_fraction: float = 1.0 / 64.0
    scale_delta: float = 0.02           # target scale for a zero-score key primitive, meters
    freeze_key_positions: bool = True
    alpha_mask_threshold: float = 0.5   # color/depth loss only where rendered alpha exceeds this
    bce_clamp: float = 1e-6
    lr_position: float = 1.6e-4
    lr_color: float = 2.5e-3
    lr_opacity: float = 0.05
    lr_score: float = 0.05
    lr_scale: float = 1e-3
    lr_rotation: float = 1e-3
    frames_per_batch: int = 5
    iters_per_ingest: int = 10
    refine_iters: int = 300
    refine_batch: int = 1
    prune_interval: int = 10            # ingestions between opacity-pruning sweeps
    prune_opacity: float = 0.005
    dedup_voxel: float = 0.01           # meters; suppress spawns into an occupied cell
    init_scale_neighbor: int = 3        # isotropic init scale = distance to k-th nearest spawn
    init_scale_max: float = 0.03        # meters; cap on the spawn-time scale
    max_depth: float = 20.0             # meters; depth values beyond are treated as invalid

    # -- feature volume
    voxel_size: float = 0.04            # meters
    tsdf_trunc_factor: float = 4.0      # truncation band = factor * voxel_size
    feature_dim: int = 256              # D_f of the fused 2D features / decoded descriptors

    # -- descriptor field
    enc_levels: int = 8
    enc_features_per_level: int = 2
    enc_table_size_log2: int = 19
    enc_finest_resolution: float = 0.06  # meters
    enc_coarsest_divisor: float = 8.0    # coarsest resolution = scene extent / divisor
    mlp_hidden: int = 128
    mlp_layers: int = 4
    distill_lr: float = 1e-3
    distill_steps: int = 2000
    distill_batch: int = 4096
    surface_samples: int = 100000

    # -- landmark selection
    geo_tr: float = 0.01                # meters; distance-error threshold in the consistency term
    selection_radius: float = 0.0       # meters; 0 = scene diagonal / 20
    selection_radius_floor: float = 1e-4
    visibility_depth_tol: float = 0.10  # meters; rendered-vs-primitive depth gate for observations

    # -- localization
    cosine_floor: float = 0.7
    ratio_test: float = 0.95
    ransac_iters: int = 2000
    ransac_confidence: float = 0.999
    ransac_threshold_px: float = 3.0
    min_inliers: int = 6
    min_inlier_fraction: float = 0.3
    retrieval_topk: int = 1

    def scaled(self, iters_scale: float) -> "PipelineConfig":
        """Copy with every iteration count scaled (floors keep schedules sane)."""
        out = dataclasses.replace(self)
        out.iters_per_ingest = max(1, round(self.iters_per_ingest * iters_scale))
        out.refine_iters = max(0, round(self.refine_iters * iters_scale))
        out.distill_steps = max(1, round(self.distill_steps * iters_scale))
        return out


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}


def _coerce(name: str, raw: object) -> object:
    kind = _FIELD_TYPES[name]
    if kind == "bool":
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("true", "1", "yes"):
            return True
        if text in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {name!r}: expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def load_config(path: str | Path) -> PipelineConfig:
    """Read a config file (.json or key = value text) into a PipelineConfig."""
    path = Path(path)
    if path.suffix == ".json":
        values = json.loads(path.read_text())
        if not isinstance(values, dict):
            raise ValueError(f"{path}: expected a JSON object")
    else:
        values = {}
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip().strip('"')
    return config_from_dict(values)


def config_from_dict(values: dict) -> PipelineConfig:
    cfg = PipelineConfig()
    for key, raw in values.items():
        if key not in _FIELD_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, raw))
    return cfg


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(cfg)]
    Path(path).write_text("\n".join(lines) + "\n")
