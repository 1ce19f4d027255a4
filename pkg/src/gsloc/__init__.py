"""Gaussian-splat scene mapping, descriptor distillation, and visual localization."""

__version__ = "0.1.0"

from .config import PipelineConfig, load_config
from .geometry import CameraIntrinsics, Pose, pose_errors, project_point, unproject_pixel
from .primitives import GaussianCloud, GaussianPrimitive, SceneModel, compose_covariance
from .render import MapGradients, RenderedMaps, render, render_backward, render_with_state

__all__ = [
    "PipelineConfig", "load_config",
    "CameraIntrinsics", "Pose", "pose_errors", "project_point", "unproject_pixel",
    "GaussianCloud", "GaussianPrimitive", "SceneModel", "compose_covariance",
    "MapGradients", "RenderedMaps", "render", "render_backward", "render_with_state",
]
