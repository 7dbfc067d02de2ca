"""Few-shot generalizable radiance fields with calibrated scene semantics."""

from .geometry import Camera, Intrinsics, Pose, generate_rays, project
from .scene import SceneBundle, load_scene, save_scene
from .transformer import CaesarModel, StackConfig, render_image
from .encoder import EncoderConfig

__all__ = [
    "Camera",
    "Intrinsics",
    "Pose",
    "generate_rays",
    "project",
    "SceneBundle",
    "load_scene",
    "save_scene",
    "CaesarModel",
    "StackConfig",
    "render_image",
    "EncoderConfig",
]
