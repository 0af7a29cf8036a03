"""Monte-Carlo render-and-compare refinement of 6-DoF camera poses."""

from .geometry import Intrinsics, Pose, PoseError, pose_error
from .particle_filter import Schedule, preset_schedule
from .refiner import RefineResult, refine, refine_batch
from .renderer import Scene, SceneSpec, ShadingMode, load_mesh, make_synthetic_scene, render

__all__ = [
    "Intrinsics",
    "Pose",
    "PoseError",
    "pose_error",
    "Schedule",
    "preset_schedule",
    "RefineResult",
    "refine",
    "refine_batch",
    "Scene",
    "SceneSpec",
    "ShadingMode",
    "load_mesh",
    "make_synthetic_scene",
    "render",
]

__version__ = "0.1.0"
