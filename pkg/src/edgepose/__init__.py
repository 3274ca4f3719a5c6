"""Distributed markerless 6-DoF object pose estimation toolkit."""

__version__ = "0.1.0"

from .geometry import CameraIntrinsics, Pose, compose, inverse, project, transform_point
from .pnp import Correspondence, PnPOptions, PnPResult, refine_pose, solve_p3p_minimal, solve_pnp

__all__ = [
    "CameraIntrinsics",
    "Pose",
    "compose",
    "inverse",
    "project",
    "transform_point",
    "Correspondence",
    "PnPOptions",
    "PnPResult",
    "refine_pose",
    "solve_p3p_minimal",
    "solve_pnp",
    "__version__",
]
