"""Weakly supervised adversarial 2D-to-3D human pose lifting.

A lifter network maps 2D keypoints to a 3D pose and a weak-perspective
camera. It learns from unpaired 2D and 3D pools: the 2D side constrains it
through reprojection, the 3D side through a Wasserstein critic that scores
poses via their kinematic chain space (KCS) matrix.
"""

__version__ = "0.1.0"

from .camera import (  # noqa: E402
    camera_loss,
    camera_scale,
    reprojection_loss,
    reproject,
)
from .skeleton import (  # noqa: E402
    DEFAULT_SKELETON,
    DegenerateInputError,
    SkeletonSpec,
    bone_lengths,
    kcs,
    procrustes_align,
    symmetry_error,
)

__all__ = [
    "DEFAULT_SKELETON",
    "DegenerateInputError",
    "SkeletonSpec",
    "bone_lengths",
    "camera_loss",
    "camera_scale",
    "kcs",
    "procrustes_align",
    "reproject",
    "reprojection_loss",
    "symmetry_error",
    "__version__",
]
