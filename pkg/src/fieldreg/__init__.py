"""fieldreg: rigid registration of volumetric density fields.

Extracts an illumination-invariant surface likelihood field from a density
field, distills Gaussian-smoothed variants, and optimizes an SE(3) transform
aligning two partially overlapping scenes from keypoint annotations.
"""

from .exceptions import (
    DegenerateConfiguration,
    DegenerateField,
    EmptyKeypoints,
    EmptyMesh,
    EmptySampleSet,
    FieldRegError,
    GimbalWarning,
    InsufficientViews,
    KeypointMismatch,
    NoCameras,
    NonFiniteDensity,
    NonFiniteLoss,
    NonPositivePrediction,
    ParallelRays,
    SceneFormatError,
    ZeroDiameter,
)
from .geometry import (
    PinholeCamera,
    PoseParams,
    Ray,
    RigidTransform,
    closed_form_alignment,
    compose,
    triangulate,
    triangulate_keypoints,
    triangulate_rays,
)

__all__ = [
    "DegenerateConfiguration",
    "DegenerateField",
    "EmptyKeypoints",
    "EmptyMesh",
    "EmptySampleSet",
    "FieldRegError",
    "GimbalWarning",
    "InsufficientViews",
    "KeypointMismatch",
    "NoCameras",
    "NonFiniteDensity",
    "NonFiniteLoss",
    "NonPositivePrediction",
    "ParallelRays",
    "SceneFormatError",
    "ZeroDiameter",
    "PinholeCamera",
    "PoseParams",
    "Ray",
    "RigidTransform",
    "closed_form_alignment",
    "compose",
    "triangulate",
    "triangulate_keypoints",
    "triangulate_rays",
]

__version__ = "0.1.0"
