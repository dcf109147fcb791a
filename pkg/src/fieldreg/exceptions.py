"""Exception and warning types shared across the package."""


class FieldRegError(Exception):
    """Base class for all fieldreg errors."""


class ParallelRays(FieldRegError):
    """Two rays are (anti)parallel and have no unique common perpendicular."""


class InsufficientViews(FieldRegError):
    """A keypoint was annotated in fewer than two views."""


class DegenerateConfiguration(FieldRegError):
    """Point configuration is rank-deficient (e.g. collinear)."""


class NonFiniteDensity(FieldRegError):
    """A density query returned NaN or infinity."""


class NoCameras(FieldRegError):
    """The scene has no cameras, so no surface field can be extracted."""


class NonPositivePrediction(FieldRegError):
    """Poisson loss requires a strictly positive prediction."""


class DegenerateField(FieldRegError):
    """A binary field contains only one class and cannot be distilled."""


class EmptySampleSet(FieldRegError):
    """The active sample set is empty."""


class EmptyKeypoints(FieldRegError):
    """No keypoints were provided."""


class NonFiniteLoss(FieldRegError):
    """The optimization produced a NaN/inf loss or gradient."""


class EmptyMesh(FieldRegError):
    """Metric evaluation needs at least one vertex."""


class ZeroDiameter(FieldRegError):
    """All vertices coincide; 3D-ADD normalization is undefined."""


class KeypointMismatch(FieldRegError):
    """Keypoint sets of the two scenes differ in size or are too small."""


class SceneFormatError(FieldRegError):
    """A scene or surface manifest is malformed or incomplete."""


class GimbalWarning(UserWarning):
    """Euler decomposition is near gimbal lock; angle RMSE is ill-conditioned."""
