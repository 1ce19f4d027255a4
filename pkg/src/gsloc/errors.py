"""Exception types shared across the toolkit."""


class GslocError(Exception):
    """Base class for all toolkit errors."""


class BehindCamera(GslocError):
    """Point or primitive center lies behind the camera's near plane."""


class InvalidDepth(GslocError):
    """Depth value is non-positive or non-finite."""


class StateMismatch(GslocError):
    """Cached forward-render state does not match the scene revision."""


class NonFiniteLoss(GslocError):
    """A loss term evaluated to NaN or infinity; the step is aborted."""


class NoValidDepth(GslocError):
    """Keyframe contains no pixel with a valid depth measurement."""


class ShapeMismatch(GslocError):
    """Array shapes of rendered and reference maps disagree."""


class EmptyDataset(GslocError):
    """Dataset contains no keyframes."""


class OutOfVolume(GslocError):
    """Query point lies outside the feature volume bounds."""


class NoSurface(GslocError):
    """TSDF has no zero crossing; no surface can be extracted."""


class EmptySamples(GslocError):
    """Surface sample set is empty."""


class DegenerateObservation(GslocError):
    """Observing camera center coincides with the primitive center."""


class NoObservations(GslocError):
    """Primitive has no recorded observations."""


class EmptyInput(GslocError):
    """Operation requires a nonempty input collection."""


class EmptyDatabase(GslocError):
    """Retrieval database contains no reference frames."""


class InsufficientMatches(GslocError):
    """Fewer 2D-3D correspondences than the pose solver needs."""


class NoConsensus(GslocError):
    """RANSAC failed to find a pose supported by enough inliers."""


class CorruptModel(GslocError):
    """Model file is truncated or malformed; message names the section."""
