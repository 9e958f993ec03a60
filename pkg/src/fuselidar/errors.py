"""Exception types shared across the toolkit.

Every failure mode that callers are expected to branch on gets its own
class; generic misuse (bad argument shapes, violated preconditions) raises
ValueError as usual.
"""


class FuselidarError(Exception):
    """Base class for all toolkit-specific errors."""


class BehindCameraError(FuselidarError):
    """Point has non-positive depth and cannot be projected."""


class ConvergenceError(FuselidarError):
    """An iterative routine failed to converge within its budget."""

    def __init__(self, message, best_cost=None, history=None):
        super().__init__(message)
        self.best_cost = best_cost
        self.history = history if history is not None else []


class DivergenceError(ConvergenceError):
    """Iterative cost increased repeatedly; iterate history attached."""


class DegenerateGeometryError(FuselidarError):
    """Input geometry leaves one or more degrees of freedom unobservable."""

    def __init__(self, message, null_direction=None):
        super().__init__(message)
        self.null_direction = null_direction


class NoPlaneError(FuselidarError):
    """RANSAC could not fit any plane (degenerate or too few points)."""


class PcdError(FuselidarError):
    """Base for PCD file problems; carries the byte offset of the defect."""

    def __init__(self, message, byte_offset):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class MalformedHeaderError(PcdError):
    pass


class UnsupportedLayoutError(PcdError):
    pass


class TruncatedBodyError(PcdError):
    pass


class DetectionFailedError(FuselidarError):
    """Checkerboard corner detection did not yield the expected grid."""


class InsufficientDataError(FuselidarError):
    """Too few points survived segmentation to proceed."""


class CannotBinarizeError(FuselidarError):
    """Intensity histogram is unimodal; black/white split is undefined."""


class NoCorrespondencesError(FuselidarError):
    """Edge matching produced zero surviving pairs."""


class NoDepthError(FuselidarError):
    """A mask covers no pixel with valid depth."""


class InsufficientSupportError(FuselidarError):
    """Too few inlier points to estimate a location or covariance."""
