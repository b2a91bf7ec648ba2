"""Exception types raised across the library."""


class SurfelSlamError(Exception):
    """Base class for all library errors."""


class InvalidDepthError(SurfelSlamError):
    """Depth value is zero, negative, or non-finite."""


class BehindCameraError(SurfelSlamError):
    """3D point has non-positive z and cannot be projected."""


class PyramidDimensionError(SurfelSlamError):
    """Image dimensions are not divisible by 2^(levels-1)."""


class DatasetError(SurfelSlamError):
    """Missing files or malformed dataset layout."""


class ParseError(DatasetError):
    """Malformed line in an association or trajectory file."""

    def __init__(self, path, line_number, message):
        super().__init__(f"{path}:{line_number}: {message}")
        self.path = path
        self.line_number = line_number


class SegmentationFormatError(DatasetError):
    """Segmentation sidecar is inconsistent (shape or probability range)."""


class InsufficientCorrespondencesError(SurfelSlamError):
    """Too few valid residual pairs to constrain the pose."""


class TrackingLostError(SurfelSlamError):
    """Registration failed at every pyramid level or diverged."""


class InsufficientOverlapError(SurfelSlamError):
    """Trajectories share fewer than two timestamp-matched poses."""


class RegistrationFailureError(SurfelSlamError):
    """Cloud-to-cloud ICP did not converge."""
