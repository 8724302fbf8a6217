"""Exception hierarchy shared across the package."""


class GhostPoseError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(GhostPoseError, ValueError):
    """A config value is invalid or inconsistent with the data it targets."""


class PlacementError(GhostPoseError, ValueError):
    """A trigger patch does not fit inside the image at the requested spot."""


class CapabilityError(GhostPoseError, TypeError):
    """An attack or label design was requested for a model kind that cannot
    represent it (e.g. empty-heatmap labels on a coordinate regressor)."""


class ContaminationError(GhostPoseError, ValueError):
    """Train and evaluation data share sample ids."""


class UndefinedScoreError(GhostPoseError, ValueError):
    """A metric is undefined for the given sample (e.g. no visible keypoints,
    zero clean utility for a ratio)."""


class AnnotationError(GhostPoseError, ValueError):
    """An annotation file is malformed or references missing resources."""
