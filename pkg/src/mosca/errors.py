"""Exception hierarchy shared by every stage."""


class MoscaError(Exception):
    """Base class for all library errors."""


class DegenerateBlend(MoscaError):
    """Weighted dual-quaternion sum has (near) zero real part."""


class InsufficientNodes(MoscaError):
    """Not enough scaffold nodes for the requested neighbourhood size."""


class FormatError(MoscaError):
    """A file does not match its declared binary or text layout."""


class InconsistentLength(MoscaError):
    """Frame counts disagree between inputs."""


class NonPositiveDepth(MoscaError):
    """A depth that must be positive is zero, negative or non-finite."""


class DegenerateGeometry(MoscaError):
    """Two-view or multi-view geometry is not observable from the data."""


class NonFiniteObjective(MoscaError):
    """An objective or its gradient produced NaN/inf during optimisation."""


class BehindCamera(MoscaError):
    """A point that must be projected lies at or behind the image plane."""
