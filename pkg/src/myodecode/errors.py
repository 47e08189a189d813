"""Exception hierarchy shared by every pipeline stage."""


class MyoDecodeError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(MyoDecodeError, ValueError):
    pass


class DegenerateInputError(MyoDecodeError, ValueError):
    """Input carries no usable information (e.g. an all-zero matrix)."""


class UndefinedSilError(MyoDecodeError, ValueError):
    """Silhouette requested with an empty spike or non-spike cluster."""


class RankDeficientError(MyoDecodeError, ValueError):
    pass


class UnassignedDofError(MyoDecodeError, RuntimeError):
    """No rotated component correlates well enough with a reference DoF."""


class UndefinedMetricError(MyoDecodeError, ValueError):
    pass


class FormatError(MyoDecodeError, ValueError):
    """A file on disk does not match its declared format."""
