"""Error types shared across the package.

The CLI maps these onto exit codes: usage/validation errors -> 1,
I/O and file-format errors -> 2, compute/transform failures -> 3.
"""


class QspError(Exception):
    """Base class for all package errors."""


class InvalidArgument(QspError):
    """A value violates a documented precondition."""


class InvalidConfig(InvalidArgument):
    """A bit-width or detector configuration is incomplete or inconsistent."""


class IoError(QspError):
    """A required file is missing or unreadable."""


class ParseError(IoError):
    """A file exists but its contents do not match the expected format."""


class ArchiveError(IoError):
    """A weight archive fails manifest validation."""


class InvalidGraph(QspError):
    """A graph violates IR invariants (cycle, dangling edge, shape clash)."""


class UnsupportedTransform(QspError):
    """A compiler pass cannot rewrite a node without changing semantics."""


class UnsupportedWidth(QspError):
    """An accumulator would need more than 64 bits."""


class InsufficientMatches(QspError):
    """Too few correspondences to estimate a pose or homography."""


class EstimationFailed(InsufficientMatches):
    """Homography estimation could not be attempted."""


class NoDepth(QspError):
    """A keypoint has no valid depth measurement."""


class UndefinedMetric(QspError):
    """A metric has no value on this input (no pairs survive filtering)."""
