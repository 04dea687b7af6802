"""Exception hierarchy shared by every module.

Every error raised on purpose by this package derives from :class:`OTFSError`,
so callers (and the CLI) can tell domain failures from programming bugs.
"""

from __future__ import annotations


class OTFSError(Exception):
    """Base class for all package errors."""


class ShapeError(OTFSError, ValueError):
    """Array dimensions do not line up."""


class ConvergenceError(OTFSError):
    """Sinkhorn ran out of iterations before reaching the tolerance.

    ``best`` holds the iterate with the smallest marginal violation seen.
    """

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class InstabilityError(OTFSError):
    """Scaling potentials became non-finite."""


class DegeneratePlanError(OTFSError, ValueError):
    """A transport plan (or the data feeding one) is degenerate."""


class PreconditionError(OTFSError, ValueError):
    """An operation was called in a state it does not accept."""


class DegenerateClusteringError(OTFSError, ValueError):
    """More clusters requested than distinct points."""


class MetricUndefinedError(OTFSError, ValueError):
    """A metric is not defined for the given input."""


class NormalizationError(OTFSError, ValueError):
    """A zero-norm row cannot be normalized."""


class SampleBiasError(OTFSError, ValueError):
    """Episode layout violates the queries-per-class > shots rule."""


class CapacityError(OTFSError, ValueError):
    """Not enough samples to satisfy a request."""


class FormatError(OTFSError, ValueError):
    """Malformed embedding or matrix file.

    ``offset`` is the byte offset at which the problem was detected (for
    text files, the start of the offending line), when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(OTFSError, ValueError):
    """Unknown or invalid configuration key."""
