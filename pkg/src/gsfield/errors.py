"""Exception taxonomy shared across the package."""


class GsfieldError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(GsfieldError):
    """Array dimensions do not match the declared contract."""


class InvalidPrimitiveError(GsfieldError):
    """A Gaussian primitive violates its invariants (non-finite, bad norm, ...)."""


class UsageError(GsfieldError):
    """An operation was called with inconsistent or missing arguments."""


class FormatError(GsfieldError):
    """A persisted file violates its byte-level format.

    ``offset`` is the byte position at which the violation was detected,
    when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class PlacementError(GsfieldError):
    """Synthetic scene generation could not place clusters without overlap."""


class DivergenceError(GsfieldError):
    """Optimization produced a non-finite loss. ``iteration`` is the step index."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration
