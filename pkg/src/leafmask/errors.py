"""Exception hierarchy.

Validation-type errors (bad shapes, bad configs, malformed files) map to CLI
exit code 2; everything else maps to exit code 1.
"""


class LeafMaskError(Exception):
    exit_code = 1


class ValidationError(LeafMaskError):
    exit_code = 2


class ShapeError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class InvalidBoxError(ValidationError):
    pass


class FormatError(ValidationError):
    """Malformed LMT/CSV/raster input. ``offset`` is the byte offset, if known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UndefinedMetricError(ValidationError):
    pass


class UsageError(LeafMaskError):
    pass


class DivergenceError(LeafMaskError):
    def __init__(self, iteration, message="non-finite loss"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration
