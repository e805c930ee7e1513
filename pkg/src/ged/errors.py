"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad shapes, ranges, or arguments at a module boundary."""


class DegenerateAnnotationError(ValidationError):
    """Fewer than two annotators; combination pool cannot be built."""


class DegenerateGranularityError(ValueError):
    """All combined labels have the same edge-pixel count; granularity
    conditioning must be bypassed by the caller."""


class NumericError(RuntimeError):
    """Non-finite loss or other numeric failure during training."""

    def __init__(self, message, step=None, diagnostics=None):
        super().__init__(message)
        self.step = step
        self.diagnostics = diagnostics or {}
