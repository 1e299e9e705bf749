"""Exception types raised across the package."""


class RDError(Exception):
    """Base class for all rdistill errors."""


class InvalidInput(RDError, ValueError):
    pass


class ShapeMismatch(RDError, ValueError):
    pass


class DegenerateBatch(RDError, ValueError):
    """Batch too small to center (n < 2)."""


class DegenerateFeatures(RDError, ValueError):
    """Centered Gram matrix is numerically zero, so CKA is undefined."""


class InvalidLabel(RDError, ValueError):
    pass


class InvalidTemperature(RDError, ValueError):
    pass


class InvalidEpoch(RDError, ValueError):
    pass


class ConfigError(RDError, ValueError):
    """Invalid configuration. ``violations`` lists every problem found."""

    def __init__(self, message: str, violations: list[str] | None = None):
        super().__init__(message)
        self.violations = violations or [message]


class SplitError(RDError, ValueError):
    pass


class DegeneratePlane(RDError, ValueError):
    pass


class TrainingAborted(RDError, RuntimeError):
    """Raised when a run hits a non-finite loss."""

    def __init__(self, message: str, diagnostic: dict | None = None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}
