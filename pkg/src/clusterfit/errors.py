"""Exception types shared across the package."""


class ClusterFitError(Exception):
    """Base class for all package errors."""


class FormatError(ClusterFitError):
    """Bad magic, unsupported version, or a malformed header."""


class TruncationError(FormatError):
    """Declared payload size disagrees with the bytes actually present."""


class ValidationError(ClusterFitError, ValueError):
    """Data violates an invariant (non-finite values, labels out of range, ...)."""


class ShapeError(ValidationError):
    """Dimension mismatch between paired inputs."""


class DegenerateInputError(ValidationError):
    """Input is structurally valid but unusable (zero row, empty class, ...)."""


class InfeasibleError(ValidationError):
    """Requested configuration cannot be satisfied (k > n, total_k < classes, ...)."""


class ConfigError(ClusterFitError, ValueError):
    """Invalid configuration value."""


class DivergenceError(ClusterFitError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite loss at optimizer step {step}")


class StageError(ClusterFitError):
    """A pipeline stage failed; carries the stage name for CLI reporting."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
