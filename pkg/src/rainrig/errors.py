"""Exception hierarchy shared across the pipeline."""


class RainrigError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(RainrigError):
    """Invalid configuration value or combination."""


class InsufficientDataError(RainrigError):
    """Too few inputs to run an estimation."""


class DegenerateInputError(RainrigError):
    """Inputs are rank-deficient / geometrically degenerate."""


class SingularMatrixError(RainrigError):
    """A matrix that must be invertible is singular."""


class DetectionError(RainrigError):
    """Marker detection found fewer points than required."""

    def __init__(self, message: str, found: int = 0, expected: int = 0):
        super().__init__(message)
        self.found = found
        self.expected = expected


class SamplingError(RainrigError):
    """Droplet sampling could not reach the requested coverage."""


class DeviceError(RainrigError):
    """A capture device (display/camera/sprayer) failed."""


class CaptureAborted(RainrigError):
    """A capture pass stopped early; partial records are attached."""

    def __init__(self, message: str, partial_records: list, cause: Exception | None = None):
        super().__init__(message)
        self.partial_records = partial_records
        self.cause = cause


class PairingError(RainrigError):
    """Clear/rainy record sets do not line up."""

    def __init__(self, message: str, orphan_ids: list[str]):
        super().__init__(message)
        self.orphan_ids = orphan_ids


class ShapeError(RainrigError):
    """Array shape violates an operation's contract."""


class MetricError(RainrigError):
    """A metric is undefined for the given inputs."""


class CheckpointError(RainrigError):
    """Checkpoint missing, incompatible, or corrupt."""


class TrainingDiverged(RainrigError):
    """A non-finite loss was observed; training aborted."""

    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
