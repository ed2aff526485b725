"""Exception types shared across the package."""


class CanopySRError(Exception):
    """Base class for all package errors."""


class TooFewObservations(CanopySRError):
    """A time series has fewer usable acquisitions than required."""

    def __init__(self, count: int, minimum: int = 5):
        self.count = count
        self.minimum = minimum
        super().__init__(f"{count} observations available, at least {minimum} required")


class DateOutOfRange(CanopySRError):
    """A day-of-year value falls outside the accepted window."""

    def __init__(self, value, allowed: str = "1..366"):
        self.value = value
        super().__init__(f"date {value} outside allowed range {allowed}")


class PatchFormatError(CanopySRError):
    """A patch container is missing a field or holds a malformed one."""

    def __init__(self, field: str, reason: str):
        self.field = field
        super().__init__(f"field '{field}': {reason}")


class ShapeError(CanopySRError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(CanopySRError):
    """Invalid run configuration (unknown key, bad value)."""


class NonFiniteLoss(CanopySRError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, step: int, snapshot: str | None = None):
        self.step = step
        self.snapshot = snapshot
        msg = f"non-finite loss at optimizer step {step}"
        if snapshot:
            msg += f"; diagnostic snapshot written to {snapshot}"
        super().__init__(msg)


class CheckpointError(CanopySRError):
    """Checkpoint missing, unreadable, or written by an incompatible version."""
