"""Exception types shared across the package."""


class SoilgenError(Exception):
    """Base class for all package errors."""


class ParameterError(SoilgenError, ValueError):
    """An argument is outside its legal range."""


class ShapeError(SoilgenError, ValueError):
    """Array dimensions are inconsistent with the operation's contract."""


class AnnotationError(SoilgenError, ValueError):
    """A polygon annotation is malformed (e.g. fewer than 3 vertices)."""


class ParseError(SoilgenError, ValueError):
    """A layer token or architecture file could not be parsed."""

    def __init__(self, message, token=None, position=None):
        super().__init__(message)
        self.token = token
        self.position = position


class ArchitectureError(SoilgenError, ValueError):
    """An architecture descriptor failed validation."""


class StateError(SoilgenError, RuntimeError):
    """An operation was invoked in the wrong order (e.g. backward before forward)."""


class DivergenceError(SoilgenError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DependencyError(SoilgenError, RuntimeError):
    """A required model is untrained or missing."""


class DataError(SoilgenError, ValueError):
    """Input data violates the operation's preconditions."""


class ManifestError(SoilgenError, ValueError):
    """A dataset directory or manifest is inconsistent."""

    def __init__(self, message, entry_ids=()):
        super().__init__(message)
        self.entry_ids = list(entry_ids)


class WriteError(SoilgenError, OSError):
    """A dataset write failed; carries the manifest of entries written so far."""

    def __init__(self, message, partial_manifest=None):
        super().__init__(message)
        self.partial_manifest = partial_manifest


class CheckpointError(SoilgenError, ValueError):
    """A checkpoint is unreadable or does not match the requested architecture."""


class ConfigError(SoilgenError, ValueError):
    """A run configuration key is unknown or out of range."""


class UndefinedMetricError(SoilgenError, ValueError):
    """A metric was requested on an empty accumulation."""
