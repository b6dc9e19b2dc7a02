"""Exception hierarchy shared by all modules."""


class ReidentError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(ReidentError, ValueError):
    """Arguments or data violate a documented precondition."""


class IngestError(ReidentError):
    """A file could not be read or decoded."""


class SpecError(ValidationError):
    """A network specification is not realizable for its input shape."""


class TrainingError(ReidentError, RuntimeError):
    """Optimization diverged (non-finite loss or weights)."""


class ConfigError(ValidationError):
    """An experiment configuration file is malformed."""
