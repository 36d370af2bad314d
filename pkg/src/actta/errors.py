"""Exception hierarchy shared across the package."""


class ActtaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ActtaError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(ActtaError, ValueError):
    """An input lies outside the domain of an operation."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NumericError(ActtaError, ArithmeticError):
    """A computation produced a non-finite value."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ContractError(ActtaError, ValueError):
    """A precondition of an operation was violated."""


class DegenerateVarianceError(ActtaError, ValueError):
    """Batch statistics cannot be estimated (e.g. batch of one)."""


class UnknownGroupError(ActtaError, KeyError):
    """A parameter group name does not exist in the model."""


class ArchitectureMismatchError(ActtaError, ValueError):
    """A saved state does not fit the model it is restored into."""


class NoSelectedSamples(ActtaError):
    """Sample selection removed every sample; the update must be skipped."""


class FormatError(ActtaError, ValueError):
    """File header is malformed (bad magic, unsupported version)."""


class TruncatedFileError(FormatError):
    """File ended before the declared payload was read."""


class InconsistentDataError(FormatError):
    """File payload disagrees with its header (shape or label range)."""


class ConfigError(ActtaError, ValueError):
    """Configuration failed validation. ``field`` is the dotted key path."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class SchemaError(ActtaError, ValueError):
    """A metrics CSV does not follow the expected column layout."""
