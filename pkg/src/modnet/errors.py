"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration problems exit with 2,
numeric/runtime failures with 3 and I/O or file-format problems with 4.
"""


class ModnetError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(ModnetError):
    """Invalid configuration, vocabulary/kind mismatch, unknown language, ..."""


class RoutingError(ConfigurationError):
    """A direction cannot be served by the assembled model."""


class ContractViolation(ModnetError, ValueError):
    """A caller broke an operation precondition (shape mismatch, bad step, ...)."""


class NumericFailure(ModnetError):
    """NaN/Inf encountered where all values must stay finite."""


class CheckpointError(ModnetError, IOError):
    """Corrupt, truncated or version-incompatible checkpoint file."""


class PivotError(ModnetError):
    """A pivot translation leg produced no usable intermediate hypothesis."""
