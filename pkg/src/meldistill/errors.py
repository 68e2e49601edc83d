"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code so failures stay diagnosable from
shell scripts: ConfigError -> 2, DataError -> 3, NumericalAbort -> 4.
"""


class MeldistillError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MeldistillError):
    """Invalid or inconsistent configuration (bad value, unknown key, bad method)."""

    exit_code = 2


class DataError(MeldistillError):
    """Ingestion failure: malformed WAV, corrupt payload, unusable corpus."""

    exit_code = 3


class NumericalAbort(MeldistillError):
    """Non-finite values appeared where the run cannot continue."""

    exit_code = 4


class ShapeError(MeldistillError):
    """Operand shapes incompatible with the requested operation."""


class ContractError(MeldistillError):
    """A caller violated an operation precondition (too few frames, empty bank, ...)."""
