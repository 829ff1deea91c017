"""Exception types shared across the package.

Each CLI-facing error carries the process exit code it maps to.
"""


class SBMError(Exception):
    exit_code = 1


class DimensionError(SBMError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(SBMError, ValueError):
    """Input outside an operation's mathematical domain (strict mode only)."""


class ContractError(SBMError, RuntimeError):
    """An operation was called in a way its contract forbids."""


class ConfigError(SBMError, ValueError):
    exit_code = 2


class InputError(SBMError, ValueError):
    """Bad data: wrong sample rate, non-finite spectra, missing files."""

    exit_code = 3


class MetricError(InputError):
    pass


class NumericalError(SBMError, ArithmeticError):
    """Non-finite loss or gradient."""

    exit_code = 4
