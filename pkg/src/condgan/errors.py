"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: configuration and usage
problems exit 1, data and file-format problems exit 2, numeric aborts exit 3.
"""


class CondganError(Exception):
    """Base class for all package errors."""


class ConfigError(CondganError):
    """Invalid configuration value, spec, or mode of use."""


class DimensionError(CondganError):
    """Operand shapes do not conform; the message names the operands."""


class DomainError(CondganError):
    """Input value outside an operation's mathematical domain."""


class DataFormatError(CondganError):
    """Malformed or truncated data file."""


class NumericError(CondganError):
    """Non-finite value encountered; the message names the tensor or op."""
