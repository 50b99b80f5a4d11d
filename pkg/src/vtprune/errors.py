"""Exception types shared across the package.

The CLI maps these onto exit codes: usage and file problems exit 2,
numeric blow-ups exit 3, invariant failures in the self-test exit 1.
"""


class VtpruneError(Exception):
    """Base class for all package errors."""


class ShapeError(VtpruneError, ValueError):
    """Operand dimensions are inconsistent with the operation."""


class ConfigError(VtpruneError, ValueError):
    """A configuration value violates a documented constraint."""


class StateError(VtpruneError, RuntimeError):
    """An operation was called in an invalid sequence (e.g. double insert)."""


class DataFormatError(VtpruneError, ValueError):
    """A persisted file does not match the documented format or version."""


class NumericError(VtpruneError, RuntimeError):
    """A non-finite value appeared where the pipeline requires finite math."""
