"""Exception hierarchy shared across the package."""


class SudaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SudaError, ValueError):
    """Operand or argument shapes are incompatible."""


class DomainError(SudaError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class ContractError(SudaError, ValueError):
    """An API precondition was violated (wrong tape, non-scalar root, ...)."""


class NumericError(SudaError, ArithmeticError):
    """A computation produced or received a non-finite value."""


class ConfigError(SudaError, ValueError):
    """Invalid or unknown configuration."""


class DataError(SudaError, ValueError):
    """Invalid dataset contents (bad labels, mismatched lengths, ...)."""


class FormatError(SudaError, ValueError):
    """A serialized file is malformed.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConsistencyError(SudaError, ValueError):
    """An internal cross-check failed (e.g. imaginary residue after an inverse transform)."""


class DegenerateInputError(SudaError, ValueError):
    """An input is degenerate for the requested operation (e.g. zero vector for cosine)."""
