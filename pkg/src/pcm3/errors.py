"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericDomainError(ArithmeticError):
    """A value left the domain of an op (log of non-positive, zero-norm vector, NaN/Inf)."""


class ContractError(RuntimeError):
    """A documented precondition was violated by the caller."""


class ConfigError(ValueError):
    """Invalid or unsupported configuration."""


class FormatError(ValueError):
    """A file on disk does not follow the expected binary layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CapabilityError(RuntimeError):
    """The model lacks a component required by the requested evaluation."""
