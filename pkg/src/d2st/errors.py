"""Exception types shared across the package."""


class D2STError(Exception):
    """Base class for all package errors."""


class DimensionError(D2STError, ValueError):
    """Shapes or channel counts do not line up."""


class ConfigurationError(D2STError, ValueError):
    """A configuration violates a documented invariant."""


class ContractError(D2STError, ValueError):
    """A precondition of an operation was not met."""


class NumericError(D2STError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class SchemaError(D2STError, ValueError):
    """A serialized artifact does not match what the reader expects."""
