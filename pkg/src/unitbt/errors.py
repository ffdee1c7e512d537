"""Exception types shared across the package."""


class UnitBTError(Exception):
    """Base class for all package errors."""


class DimensionError(UnitBTError, ValueError):
    """Operands have incompatible shapes."""


class NumericError(UnitBTError, ArithmeticError):
    """A computation produced NaN/Inf or left its valid domain."""


class ContractError(UnitBTError, ValueError):
    """A precondition of an operation was violated."""


class EmptyInputError(ContractError):
    pass


class DegenerateInputError(ContractError):
    pass


class DataError(UnitBTError):
    """Malformed or missing on-disk data (manifests, audio, checkpoints)."""
