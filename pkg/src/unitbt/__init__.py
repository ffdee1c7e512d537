"""Back translation for end-to-end speech translation over discrete units."""

from .errors import (
    ContractError,
    DataError,
    DegenerateInputError,
    DimensionError,
    EmptyInputError,
    NumericError,
    UnitBTError,
)

__version__ = "0.1.0"
