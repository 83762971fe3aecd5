"""Exceptions raised by `pmc_volatility`.

Every error derives from `PmcError` and from the built-in exception that
best describes it, so callers can catch either.

"""
from typing import Optional


class PmcError(Exception):
    """Base class of all the errors raised by the package."""


class InvalidInputError(PmcError, ValueError):
    """Malformed input data.

    Attributes
    ----------
    index
        Position of the offending element in the input sequence, if known.
    line
        Line of the offending record in the input file, if known.

    """

    def __init__(
        self, message: str, index: Optional[int] = None, line: Optional[int] = None
    ):
        super().__init__(message)
        self.index = index
        self.line = line


class DegenerateDataError(PmcError, ValueError):
    """The data cannot be normalized (zero variance on the fit segment)."""


class ConfigError(PmcError, ValueError):
    """Invalid configuration, model specification or model file."""


class DomainError(PmcError, ArithmeticError):
    """An operation was evaluated outside of its domain."""

    def __init__(self, message: str, node_id: Optional[int] = None):
        super().__init__(message)
        self.node_id = node_id


class NonFiniteError(PmcError, FloatingPointError):
    """A computation produced `nan` or `inf`."""

    def __init__(self, message: str, node_id: Optional[int] = None):
        super().__init__(message)
        self.node_id = node_id


class TrainingDivergedError(NonFiniteError):
    """The training loss became nonfinite."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class NumericalDegeneracyError(PmcError, ArithmeticError):
    """The unnormalized filter weights are all zero."""


class DegenerateEvidenceError(PmcError, ValueError):
    """The observations, or a conditioning event, have probability zero."""


class UsageError(PmcError, RuntimeError):
    """An API was called in a way that cannot be honored."""
