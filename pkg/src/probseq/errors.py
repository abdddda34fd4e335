"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to, so the command layer can
translate failures without a lookup table.
"""


class ProbseqError(Exception):
    exit_code = 1


class ConfigError(ProbseqError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    """Operand shapes do not fit together."""


class ContractError(ConfigError):
    """A precondition of an API call was violated."""


class EmptySessionError(ConfigError):
    """A session, split or reduction has no valid positions."""


class NumericFault(ProbseqError, ArithmeticError):
    exit_code = 3


class DomainError(NumericFault, ValueError):
    """Operand outside the domain of a function (log of 0, negative sigma ...)."""

    def __init__(self, message, index=None):
        if index is not None:
            message = f"{message} at index {index}"
        super().__init__(message)
        self.index = index


class DegenerateRowError(NumericFault):
    """A valid attention query has no valid key to attend to."""


class UnsupportedMetricError(ConfigError):
    pass


class InsufficientDataError(ConfigError):
    pass


class DataFormatError(ProbseqError):
    exit_code = 4


class ParseError(DataFormatError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(DataFormatError):
    pass


class UndefinedCorrelationError(InsufficientDataError):
    """A coordinate has zero variance."""
