"""Exception hierarchy shared by the pipeline stages.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class OdomError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(OdomError, ValueError):
    pass


class DataError(OdomError, ValueError):
    pass


class InvalidPointError(DataError):
    """A point with zero (or non-finite) norm was given where a direction is needed."""


class ParseError(DataError):
    def __init__(self, path, record, message):
        super().__init__(f"{path}: record {record}: {message}")
        self.path = path
        self.record = record


class NumericalError(OdomError, ArithmeticError):
    pass


class RankDeficiencyError(NumericalError):
    def __init__(self, nullity, message=None):
        super().__init__(message or f"information matrix is rank deficient "
                         f"(unconstrained subspace dimension {nullity})")
        self.nullity = nullity
