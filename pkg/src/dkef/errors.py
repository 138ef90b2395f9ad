"""Exception types raised across the package.

Each one carries an ``exit_code`` used by the command line front end:
2 for data problems, 3 for numerical failures.
"""


class DkefError(Exception):
    exit_code = 1


class DataError(DkefError):
    exit_code = 2


class NumericalError(DkefError):
    exit_code = 3


class ShapeMismatch(DkefError, ValueError):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class NotSymmetric(NumericalError, ValueError):
    pass


class NonFinite(NumericalError, ValueError):
    pass


class SingularAfterJitter(NumericalError):
    pass


class EmptyBatch(DataError, ValueError):
    pass


class DatasetTooSmall(DataError, ValueError):
    pass


class DivergedLoss(NumericalError):
    pass


class EmptyCluster(NumericalError):
    pass


class TooFewRows(DataError, ValueError):
    pass


class UnknownName(DkefError, KeyError):
    pass


class ScoreUnavailable(DkefError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None, col=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if col is not None:
            where.append(f"col {col}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.col = col


class NonNumeric(ParseError):
    pass


class EmptyFile(DataError):
    pass


class WrongDimension(DataError, ValueError):
    pass


class ModelFormatError(DataError):
    pass
