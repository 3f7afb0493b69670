"""Exception types raised across the package."""
from __future__ import annotations


class QpcError(Exception):
    """Base class for all package errors."""


class RankDeficient(QpcError):
    """A design or Gram matrix is singular beyond tolerance."""


class DegenerateColumn(QpcError):
    """A column has (numerically) zero variance."""


class DegeneratePredictor(QpcError):
    """The candidate is explained by its conditioning set (residual variance ~ 0)."""


class NotConverged(QpcError):
    def __init__(self, iterations: int, message: str | None = None):
        self.iterations = iterations
        super().__init__(message or f"solver did not converge in {iterations} iterations")


class NonPositiveLoss(QpcError):
    """EBIC is undefined for a (numerically) zero mean check loss."""


class StalledSelection(QpcError):
    """Every remaining candidate failed at some screening step."""


class CovarianceNotPD(QpcError):
    """An innovation covariance matrix failed its Cholesky factorization."""


class ParseError(QpcError):
    def __init__(self, message: str, row: int | None = None, column: int | str | None = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class UnknownTcode(ParseError):
    pass


class NonPositiveForLog(QpcError):
    def __init__(self, series: str):
        self.series = series
        super().__init__(f"series {series!r} has non-positive values under a log transform")


class UnknownSeries(QpcError):
    pass


class EmptyFilter(QpcError):
    pass


class ConfigError(QpcError):
    """Invalid run configuration (CLI exit code 2)."""
