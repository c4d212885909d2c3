"""Exception hierarchy for pooled correlation analyses.

Everything raised on purpose by this package derives from PooledCorrError,
which is itself a ValueError so callers that only know about ValueError keep
working.
"""


class PooledCorrError(ValueError):
    """Base class for all package errors"""


class InvalidInputError(PooledCorrError):
    """A precondition on an argument was violated"""


class InsufficientStudiesError(PooledCorrError):
    """Fewer studies than the requested method needs"""

    def __init__(self, method: str, k: int, minimum: int):
        self.method = method
        self.k = k
        self.minimum = minimum
        super().__init__(f"{method} needs at least {minimum} studies, got K={k}")


class DegenerateVarianceError(PooledCorrError):
    """A variance, weight or probability mass collapsed numerically"""


class DatasetError(PooledCorrError):
    """Dataset could not be loaded, found or filtered"""

    def __init__(self, message: str, source: str | None = None, row: int | None = None):
        self.source = source
        self.row = row
        where = ""
        if source is not None:
            where = f"{source}"
            if row is not None:
                where += f", row {row}"
            where += ": "
        super().__init__(f"{where}{message}")
