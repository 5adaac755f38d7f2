"""Exception hierarchy shared by the pipeline stages."""


class RatingSpaceError(Exception):
    """Base class for all package errors."""


class ConfigError(RatingSpaceError):
    pass


class DataError(RatingSpaceError):
    pass


class MalformedRecordError(DataError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateRatingError(DataError):
    pass


class ScaleError(DataError):
    pass


class NumericalError(RatingSpaceError):
    """Divergence, non-finite values or failed convergence."""
