"""Exception hierarchy shared by all modules."""


class CamriError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(CamriError, ValueError):
    pass


class DegenerateNormError(CamriError, ValueError):
    """A vector that must be normalized has zero length."""


class ConvergenceError(CamriError, RuntimeError):
    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


class UnsupportedSizeError(CamriError, ValueError):
    pass


class UnsupportedDimensionError(CamriError, ValueError):
    pass


class TrainingDivergenceError(CamriError, RuntimeError):
    def __init__(self, message, sample_index=None):
        super().__init__(message)
        self.sample_index = sample_index


class FormatError(CamriError, ValueError):
    """A file does not follow the expected binary or text layout."""


class ConsistencyError(CamriError, ValueError):
    pass


class DataIOError(CamriError, OSError):
    """A data file ended early or could not be read."""


class UndefinedRecallError(CamriError, ValueError):
    """Recall requested for a class with no true samples."""


class IncomparableMatricesError(CamriError, ValueError):
    pass


class ConfigError(CamriError, ValueError):
    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.field = field
        self.line = line
