"""Exception hierarchy. Each family maps to a CLI exit code."""


class SKPoolError(Exception):
    exit_code = 1


class ConfigError(SKPoolError):
    exit_code = 2


class DataError(SKPoolError):
    """Malformed or out-of-range input data."""

    exit_code = 3


class ParseError(DataError):
    pass


class ValidationError(DataError):
    pass


class EvaluationError(DataError):
    pass


class CheckpointError(DataError):
    pass


class NumericError(SKPoolError):
    """Non-finite values in a forward pass, loss or gradient."""

    exit_code = 4


class DimensionError(SKPoolError, ValueError):
    pass


class InvalidSegmentsError(SKPoolError, ValueError):
    pass


class InvalidLabelError(SKPoolError, ValueError):
    pass


class UsageError(SKPoolError, RuntimeError):
    pass


class ModeMismatchError(ConfigError):
    pass
