"""Exception hierarchy. Each family maps to a distinct CLI exit code."""


class SepsisRLError(Exception):
    exit_code = 1


class ConfigError(SepsisRLError):
    exit_code = 2


class DataError(SepsisRLError):
    exit_code = 3


class DimensionError(DataError, ValueError):
    pass


class NumericError(SepsisRLError, ArithmeticError):
    exit_code = 4


class DivergenceError(NumericError):
    pass


class CheckpointError(DataError):
    pass


class MissingArtifactError(ConfigError):
    """An upstream stage has not produced the file a later stage needs."""


IO_EXIT_CODE = 5
