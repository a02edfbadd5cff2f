class ImlePlanError(Exception):
    """Base class for all package errors."""


class DimensionError(ImlePlanError, ValueError):
    pass


class NumericError(ImlePlanError, ArithmeticError):
    pass


class ConfigurationError(ImlePlanError, ValueError):
    pass


class DatasetFormatError(ImlePlanError, ValueError):
    pass


class RawParseError(DatasetFormatError):
    """A raw ``frame agent x y`` line could not be parsed; message carries the line number."""


class CheckpointError(ImlePlanError, ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TrainingDivergedError(ImlePlanError, FloatingPointError):
    pass


class TimerResolutionError(ImlePlanError, RuntimeError):
    pass
