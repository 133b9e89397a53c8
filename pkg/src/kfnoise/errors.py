"""Exception hierarchy shared by every module."""


class KFNoiseError(Exception):
    """Base class for all library errors."""


class DimensionError(KFNoiseError, ValueError):
    pass


class SingularMatrixError(KFNoiseError, ArithmeticError):
    pass


class SingularInnovationCovarianceError(SingularMatrixError):
    pass


class NotPositiveDefiniteError(KFNoiseError, ArithmeticError):
    pass


class NumericOverflowError(KFNoiseError, ArithmeticError):
    pass


class UnstableSimulationError(NumericOverflowError):
    pass


class InsufficientDataError(KFNoiseError, ValueError):
    pass


class UndefinedStatisticError(KFNoiseError, ArithmeticError):
    pass


class DomainError(KFNoiseError, ValueError):
    pass


class ConfigurationError(KFNoiseError, ValueError):
    pass


class IncompatibleWeightsError(KFNoiseError, ValueError):
    pass


class DatasetFormatError(KFNoiseError, ValueError):
    pass


class TrainingStalledError(KFNoiseError, RuntimeError):
    pass
