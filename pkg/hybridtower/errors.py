"""
Exception hierarchy for the hybridtower package
"""


class HybridTowerError(Exception):
    """Base class for all hybridtower errors"""

    exit_code = 1


class UsageError(HybridTowerError, ValueError):
    """Caller passed arguments outside an operation's contract"""

    exit_code = 2


class ConfigError(UsageError):
    """Invalid or unknown configuration"""


class ShapeError(UsageError):
    """Tensor or input shapes do not agree"""


class QueryError(UsageError):
    """Index query rejected (empty index, dimension mismatch)"""


class DataFormatError(HybridTowerError):
    """Bad file magic/version, corrupt payload or inconsistent dataset"""

    exit_code = 3


class BuildError(DataFormatError):
    """Index build failed on its input (e.g. duplicate video ids)"""


class NumericError(HybridTowerError, ArithmeticError):
    """NaN/Inf detected or an undefined quantity (zero-norm cosine)"""


class InvariantError(HybridTowerError):
    """An internal contract was broken (e.g. a frozen parameter moved)"""


class TrainingAborted(HybridTowerError):
    """Training stopped on a non-finite loss

    The model has been restored to ``last_good_step`` before this is raised.
    """

    def __init__(self, message, last_good_step=0):
        super().__init__(message)
        self.last_good_step = last_good_step
