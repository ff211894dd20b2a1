"""Exception hierarchy shared across the package.

The CLI maps each family onto a fixed exit code (usage 2, I/O 3, numeric 4).
"""


class TedioError(Exception):
    exit_code = 1


class UsageError(TedioError, ValueError):
    exit_code = 2


class ConfigError(UsageError):
    pass


class TDTIOError(TedioError, OSError):
    exit_code = 3


class NumericError(TedioError, ArithmeticError):
    exit_code = 4


class DimensionError(NumericError, ValueError):
    """Raised on any shape inconsistency; message names the offending shapes."""


class TrainingError(NumericError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite training loss {loss} at step {step}")
        self.step = step
        self.loss = loss


class RefinementError(NumericError):
    def __init__(self, t, iteration, what="loss"):
        super().__init__(f"non-finite {what} during refinement at t={t}, iter={iteration}")
        self.t = t
        self.iteration = iteration
