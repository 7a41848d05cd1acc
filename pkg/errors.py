"""
PINF ERRORS
Exception hierarchy shared by every module, plus the CLI exit codes.
"""

from enum import IntEnum
from typing import Optional


class ExitCode(IntEnum):
    OK = 0
    CONFIG_ERROR = 2
    NUMERIC_FAILURE = 3
    ACCEPTANCE_FAILURE = 4


class PinfError(Exception):
    """Base class for all solver errors"""
    exit_code = ExitCode.NUMERIC_FAILURE


class ConfigurationError(PinfError):
    """Invalid configuration, unknown names, unregistered variables"""
    exit_code = ExitCode.CONFIG_ERROR

    def __init__(self, message: str, problems: Optional[list[str]] = None):
        self.problems = problems or [message]
        super().__init__(message)


class ShapeError(ConfigurationError):
    """Dimension mismatch between a computation and its inputs"""


class NumericFailureError(PinfError):
    """A NaN or Inf showed up during evaluation"""

    def __init__(
        self,
        message: str,
        *,
        primitive: Optional[str] = None,
        time: Optional[float] = None,
        index: Optional[int] = None,
        parameter: Optional[str] = None,
    ):
        self.primitive = primitive
        self.time = time
        self.index = index
        self.parameter = parameter
        details = []
        if primitive is not None:
            details.append(f"primitive={primitive}")
        if time is not None:
            details.append(f"t={time:.6g}")
        if index is not None:
            details.append(f"index={index}")
        if parameter is not None:
            details.append(f"parameter={parameter}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)


class SolverDivergenceError(PinfError):
    """Adaptive integration ran out of steps"""

    def __init__(self, message: str, last_good_time: float):
        self.last_good_time = last_good_time
        super().__init__(f"{message} (last good t={last_good_time:.6g})")


class TrainingAbortedError(PinfError):
    """Too many consecutive failed batches"""


class AcceptanceFailure(PinfError):
    """An invariant or acceptance threshold did not hold"""
    exit_code = ExitCode.ACCEPTANCE_FAILURE
