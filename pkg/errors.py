"""Exception hierarchy shared by every hpbmag module.

Each error carries the process exit code the CLI should return for it.
"""
from typing import Any, Optional


class HPBMagError(Exception):
    exit_code = 2


class ConfigError(HPBMagError, ValueError):
    exit_code = 1


class DataIOError(HPBMagError):
    exit_code = 3


class AtomicStructureError(HPBMagError, ValueError):
    pass


class IntegrationError(HPBMagError):
    def __init__(self, message: str, velocity: float = float("nan"),
                 detuning: float = float("nan"), time: float = float("nan")):
        super().__init__(f"{message} (v={velocity:.6g} m/s, detuning={detuning:.6g} MHz, t={time:.6g} s)")
        self.velocity = velocity
        self.detuning = detuning
        self.time = time


class InvariantViolation(IntegrationError):
    pass


class PeakFitError(HPBMagError):
    def __init__(self, message: str, last_iterate: Optional[Any] = None):
        super().__init__(message)
        self.last_iterate = last_iterate


class CalibrationError(HPBMagError, ValueError):
    pass


class EstimationError(HPBMagError):
    pass


class UnderConstrainedError(EstimationError):
    pass


class BracketError(EstimationError):
    pass


class MonteCarloError(EstimationError):
    def __init__(self, message: str, failures: int = 0, trials: int = 0):
        super().__init__(message)
        self.failures = failures
        self.trials = trials
