# backend/errors.py

from typing import Optional


class TrialDesignError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigError(TrialDesignError, ValueError):
    """A scenario configuration failed validation at `field_path`."""

    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        self.message = message
        super().__init__(f"{field_path}: {message}" if field_path else message)


class InfeasibleError(TrialDesignError):
    """
    A design or scenario cannot be satisfied, e.g. the counterfactual
    variance floor keeps power below target for every trial size.
    """

    def __init__(self, message: str, limiting_power: Optional[float] = None):
        self.limiting_power = limiting_power
        if limiting_power is not None:
            message = f"{message} (limiting power {limiting_power:.4f})"
        super().__init__(message)


class EstimatorUndefinedError(TrialDesignError, ArithmeticError):
    """A simulated recency estimate has a non-positive numerator or denominator."""


class ReproductionMismatchError(TrialDesignError):
    """One or more reproduced cells fell outside their stored tolerance."""

    def __init__(self, target: str, failures: list):
        self.target = target
        self.failures = failures
        super().__init__(f"{target}: {len(failures)} cell(s) out of tolerance")
