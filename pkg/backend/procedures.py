# backend/procedures.py

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Union

from backend.config import MARGIN_CONFIDENCE_QUANTILE
from backend.stat_core import (
    ArmSummary,
    LogIncidenceEstimate,
    estimate_log_incidence,
    log_rate_ratio_se,
    normal_quantile,
)


@dataclass(frozen=True)
class RaeDesignSpec:
    """
    Relative absolute efficacy hypothesis K0: RAE <= gamma_null, powered
    against RAE = gamma_alt.
    """

    gamma_null: float
    gamma_alt: float
    alpha: float = 0.025
    target_power: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.gamma_null < self.gamma_alt:
            raise ValueError("need 0 < gamma_null < gamma_alt")
        if not 0.0 < self.alpha < 0.5:
            raise ValueError(f"alpha must lie in (0, 0.5), got {self.alpha}")
        if not 0.5 < self.target_power < 1.0:
            raise ValueError(f"target_power must lie in (0.5, 1), got {self.target_power}")

    @property
    def z_alpha(self) -> float:
        return normal_quantile(self.alpha)

    @property
    def z_power(self) -> float:
        return normal_quantile(self.target_power)


class StepReached(str, Enum):
    STEP1_FAIL = "step1_fail"
    STEP2 = "step2"
    SINGLE_STEP = "single_step"
    NO_MARGIN = "no_margin"


@dataclass(frozen=True)
class TestOutcome:
    __test__ = False  # not a pytest class

    statistics: Dict[str, float] = field(default_factory=dict)
    reject: bool = False
    step_reached: StepReached = StepReached.SINGLE_STEP


@dataclass(frozen=True)
class NiMargin:
    """A 95%-95% margin; a non-positive delta means the history supports no margin."""

    delta: float

    @property
    def available(self) -> bool:
        return self.delta > 0


# ---------------------------------------------------------------------
# Non-inferiority
# ---------------------------------------------------------------------


def ni_margin_95_95(hist_placebo: ArmSummary, hist_active: ArmSummary, gamma_null: float) -> NiMargin:
    log_effect = (
        estimate_log_incidence(hist_placebo).log_rate
        - estimate_log_incidence(hist_active).log_rate
    )
    se = log_rate_ratio_se(hist_placebo, hist_active)
    lower = log_effect + normal_quantile(MARGIN_CONFIDENCE_QUANTILE) * se
    return NiMargin(delta=(1.0 - gamma_null) * lower)


def ni_test(
    trial_E: ArmSummary,
    trial_A: ArmSummary,
    margin: Union[NiMargin, float],
    alpha: float,
) -> TestOutcome:
    if not isinstance(margin, NiMargin):
        margin = NiMargin(delta=float(margin))
    if not margin.available:
        return TestOutcome(
            statistics={"delta": margin.delta},
            reject=False,
            step_reached=StepReached.NO_MARGIN,
        )

    contrast = estimate_log_incidence(trial_E).log_rate - estimate_log_incidence(trial_A).log_rate
    t_ni = (contrast - margin.delta) / log_rate_ratio_se(trial_E, trial_A)
    return TestOutcome(
        statistics={"T_NI": t_ni, "delta": margin.delta},
        reject=t_ni <= normal_quantile(alpha),
        step_reached=StepReached.SINGLE_STEP,
    )


# ---------------------------------------------------------------------
# Active control + counterfactual placebo (two-step)
# ---------------------------------------------------------------------


def _two_step(
    t_pa: float,
    t_cf: Callable[[], float],
    alpha: float,
    names: tuple,
) -> TestOutcome:
    # z_alpha < 0, so "T >= -z_alpha" asks for the upper tail
    critical = -normal_quantile(alpha)
    if t_pa < critical:
        return TestOutcome(
            statistics={names[0]: t_pa},
            reject=False,
            step_reached=StepReached.STEP1_FAIL,
        )
    t_cf_value = t_cf()
    return TestOutcome(
        statistics={names[0]: t_pa, names[1]: t_cf_value},
        reject=t_cf_value >= critical,
        step_reached=StepReached.STEP2,
    )


def accf_two_step_test(
    cf: LogIncidenceEstimate,
    trial_E: ArmSummary,
    trial_A: ArmSummary,
    gamma_null: float,
    alpha: float,
) -> TestOutcome:
    est_E = estimate_log_incidence(trial_E)
    est_A = estimate_log_incidence(trial_A)

    t_pa = (cf.log_rate - est_A.log_rate) / math.sqrt(cf.variance + est_A.variance)

    def t_cf() -> float:
        numerator = (1.0 - gamma_null) * cf.log_rate - est_E.log_rate + gamma_null * est_A.log_rate
        v_gamma = (1.0 - gamma_null) ** 2 * cf.variance + est_E.variance + gamma_null ** 2 * est_A.variance
        return numerator / math.sqrt(v_gamma)

    return _two_step(t_pa, t_cf, alpha, ("T_PA", "T_CF"))


def conservative_lower_log_rate(cf: LogIncidenceEstimate) -> float:
    """log of the lower 95% confidence bound of the counterfactual incidence."""
    return cf.log_rate + normal_quantile(MARGIN_CONFIDENCE_QUANTILE) * cf.std_err


def conservative_accf_two_step_test(
    cf: LogIncidenceEstimate,
    trial_E: ArmSummary,
    trial_A: ArmSummary,
    gamma_null: float,
    alpha: float,
) -> TestOutcome:
    """
    Same two steps with the counterfactual replaced by its lower 95% bound,
    which is then treated as a constant: no cf variance in either denominator.
    """
    est_E = estimate_log_incidence(trial_E)
    est_A = estimate_log_incidence(trial_A)
    log_lower = conservative_lower_log_rate(cf)

    t_pa = (log_lower - est_A.log_rate) / est_A.std_err

    def t_cf() -> float:
        numerator = (1.0 - gamma_null) * log_lower - est_E.log_rate + gamma_null * est_A.log_rate
        return numerator / math.sqrt(est_E.variance + gamma_null ** 2 * est_A.variance)

    return _two_step(t_pa, t_cf, alpha, ("T_PA'", "T_CF'"))


# ---------------------------------------------------------------------
# Single arm against the counterfactual
# ---------------------------------------------------------------------


def single_arm_test(
    cf: LogIncidenceEstimate,
    trial_E: ArmSummary,
    gamma_E: float,
    alpha: float,
) -> TestOutcome:
    """
    H0: log lambda_P - log lambda_E <= gamma_E. The statistic is centred so
    that it is 0 on the null boundary lambda_E = lambda_P * exp(-gamma_E) and
    strongly negative under high efficacy; reject when T^E <= z_alpha.
    """
    if gamma_E < 0:
        raise ValueError(f"gamma_E must be non-negative, got {gamma_E}")
    est_E = estimate_log_incidence(trial_E)
    t_e = (est_E.log_rate - cf.log_rate + gamma_E) / math.sqrt(cf.variance + est_E.variance)
    return TestOutcome(
        statistics={"T_E": t_e},
        reject=t_e <= normal_quantile(alpha),
        step_reached=StepReached.SINGLE_STEP,
    )
