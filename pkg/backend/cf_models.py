# backend/cf_models.py

import logging
import math
from dataclasses import dataclass
from typing import ClassVar, Tuple, Union

import numpy as np

from backend.config import DAYS_PER_YEAR, SE_FRR, SE_MDRI_RELATIVE
from backend.errors import EstimatorUndefinedError, InfeasibleError
from backend.stat_core import (
    ArmSummary,
    LogIncidenceEstimate,
    estimate_log_incidence,
    poisson_draw,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------
# Model variants
# ---------------------------------------------------------------------


@dataclass(frozen=True)
class ExternalFollowUp:
    """Counterfactual placebo incidence from prospective follow-up of an external cohort."""

    follow_up_py: float
    kind: ClassVar[str] = "external_follow_up"

    def __post_init__(self):
        if self.follow_up_py <= 0:
            raise ValueError(f"follow_up_py must be positive, got {self.follow_up_py}")


@dataclass(frozen=True)
class RecencyScreening:
    """
    Counterfactual placebo incidence from a recency assay applied to the
    HIV-positive screenees of the trial. Durations are in years.
    """

    prevalence_p: float
    mdri_omega_T: float
    frr_beta_T: float
    cutoff_T: float
    se_mdri: float = 0.0
    se_frr: float = 0.0
    kind: ClassVar[str] = "recency_screening"

    def __post_init__(self):
        if not 0.0 < self.prevalence_p < 1.0:
            raise ValueError(f"prevalence must lie in (0, 1), got {self.prevalence_p}")
        if not 0.0 <= self.frr_beta_T < 1.0:
            raise ValueError(f"FRR must lie in [0, 1), got {self.frr_beta_T}")
        if not 0.0 < self.mdri_omega_T < self.cutoff_T:
            raise ValueError("MDRI must be positive and shorter than the cutoff T")
        if self.recency_window <= 0:
            raise ValueError("MDRI - FRR * T must be positive")
        if self.se_mdri < 0 or self.se_frr < 0:
            raise ValueError("assay standard errors must be non-negative")

    @property
    def recency_window(self) -> float:
        return self.mdri_omega_T - self.frr_beta_T * self.cutoff_T


@dataclass(frozen=True)
class FixedVariance:
    """Counterfactual estimate with a known variance c_p0 / N + c_p1."""

    c_p0: float
    c_p1: float
    kind: ClassVar[str] = "fixed_variance"

    def __post_init__(self):
        if self.c_p0 < 0 or self.c_p1 < 0:
            raise ValueError("variance constants must be non-negative")
        if self.c_p0 == 0 and self.c_p1 == 0:
            raise ValueError("variance constants cannot both be zero")


CfPlaceboModel = Union[ExternalFollowUp, RecencyScreening, FixedVariance]


@dataclass(frozen=True)
class VarianceConstants:
    c_p0: float
    c_p1: float

    def __post_init__(self):
        if not (math.isfinite(self.c_p0) and math.isfinite(self.c_p1)):
            raise ValueError("variance constants must be finite")
        if self.c_p0 < 0 or self.c_p1 < 0:
            raise ValueError("variance constants must be non-negative")
        if self.c_p0 == 0 and self.c_p1 == 0:
            raise ValueError("variance constants cannot both be zero")

    def variance(self, n: float) -> float:
        """Variance of the log counterfactual estimate for a trial of n PYs."""
        return self.c_p0 / n + self.c_p1


@dataclass(frozen=True)
class ScreeningCounts:
    n_screened: int
    n_hiv_pos: int
    expected_recent: float


def recency_model_from_assay(
    prevalence: float,
    mdri_days: float,
    frr: float,
    cutoff_years: float,
    se_mdri_relative: float = SE_MDRI_RELATIVE,
    se_frr: float = SE_FRR,
) -> RecencyScreening:
    mdri_years = mdri_days / DAYS_PER_YEAR
    return RecencyScreening(
        prevalence_p=prevalence,
        mdri_omega_T=mdri_years,
        frr_beta_T=frr,
        cutoff_T=cutoff_years,
        se_mdri=se_mdri_relative * mdri_years,
        se_frr=se_frr,
    )


# ---------------------------------------------------------------------
# Recency arithmetic
# ---------------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def recency_prob_recent(lambda_P: float, model: RecencyScreening) -> float:
    if lambda_P < 0:
        raise ValueError(f"lambda_P must be non-negative, got {lambda_P}")
    p = model.prevalence_p
    prob = model.frr_beta_T + lambda_P * (1.0 - p) * model.recency_window / p
    if prob >= 1.0:
        raise InfeasibleError(
            f"probability of testing recent is {prob:.4f} >= 1 at lambda_P={lambda_P}"
        )
    return prob


def _recency_variance_terms(
    p: float,
    prob_recent: float,
    frr: float,
    window: float,
    se_mdri: float,
    se_frr: float,
) -> Tuple[float, float]:
    """
    Returns (per-screenee leading constant, constant floor) of the variance
    of the log cross-sectional incidence estimate.

    The printed floor term sigma_beta^2 * {(W)^2 / ((P_R - beta)^2 (W)^2)}
    reduces to sigma_beta^2 / (P_R - beta)^2; the reduced form is used.
    """
    excess = prob_recent - frr
    c0_per_screenee = (
        prob_recent * (1.0 - prob_recent) / excess ** 2
        + 1.0 / (1.0 - p)
        + (1.0 - p) * se_frr ** 2 / excess ** 2
    ) / p
    c1 = se_mdri ** 2 / window ** 2 + se_frr ** 2 / excess ** 2
    return c0_per_screenee, c1


def variance_constants(model: CfPlaceboModel, lambda_P: float, follow_up_tau: float) -> VarianceConstants:
    """
    Variance constants (c_p0, c_p1) with sigma_P^2 = c_p0 / N + c_p1, N being
    total trial PYs. For recency screening every HIV-negative screenee
    enrols for tau years, so n_screened = N / ((1 - p) tau).
    """
    if lambda_P <= 0:
        raise ValueError(f"lambda_P must be positive, got {lambda_P}")
    if follow_up_tau <= 0:
        raise ValueError(f"follow-up duration must be positive, got {follow_up_tau}")

    if isinstance(model, ExternalFollowUp):
        return VarianceConstants(c_p0=0.0, c_p1=1.0 / (lambda_P * model.follow_up_py))

    if isinstance(model, RecencyScreening):
        prob_recent = recency_prob_recent(lambda_P, model)
        c0_per_screenee, c1 = _recency_variance_terms(
            model.prevalence_p,
            prob_recent,
            model.frr_beta_T,
            model.recency_window,
            model.se_mdri,
            model.se_frr,
        )
        return VarianceConstants(
            c_p0=c0_per_screenee * (1.0 - model.prevalence_p) * follow_up_tau,
            c_p1=c1,
        )

    if isinstance(model, FixedVariance):
        return VarianceConstants(c_p0=model.c_p0, c_p1=model.c_p1)

    raise TypeError(f"Unknown counterfactual model: {type(model).__name__}")


def screening_counts(
    trial_py: float, tau: float, model: RecencyScreening, lambda_P: float
) -> ScreeningCounts:
    if trial_py <= 0 or tau <= 0:
        raise ValueError("trial_py and tau must be positive")
    prob_recent = recency_prob_recent(lambda_P, model)
    n_screened = _round_half_up(trial_py / ((1.0 - model.prevalence_p) * tau))
    n_hiv_pos = _round_half_up(model.prevalence_p * n_screened)
    return ScreeningCounts(
        n_screened=n_screened,
        n_hiv_pos=n_hiv_pos,
        expected_recent=n_hiv_pos * prob_recent,
    )


def recency_incidence_estimate(
    n_recent: int,
    n_hiv_pos: int,
    n_negative: int,
    mdri: float,
    frr: float,
    cutoff: float,
) -> float:
    numerator = n_recent - frr * n_hiv_pos
    denominator = n_negative * (mdri - frr * cutoff)
    if numerator <= 0 or denominator <= 0:
        raise EstimatorUndefinedError(
            f"recency estimate undefined (recent={n_recent}, positive={n_hiv_pos}, "
            f"negative={n_negative}, mdri={mdri:.4f}, frr={frr:.4f})"
        )
    return numerator / denominator


# ---------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------


def _simulate_recency(
    model: RecencyScreening,
    true_lambda_P: float,
    trial_py: float,
    tau: float,
    rng: np.random.Generator,
) -> LogIncidenceEstimate:
    counts = screening_counts(trial_py, tau, model, true_lambda_P)
    prob_recent = recency_prob_recent(true_lambda_P, model)

    n_hiv_pos = int(rng.binomial(counts.n_screened, model.prevalence_p))
    n_negative = counts.n_screened - n_hiv_pos
    n_recent = int(rng.binomial(n_hiv_pos, prob_recent)) if n_hiv_pos > 0 else 0
    mdri_hat = float(rng.normal(model.mdri_omega_T, model.se_mdri)) if model.se_mdri > 0 else model.mdri_omega_T
    frr_hat = float(rng.normal(model.frr_beta_T, model.se_frr)) if model.se_frr > 0 else model.frr_beta_T

    rate = recency_incidence_estimate(
        n_recent, n_hiv_pos, n_negative, mdri_hat, frr_hat, model.cutoff_T
    )

    # Delta-method SE evaluated at the observed quantities
    p_hat = n_hiv_pos / counts.n_screened
    c0_per_screenee, c1 = _recency_variance_terms(
        p_hat,
        n_recent / n_hiv_pos,
        frr_hat,
        mdri_hat - frr_hat * model.cutoff_T,
        model.se_mdri,
        model.se_frr,
    )
    return LogIncidenceEstimate(
        log_rate=math.log(rate),
        std_err=math.sqrt(c0_per_screenee / counts.n_screened + c1),
    )


def simulate_cf_estimate(
    model: CfPlaceboModel,
    true_lambda_P: float,
    trial_py: float,
    tau: float,
    rng: np.random.Generator,
) -> LogIncidenceEstimate:
    """
    Draw one counterfactual placebo log-incidence estimate. Raises
    EstimatorUndefinedError when a recency draw leaves the estimator undefined.
    """
    if true_lambda_P <= 0:
        raise ValueError(f"true_lambda_P must be positive, got {true_lambda_P}")

    if isinstance(model, ExternalFollowUp):
        events = poisson_draw(true_lambda_P * model.follow_up_py, rng)
        return estimate_log_incidence(ArmSummary(events=events, person_years=model.follow_up_py))

    if isinstance(model, RecencyScreening):
        return _simulate_recency(model, true_lambda_P, trial_py, tau, rng)

    if isinstance(model, FixedVariance):
        sd = math.sqrt(model.c_p0 / trial_py + model.c_p1)
        return LogIncidenceEstimate(
            log_rate=float(rng.normal(math.log(true_lambda_P), sd)),
            std_err=sd,
        )

    raise TypeError(f"Unknown counterfactual model: {type(model).__name__}")
