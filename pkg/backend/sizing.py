# backend/sizing.py

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, Optional, Tuple

from scipy.optimize import brentq

from backend.cf_models import VarianceConstants
from backend.errors import InfeasibleError
from backend.procedures import RaeDesignSpec
from backend.stat_core import normal_cdf, normal_quantile

logger = logging.getLogger(__name__)

MIN_TRIAL_PY = 10
MAX_TRIAL_PY = 100_000_000


class DesignKind(str, Enum):
    NI = "ni"
    ACCF = "accf"
    CONSERVATIVE_ACCF = "conservative_accf"
    SINGLE_ARM = "single_arm"


@dataclass(frozen=True)
class IncidenceScenario:
    """Incidence rates (cases/PY), share of trial PYs on E, and individual follow-up tau (years)."""

    lambda_P: float
    lambda_A: float
    lambda_E: Optional[float] = None
    allocation_E: float = 0.5
    tau: float = 1.0

    def __post_init__(self):
        rates = [self.lambda_P, self.lambda_A] + ([self.lambda_E] if self.lambda_E is not None else [])
        if any(r <= 0 for r in rates):
            raise ValueError("all incidence rates must be positive")
        if not 0.0 < self.allocation_E < 1.0:
            raise ValueError(f"allocation_E must lie in (0, 1), got {self.allocation_E}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @property
    def log_effect(self) -> float:
        """log lambda_P - log lambda_A, the active control's absolute efficacy."""
        return math.log(self.lambda_P) - math.log(self.lambda_A)

    def at_gamma(self, g: float) -> "IncidenceScenario":
        return replace(self, lambda_E=lambda_e_at_gamma(self.lambda_P, self.lambda_A, g))


@dataclass(frozen=True)
class HistoricalTrial:
    """Placebo-controlled trial of the active control, PYs split equally between arms."""

    lambda_P0: float
    lambda_A0: float
    total_py: float = 3610.0

    def __post_init__(self):
        if self.lambda_P0 <= 0 or self.lambda_A0 <= 0 or self.total_py <= 0:
            raise ValueError("historical rates and PYs must be positive")

    @property
    def arm_py(self) -> float:
        return self.total_py / 2.0


@dataclass(frozen=True)
class SizingResult:
    design_kind: DesignKind
    total_py: int
    expected_events: float
    auxiliary: Dict[str, Any] = field(default_factory=dict)


# ---------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------


def lambda_e_at_gamma(lambda_P: float, lambda_A: float, g: float) -> float:
    if lambda_P <= 0 or lambda_A <= 0:
        raise ValueError("rates must be positive")
    return math.exp(math.log(lambda_P) - g * (math.log(lambda_P) - math.log(lambda_A)))


def variance_coefficients(scenario: IncidenceScenario, design_lambda_E: float) -> Tuple[float, float]:
    """
    (c_E, c_A) such that c / N is the variance of an arm's log incidence
    when N is the total trial PYs: c = 1 / (arm share * lambda).
    """
    if design_lambda_E <= 0:
        raise ValueError("design_lambda_E must be positive")
    c_E = 1.0 / (scenario.allocation_E * design_lambda_E)
    c_A = 1.0 / ((1.0 - scenario.allocation_E) * scenario.lambda_A)
    return c_E, c_A


def single_arm_gammas(spec: RaeDesignSpec, scenario: IncidenceScenario) -> Tuple[float, float]:
    """Absolute-efficacy margins matching the RAE hypotheses: (gamma * effect, gamma* * effect)."""
    return spec.gamma_null * scenario.log_effect, spec.gamma_alt * scenario.log_effect


def default_ni_delta_alt(spec: RaeDesignSpec, scenario: IncidenceScenario) -> float:
    return (1.0 - spec.gamma_alt) * scenario.log_effect


def point_ni_margin(gamma_null: float, historical: HistoricalTrial) -> float:
    """95%-95% margin evaluated at the historical trial's expected event counts."""
    events_P = historical.lambda_P0 * historical.arm_py
    events_A = historical.lambda_A0 * historical.arm_py
    se = math.sqrt(1.0 / events_P + 1.0 / events_A)
    return (1.0 - gamma_null) * (math.log(events_P / events_A) + normal_quantile(0.025) * se)


def _two_arm_events(n: float, scenario: IncidenceScenario, lambda_E: float) -> float:
    return n * (scenario.allocation_E * lambda_E + (1.0 - scenario.allocation_E) * scenario.lambda_A)


# ---------------------------------------------------------------------
# Power bounds (left-hand sides of the sizing equations)
# ---------------------------------------------------------------------


def _accf_terms(n, spec, scenario, cf):
    g = spec.gamma_null
    effect = scenario.log_effect
    c_E, c_A = variance_coefficients(scenario, lambda_e_at_gamma(scenario.lambda_P, scenario.lambda_A, spec.gamma_alt))
    sd_cf = math.sqrt(((1 - g) ** 2 * cf.c_p0 + c_E + g ** 2 * c_A) / n + (1 - g) ** 2 * cf.c_p1)
    sd_pa = math.sqrt((cf.c_p0 + c_A) / n + cf.c_p1)
    z = spec.z_alpha
    return (
        normal_cdf(z + (spec.gamma_alt - g) * effect / sd_cf),
        normal_cdf(z + effect / sd_pa),
    )


def _conservative_terms(n, spec, scenario, cf):
    g = spec.gamma_null
    effect = scenario.log_effect
    c_E, c_A = variance_coefficients(scenario, lambda_e_at_gamma(scenario.lambda_P, scenario.lambda_A, spec.gamma_alt))
    sd_P = math.sqrt(cf.variance(n))
    sd_A = math.sqrt(c_A / n)
    v_prime = (c_E + g ** 2 * c_A) / n
    z = spec.z_alpha

    d_cf = math.sqrt(v_prime + (1 - g) ** 2 * sd_P ** 2)
    d_pa = math.sqrt(sd_A ** 2 + sd_P ** 2)
    return (
        normal_cdf(z * (math.sqrt(v_prime) + (1 - g) * sd_P) / d_cf + (spec.gamma_alt - g) * effect / d_cf),
        normal_cdf(z * (sd_A + sd_P) / d_pa + effect / d_pa),
    )


def _limit_terms(spec, scenario, cf) -> Tuple[float, float]:
    """Both two-step bounds share this N -> infinity limit."""
    g = spec.gamma_null
    effect = scenario.log_effect
    if cf.c_p1 == 0:
        return 1.0, 1.0
    return (
        normal_cdf(spec.z_alpha + (spec.gamma_alt - g) * effect / (abs(1 - g) * math.sqrt(cf.c_p1)))
        if g != 1
        else 1.0,
        normal_cdf(spec.z_alpha + effect / math.sqrt(cf.c_p1)),
    )


def analytic_power(
    design_kind: DesignKind,
    spec: RaeDesignSpec,
    scenario: IncidenceScenario,
    cf_constants: Optional[VarianceConstants],
    n: float,
    delta: Optional[float] = None,
    delta_alt: Optional[float] = None,
    gamma_E_null: Optional[float] = None,
    gamma_E_alt: Optional[float] = None,
) -> float:
    """
    Guaranteed power of a design at n total trial PYs: the two-Phi lower bound
    for the two-step designs, the exact normal power for NI (given delta)
    and single-arm designs.
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    design_kind = DesignKind(design_kind)

    if design_kind is DesignKind.ACCF:
        return sum(_accf_terms(n, spec, scenario, cf_constants)) - 1.0
    if design_kind is DesignKind.CONSERVATIVE_ACCF:
        return sum(_conservative_terms(n, spec, scenario, cf_constants)) - 1.0

    if design_kind is DesignKind.SINGLE_ARM:
        default_null, default_alt = single_arm_gammas(spec, scenario)
        g_null = default_null if gamma_E_null is None else gamma_E_null
        g_alt = default_alt if gamma_E_alt is None else gamma_E_alt
        lambda_E = scenario.lambda_P * math.exp(-g_alt)
        sd = math.sqrt(1.0 / (lambda_E * n) + cf_constants.variance(n))
        return normal_cdf(spec.z_alpha + (g_alt - g_null) / sd)

    if delta is None:
        raise ValueError("NI power needs the margin delta")
    if delta_alt is None:
        delta_alt = default_ni_delta_alt(spec, scenario)
    c_E, c_A = variance_coefficients(scenario, scenario.lambda_A * math.exp(delta_alt))
    return normal_cdf(spec.z_alpha + (delta - delta_alt) / math.sqrt((c_E + c_A) / n))


# ---------------------------------------------------------------------
# Root finding
# ---------------------------------------------------------------------


def _solve_min_n(power_at: Callable[[float], float], target: float, limiting_power: float, label: str) -> int:
    """
    Smallest integer N >= 1 with power_at(N) >= target, power_at increasing
    in N. Bracket from MIN_TRIAL_PY by doubling, bisect to half a PY, then
    settle the integer boundary exactly.
    """
    if limiting_power < target:
        raise InfeasibleError(f"{label}: target power {target} is unreachable for any trial size", limiting_power)

    low, high = float(MIN_TRIAL_PY), float(2 * MIN_TRIAL_PY)
    if power_at(low) >= target:
        n = MIN_TRIAL_PY
    else:
        while power_at(high) < target:
            low, high = high, high * 2
            if high > MAX_TRIAL_PY:
                raise InfeasibleError(f"{label}: no trial below {MAX_TRIAL_PY} PYs reaches target power", limiting_power)
        logger.debug("%s: bracket [%.0f, %.0f]", label, low, high)
        root = brentq(lambda x: power_at(x) - target, low, high, xtol=0.5)
        n = max(1, math.ceil(root))

    while power_at(n) < target:
        n += 1
    while n > 1 and power_at(n - 1) >= target:
        n -= 1
    return n


def brute_force_size(power_at: Callable[[float], float], target: float, step: int = 10, start: int = 10) -> int:
    """Linear scan over start, start + step, ...; the reference the bisection is checked against."""
    n = start
    while power_at(n) < target:
        n += step
        if n > MAX_TRIAL_PY:
            raise InfeasibleError("scan exceeded maximum trial size")
    return n


# ---------------------------------------------------------------------
# Sizing operations
# ---------------------------------------------------------------------


def _require_positive_effect(scenario: IncidenceScenario):
    if scenario.log_effect <= 0:
        raise ValueError("active control must reduce incidence (lambda_P > lambda_A)")


def size_accf(spec: RaeDesignSpec, scenario: IncidenceScenario, cf_constants: VarianceConstants) -> SizingResult:
    _require_positive_effect(scenario)
    kind = DesignKind.ACCF
    limit = sum(_limit_terms(spec, scenario, cf_constants)) - 1.0
    n = _solve_min_n(
        lambda x: analytic_power(kind, spec, scenario, cf_constants, x),
        spec.target_power,
        limit,
        "AC-CF",
    )
    return _two_step_result(kind, spec, scenario, cf_constants, n)


def size_conservative_accf(
    spec: RaeDesignSpec, scenario: IncidenceScenario, cf_constants: VarianceConstants
) -> SizingResult:
    _require_positive_effect(scenario)
    kind = DesignKind.CONSERVATIVE_ACCF
    limit = sum(_limit_terms(spec, scenario, cf_constants)) - 1.0
    n = _solve_min_n(
        lambda x: analytic_power(kind, spec, scenario, cf_constants, x),
        spec.target_power,
        limit,
        "conservative AC-CF",
    )
    return _two_step_result(kind, spec, scenario, cf_constants, n)


def _two_step_result(kind, spec, scenario, cf_constants, n) -> SizingResult:
    lambda_E = lambda_e_at_gamma(scenario.lambda_P, scenario.lambda_A, spec.gamma_alt)
    c_E, c_A = variance_coefficients(scenario, lambda_E)
    return SizingResult(
        design_kind=kind,
        total_py=n,
        expected_events=_two_arm_events(n, scenario, lambda_E),
        auxiliary={
            "lambda_E_alt": lambda_E,
            "c_E": c_E,
            "c_A": c_A,
            "c_p0": cf_constants.c_p0,
            "c_p1": cf_constants.c_p1,
            "achieved_power": analytic_power(kind, spec, scenario, cf_constants, n),
        },
    )


def size_ni(spec: RaeDesignSpec, scenario: IncidenceScenario, delta: float, delta_alt: float) -> SizingResult:
    """
    Closed-form NI size: sigma_EA = (delta - delta*) / (z_power - z_alpha),
    with c_E evaluated at lambda_E = lambda_A * exp(delta*).
    delta_alt is on the log scale.
    """
    if delta <= delta_alt:
        raise InfeasibleError(f"NI margin {delta:.4f} does not exceed the alternative {delta_alt:.4f}", 0.0)
    lambda_E = scenario.lambda_A * math.exp(delta_alt)
    c_E, c_A = variance_coefficients(scenario, lambda_E)
    n_exact = (c_E + c_A) * (spec.z_power - spec.z_alpha) ** 2 / (delta - delta_alt) ** 2
    n = max(1, math.ceil(n_exact))
    return SizingResult(
        design_kind=DesignKind.NI,
        total_py=n,
        expected_events=_two_arm_events(n, scenario, lambda_E),
        auxiliary={"delta": delta, "delta_alt": delta_alt, "lambda_E_alt": lambda_E},
    )


def size_single_arm(
    spec: RaeDesignSpec,
    scenario: IncidenceScenario,
    cf_constants: VarianceConstants,
    gamma_E_null: float,
    gamma_E_alt: float,
) -> SizingResult:
    if gamma_E_alt <= gamma_E_null:
        raise InfeasibleError("single-arm alternative must exceed the null margin", spec.alpha)
    kind = DesignKind.SINGLE_ARM
    limit = (
        normal_cdf(spec.z_alpha + (gamma_E_alt - gamma_E_null) / math.sqrt(cf_constants.c_p1))
        if cf_constants.c_p1 > 0
        else 1.0
    )
    n = _solve_min_n(
        lambda x: analytic_power(
            kind, spec, scenario, cf_constants, x, gamma_E_null=gamma_E_null, gamma_E_alt=gamma_E_alt
        ),
        spec.target_power,
        limit,
        "single-arm",
    )
    lambda_E = scenario.lambda_P * math.exp(-gamma_E_alt)
    return SizingResult(
        design_kind=kind,
        total_py=n,
        expected_events=n * lambda_E,
        auxiliary={
            "gamma_E": gamma_E_null,
            "gamma_E_alt": gamma_E_alt,
            "lambda_E_alt": lambda_E,
            "c_p0": cf_constants.c_p0,
            "c_p1": cf_constants.c_p1,
            "achieved_power": analytic_power(
                kind, spec, scenario, cf_constants, n, gamma_E_null=gamma_E_null, gamma_E_alt=gamma_E_alt
            ),
        },
    )


# ---------------------------------------------------------------------
# Analytic type-1 error
# ---------------------------------------------------------------------


def analytic_type1_ni_rae(x: float, alpha: float = 0.025) -> float:
    """
    Type-1 error of the 95%-95% NI test against the RAE null, where
    x = sigma_EA^2 / ((1 - gamma)^2 sigma_PA0^2). Equals alpha as x -> 0 or
    x -> infinity and is smallest at x = 1.
    """
    if x < 0:
        raise ValueError(f"x must be non-negative, got {x}")
    if math.isinf(x):
        return alpha
    return normal_cdf(normal_quantile(alpha) * (1.0 + math.sqrt(x)) / math.sqrt(1.0 + x))


def analytic_type1_conservative_accf(r_AP: float, r_EA: float, gamma: float, alpha: float = 0.025) -> float:
    """max(alpha_1, alpha_2) with r_AP = sigma_A / sigma_P and r_EA = sigma_E / sigma_A."""
    if r_AP <= 0 or r_EA <= 0:
        raise ValueError("variance ratios must be positive")
    z = normal_quantile(alpha)
    s = r_EA ** 2 + gamma ** 2
    alpha_1 = normal_cdf(z * (math.sqrt(s) * r_AP + (1 - gamma)) / math.sqrt(s * r_AP ** 2 + (1 - gamma) ** 2))
    alpha_2 = normal_cdf(z * (r_AP + 1) / math.sqrt(r_AP ** 2 + 1))
    return max(alpha_1, alpha_2)


def analytic_type1(
    design_kind: DesignKind,
    spec: RaeDesignSpec,
    scenario: IncidenceScenario,
    cf_constants: Optional[VarianceConstants],
    n: float,
    historical: Optional[HistoricalTrial] = None,
) -> float:
    """Analytic type-1 error against the RAE null at n trial PYs (E at the null rate)."""
    design_kind = DesignKind(design_kind)
    if design_kind in (DesignKind.ACCF, DesignKind.SINGLE_ARM):
        return spec.alpha

    c_E, c_A = variance_coefficients(
        scenario, lambda_e_at_gamma(scenario.lambda_P, scenario.lambda_A, spec.gamma_null)
    )
    if design_kind is DesignKind.CONSERVATIVE_ACCF:
        sd_P = math.sqrt(cf_constants.variance(n))
        sd_A = math.sqrt(c_A / n)
        sd_E = math.sqrt(c_E / n)
        return analytic_type1_conservative_accf(sd_A / sd_P, sd_E / sd_A, spec.gamma_null, spec.alpha)

    if historical is None:
        raise ValueError("NI type-1 error needs the historical trial")
    var_EA = (c_E + c_A) / n
    var_PA0 = 1.0 / (historical.lambda_P0 * historical.arm_py) + 1.0 / (historical.lambda_A0 * historical.arm_py)
    x = var_EA / ((1.0 - spec.gamma_null) ** 2 * var_PA0)
    return analytic_type1_ni_rae(x, spec.alpha)
