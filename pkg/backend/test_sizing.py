import math

import numpy as np
from numpy.testing import assert_allclose
import pytest

from backend.cf_models import ExternalFollowUp, FixedVariance, variance_constants
from backend.errors import InfeasibleError
from backend.procedures import RaeDesignSpec
from backend.sizing import (
    DesignKind,
    HistoricalTrial,
    IncidenceScenario,
    analytic_power,
    analytic_type1,
    analytic_type1_conservative_accf,
    analytic_type1_ni_rae,
    brute_force_size,
    lambda_e_at_gamma,
    point_ni_margin,
    single_arm_gammas,
    size_accf,
    size_conservative_accf,
    size_ni,
    size_single_arm,
)

MODERATE = IncidenceScenario(lambda_P=0.03, lambda_A=0.03 / 2.2)
HIGH = IncidenceScenario(lambda_P=0.03, lambda_A=0.003)
EXTERNAL = variance_constants(ExternalFollowUp(1805), 0.03, 1.0)


def _spec(gamma_alt, power=0.8):
    return RaeDesignSpec(gamma_null=0.5, gamma_alt=gamma_alt, alpha=0.025, target_power=power)


def test_lambda_e_at_gamma_end_points():
    assert lambda_e_at_gamma(0.03, 0.01, 0.0) == pytest.approx(0.03)
    assert lambda_e_at_gamma(0.03, 0.01, 1.0) == pytest.approx(0.01)
    assert lambda_e_at_gamma(0.03, 0.01, 0.5) == pytest.approx(math.sqrt(0.03 * 0.01))


@pytest.mark.parametrize(
    "sizer, scenario, gamma_alt, power, published, tol",
    [
        (size_accf, MODERATE, 1.36, 0.8, 4942, 0.02),
        (size_accf, MODERATE, 1.36, 0.9, 6554, 0.02),
        (size_conservative_accf, MODERATE, 1.36, 0.8, 8205, 0.02),
        (size_conservative_accf, MODERATE, 1.36, 0.9, 10938, 0.02),
        (size_accf, HIGH, 1.0, 0.8, 5074, 0.03),
        (size_accf, HIGH, 1.0, 0.9, 6858, 0.03),
        (size_conservative_accf, HIGH, 1.0, 0.8, 6378, 0.03),
        (size_conservative_accf, HIGH, 1.0, 0.9, 8606, 0.03),
    ],
)
def test_two_step_sizes_match_published_designs(sizer, scenario, gamma_alt, power, published, tol):
    result = sizer(_spec(gamma_alt, power), scenario, EXTERNAL)
    assert result.total_py == pytest.approx(published, rel=tol)


def test_single_arm_size_with_derived_margins():
    spec = _spec(1.36)
    g_null, g_alt = single_arm_gammas(spec, MODERATE)
    assert g_null == pytest.approx(0.394, abs=5e-4)
    assert g_alt == pytest.approx(1.072, abs=5e-4)
    result = size_single_arm(spec, MODERATE, EXTERNAL, g_null, g_alt)
    assert result.total_py == pytest.approx(2398, rel=0.02)
    assert result.expected_events == pytest.approx(result.total_py * 0.03 * math.exp(-g_alt))


@pytest.mark.parametrize("sizer", [size_accf, size_conservative_accf])
def test_size_is_minimal(sizer):
    spec = _spec(1.36)
    result = sizer(spec, MODERATE, EXTERNAL)
    n = result.total_py
    assert analytic_power(result.design_kind, spec, MODERATE, EXTERNAL, n) >= 0.8
    assert analytic_power(result.design_kind, spec, MODERATE, EXTERNAL, n - 1) < 0.8
    assert result.auxiliary["achieved_power"] == pytest.approx(0.8, abs=0.01)


@pytest.mark.parametrize("kind", [DesignKind.ACCF, DesignKind.CONSERVATIVE_ACCF])
def test_bisection_agrees_with_linear_scan(kind):
    spec = _spec(1.0)
    sizer = size_accf if kind is DesignKind.ACCF else size_conservative_accf
    n = sizer(spec, HIGH, EXTERNAL).total_py
    scanned = brute_force_size(lambda x: analytic_power(kind, spec, HIGH, EXTERNAL, x), 0.8)
    assert n <= scanned < n + 10


def test_conservative_needs_more_than_standard():
    for scenario, gamma_alt in ((MODERATE, 1.36), (HIGH, 1.0)):
        spec = _spec(gamma_alt)
        assert size_conservative_accf(spec, scenario, EXTERNAL).total_py > size_accf(spec, scenario, EXTERNAL).total_py


def test_higher_power_needs_more_person_years():
    assert size_accf(_spec(1.36, 0.9), MODERATE, EXTERNAL).total_py > size_accf(_spec(1.36), MODERATE, EXTERNAL).total_py


def test_variance_floor_makes_design_infeasible():
    noisy = FixedVariance(c_p0=0.0, c_p1=1.0)
    with pytest.raises(InfeasibleError) as info:
        size_accf(_spec(1.36), MODERATE, noisy)
    assert info.value.limiting_power is not None
    assert info.value.limiting_power < 0.8


def test_point_ni_margin_and_closed_form_size():
    historical = HistoricalTrial(lambda_P0=0.05, lambda_A0=0.023)
    delta = point_ni_margin(0.5, historical)
    assert delta == pytest.approx(0.2045, abs=5e-4)

    delta_alt = math.log(0.75)
    result = size_ni(_spec(1.36), MODERATE, delta, delta_alt)
    c = 1 / (0.5 * MODERATE.lambda_A * 0.75) + 1 / (0.5 * MODERATE.lambda_A)
    expected = c * (0.841621 + 1.959964) ** 2 / (delta - delta_alt) ** 2
    assert result.total_py == math.ceil(expected)
    assert result.total_py == pytest.approx(11089, abs=15)
    power = analytic_power(DesignKind.NI, _spec(1.36), MODERATE, None, result.total_py, delta=delta, delta_alt=delta_alt)
    assert power == pytest.approx(0.8, abs=1e-3)


def test_ni_margin_must_exceed_alternative():
    with pytest.raises(InfeasibleError):
        size_ni(_spec(1.36), MODERATE, delta=-0.1, delta_alt=0.0)


def test_ni_type1_curve_shape():
    alpha = 0.025
    assert analytic_type1_ni_rae(0.0, alpha) == pytest.approx(alpha)
    assert analytic_type1_ni_rae(math.inf, alpha) == alpha
    assert analytic_type1_ni_rae(1.0, alpha) == pytest.approx(0.00279, abs=5e-5)
    assert analytic_type1_ni_rae(0.25, alpha) == pytest.approx(0.00428, abs=1e-4)
    # symmetric in log x, smallest at x = 1
    xs = np.logspace(-2, 2, 41)
    values = [analytic_type1_ni_rae(x, alpha) for x in xs]
    assert_allclose(values, values[::-1], rtol=1e-9)
    assert min(values) == pytest.approx(analytic_type1_ni_rae(1.0, alpha))
    with pytest.raises(ValueError):
        analytic_type1_ni_rae(-1.0)


def test_conservative_type1_never_exceeds_alpha():
    grid = np.logspace(np.log10(0.05), np.log10(20.0), 15)
    worst = max(analytic_type1_conservative_accf(r_ap, r_ea, 0.5) for r_ap in grid for r_ea in grid)
    assert worst <= 0.025 + 1e-12
    with pytest.raises(ValueError):
        analytic_type1_conservative_accf(0.0, 1.0, 0.5)


def test_analytic_type1_by_design():
    spec = _spec(1.36)
    historical = HistoricalTrial(lambda_P0=0.05, lambda_A0=0.023)
    assert analytic_type1(DesignKind.ACCF, spec, MODERATE, EXTERNAL, 5000) == 0.025
    cons = analytic_type1(DesignKind.CONSERVATIVE_ACCF, spec, MODERATE, EXTERNAL, 8205)
    assert 0 < cons < 0.025
    ni = analytic_type1(DesignKind.NI, spec, MODERATE, None, 11089, historical=historical)
    assert 0 < ni < 0.025
    with pytest.raises(ValueError):
        analytic_type1(DesignKind.NI, spec, MODERATE, None, 11089)


def test_bisection_equals_unit_step_scan_on_random_configs():
    rng = np.random.default_rng(20)
    for index in range(20):
        kind = (DesignKind.ACCF, DesignKind.CONSERVATIVE_ACCF)[index % 2]
        scenario, gamma_alt = ((MODERATE, 1.36), (HIGH, 1.0))[(index // 2) % 2]
        spec = _spec(gamma_alt, power=rng.uniform(0.7, 0.95))
        constants = variance_constants(
            FixedVariance(c_p0=rng.uniform(0.0, 200.0), c_p1=rng.uniform(0.002, 0.03)), scenario.lambda_P, 1.0
        )
        sizer = size_accf if kind is DesignKind.ACCF else size_conservative_accf
        n = sizer(spec, scenario, constants).total_py

        def power_at(x):
            return analytic_power(kind, spec, scenario, constants, x)

        start = max(1, n - 100)
        if start > 1:
            assert power_at(start) < spec.target_power
        assert brute_force_size(power_at, spec.target_power, step=1, start=start) == n


def test_moderate_setting_size_ordering():
    from backend.simulator import ni_size_distribution

    spec = _spec(1.36)
    g_null, g_alt = single_arm_gammas(spec, MODERATE)
    single = size_single_arm(spec, MODERATE, EXTERNAL, g_null, g_alt).total_py
    accf = size_accf(spec, MODERATE, EXTERNAL).total_py
    conservative = size_conservative_accf(spec, MODERATE, EXTERNAL).total_py
    ni = ni_size_distribution(
        spec, MODERATE, HistoricalTrial(lambda_P0=0.05, lambda_A0=0.023), 1000, 20240611,
        ni_delta_alt=math.log(0.75),
    )
    assert single < accf < conservative < ni.mean_sized_py
