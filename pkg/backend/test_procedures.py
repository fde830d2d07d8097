import math

import numpy as np
import pytest

from backend.procedures import (
    NiMargin,
    RaeDesignSpec,
    StepReached,
    accf_two_step_test,
    conservative_accf_two_step_test,
    conservative_lower_log_rate,
    ni_margin_95_95,
    ni_test,
    single_arm_test,
)
from backend.stat_core import ArmSummary, LogIncidenceEstimate, normal_quantile


def _cf(rate, se):
    return LogIncidenceEstimate(log_rate=math.log(rate), std_err=se)


def test_design_spec_validation():
    spec = RaeDesignSpec(0.5, 1.36)
    assert spec.z_alpha == pytest.approx(-1.959964, abs=1e-5)
    assert spec.z_power == pytest.approx(0.841621, abs=1e-5)
    with pytest.raises(ValueError):
        RaeDesignSpec(1.36, 0.5)
    with pytest.raises(ValueError):
        RaeDesignSpec(0.5, 1.0, alpha=0.6)
    with pytest.raises(ValueError):
        RaeDesignSpec(0.5, 1.0, target_power=0.4)


def test_ni_margin_from_historical_counts():
    placebo = ArmSummary(events=90, person_years=1805)
    active = ArmSummary(events=42, person_years=1805)
    margin = ni_margin_95_95(placebo, active, gamma_null=0.5)
    lower = math.log(90 / 42) - 1.959964 * math.sqrt(1 / 90 + 1 / 42)
    assert margin.delta == pytest.approx(0.5 * lower, rel=1e-5)
    assert margin.available


def test_ni_margin_unavailable_when_history_shows_no_effect():
    margin = ni_margin_95_95(ArmSummary(40, 1805), ArmSummary(42, 1805), gamma_null=0.5)
    assert not margin.available


def test_ni_test_without_margin_never_rejects():
    outcome = ni_test(ArmSummary(1, 5000), ArmSummary(100, 5000), NiMargin(-0.1), alpha=0.025)
    assert not outcome.reject
    assert outcome.step_reached == StepReached.NO_MARGIN


def test_ni_test_rejects_for_clearly_better_experimental_arm():
    outcome = ni_test(ArmSummary(20, 5000), ArmSummary(60, 5000), 0.38, alpha=0.025)
    assert outcome.reject
    assert outcome.statistics["T_NI"] < -1.96
    outcome = ni_test(ArmSummary(90, 5000), ArmSummary(60, 5000), 0.38, alpha=0.025)
    assert not outcome.reject


def test_accf_stops_when_active_beats_nothing():
    # counterfactual no higher than the active arm: step 1 fails
    cf = _cf(0.012, 0.1)
    outcome = accf_two_step_test(cf, ArmSummary(10, 2500), ArmSummary(30, 2500), 0.5, 0.025)
    assert outcome.step_reached == StepReached.STEP1_FAIL
    assert not outcome.reject
    assert "T_CF" not in outcome.statistics


def test_accf_rejects_for_strong_experimental_effect():
    cf = _cf(0.03, 0.08)
    outcome = accf_two_step_test(cf, ArmSummary(5, 2500), ArmSummary(34, 2500), 0.5, 0.025)
    assert outcome.step_reached == StepReached.STEP2
    assert outcome.reject
    assert outcome.statistics["T_PA"] >= 1.96


def test_accf_statistic_matches_closed_form():
    cf = _cf(0.03, 0.1)
    trial_E = ArmSummary(20, 2500)
    trial_A = ArmSummary(34, 2500)
    outcome = accf_two_step_test(cf, trial_E, trial_A, 0.5, 0.025)
    log_e, log_a = math.log(20 / 2500), math.log(34 / 2500)
    numerator = 0.5 * math.log(0.03) - log_e + 0.5 * log_a
    v = 0.25 * 0.01 + 1 / 20 + 0.25 / 34
    assert outcome.statistics["T_CF"] == pytest.approx(numerator / math.sqrt(v))


def test_accf_invariant_to_person_year_scale():
    cf = _cf(0.03, 0.1)
    small = accf_two_step_test(cf, ArmSummary(20, 2500), ArmSummary(34, 2500), 0.5, 0.025)
    scaled_cf = LogIncidenceEstimate(log_rate=math.log(0.03 / 10), std_err=0.1)
    large = accf_two_step_test(scaled_cf, ArmSummary(20, 25000), ArmSummary(34, 25000), 0.5, 0.025)
    assert small.statistics["T_PA"] == pytest.approx(large.statistics["T_PA"])
    assert small.statistics["T_CF"] == pytest.approx(large.statistics["T_CF"])


@pytest.mark.parametrize("events_E", [3, 8, 15, 22, 30])
@pytest.mark.parametrize("cf_rate", [0.02, 0.03, 0.045])
def test_conservative_rejection_implies_standard_rejection(events_E, cf_rate):
    cf = _cf(cf_rate, 0.12)
    trial_A = ArmSummary(34, 2500)
    trial_E = ArmSummary(events_E, 2500)
    cons = conservative_accf_two_step_test(cf, trial_E, trial_A, 0.5, 0.025)
    std = accf_two_step_test(cf, trial_E, trial_A, 0.5, 0.025)
    if cons.reject:
        assert std.reject


def test_conservative_lower_bound():
    cf = _cf(0.03, 0.1)
    assert conservative_lower_log_rate(cf) == pytest.approx(math.log(0.03) - 0.1959964, abs=1e-6)


def test_single_arm_statistic_zero_on_null_boundary():
    gamma_E = 0.394
    cf = _cf(0.03, 0.1)
    # experimental rate exactly lambda_P * exp(-gamma_E) with plenty of events
    py = 100.0 / (0.03 * math.exp(-gamma_E))
    outcome = single_arm_test(cf, ArmSummary(100, py), gamma_E, 0.025)
    assert outcome.statistics["T_E"] == pytest.approx(0.0, abs=1e-9)
    assert not outcome.reject


def test_single_arm_rejects_under_high_efficacy():
    cf = _cf(0.03, 0.05)
    outcome = single_arm_test(cf, ArmSummary(4, 2400), 0.394, 0.025)
    assert outcome.statistics["T_E"] < -1.96
    assert outcome.reject


def test_single_arm_rejects_negative_margin():
    with pytest.raises(ValueError):
        single_arm_test(_cf(0.03, 0.1), ArmSummary(4, 2400), -0.1, 0.025)


def _random_datasets(n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        cf = LogIncidenceEstimate(
            log_rate=math.log(rng.uniform(0.005, 0.06)), std_err=rng.uniform(0.02, 0.4)
        )
        py = rng.uniform(500.0, 10000.0)
        trial_E = ArmSummary(int(rng.poisson(rng.uniform(0.001, 0.05) * py)), py)
        trial_A = ArmSummary(int(rng.poisson(rng.uniform(0.001, 0.05) * py)), py)
        yield cf, trial_E, trial_A, rng.uniform(0.0, 1.0)


@pytest.mark.parametrize("n", [2000, pytest.param(100_000, marks=pytest.mark.slow)])
def test_two_step_rejects_only_when_both_steps_pass(n):
    critical = -normal_quantile(0.025)
    for cf, trial_E, trial_A, gamma in _random_datasets(n, seed=n):
        for test, names in (
            (accf_two_step_test, ("T_PA", "T_CF")),
            (conservative_accf_two_step_test, ("T_PA'", "T_CF'")),
        ):
            outcome = test(cf, trial_E, trial_A, gamma, 0.025)
            stats = outcome.statistics
            if stats[names[0]] < critical:
                assert outcome.step_reached == StepReached.STEP1_FAIL
                assert not outcome.reject
            else:
                assert outcome.step_reached == StepReached.STEP2
                assert outcome.reject == (stats[names[1]] >= critical)


@pytest.mark.parametrize("n", [2000, pytest.param(100_000, marks=pytest.mark.slow)])
def test_conservative_rejections_are_standard_rejections(n):
    counterexamples = 0
    for cf, trial_E, trial_A, gamma in _random_datasets(n, seed=n + 1):
        if conservative_accf_two_step_test(cf, trial_E, trial_A, gamma, 0.025).reject:
            counterexamples += not accf_two_step_test(cf, trial_E, trial_A, gamma, 0.025).reject
    assert counterexamples == 0
