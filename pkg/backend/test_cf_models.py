import math

import numpy as np
import pytest

from backend.cf_models import (
    ExternalFollowUp,
    FixedVariance,
    RecencyScreening,
    recency_incidence_estimate,
    recency_model_from_assay,
    recency_prob_recent,
    screening_counts,
    simulate_cf_estimate,
    variance_constants,
)
from backend.errors import EstimatorUndefinedError, InfeasibleError


@pytest.fixture
def assay():
    return recency_model_from_assay(prevalence=0.15, mdri_days=142, frr=0.01, cutoff_years=2.0)


def test_external_follow_up_constants():
    constants = variance_constants(ExternalFollowUp(1805), lambda_P=0.03, follow_up_tau=1.0)
    assert constants.c_p0 == 0.0
    assert constants.c_p1 == pytest.approx(1 / (0.03 * 1805))


def test_fixed_variance_passes_through():
    constants = variance_constants(FixedVariance(c_p0=12.0, c_p1=0.01), 0.03, 1.0)
    assert (constants.c_p0, constants.c_p1) == (12.0, 0.01)
    assert constants.variance(1200) == pytest.approx(0.02)


def test_recency_model_converts_days_and_defaults_se(assay):
    assert assay.mdri_omega_T == pytest.approx(142 / 365.25)
    assert assay.se_mdri == pytest.approx(0.05 * 142 / 365.25)
    assert assay.se_frr == pytest.approx(0.0025)


def test_prob_recent_formula(assay):
    expected = 0.01 + 0.03 * 0.85 * (142 / 365.25 - 0.02) / 0.15
    assert recency_prob_recent(0.03, assay) == pytest.approx(expected)
    assert recency_prob_recent(0.0, assay) == pytest.approx(0.01)


def test_prob_recent_at_or_above_one_is_infeasible(assay):
    with pytest.raises(InfeasibleError):
        recency_prob_recent(1.0, assay)


def test_recency_constants_scale_with_tau(assay):
    one = variance_constants(assay, 0.03, 1.0)
    two = variance_constants(assay, 0.03, 2.0)
    assert two.c_p0 == pytest.approx(2 * one.c_p0)
    assert two.c_p1 == pytest.approx(one.c_p1)


def test_recency_constants_without_assay_uncertainty():
    model = RecencyScreening(prevalence_p=0.15, mdri_omega_T=142 / 365.25, frr_beta_T=0.01, cutoff_T=2.0)
    constants = variance_constants(model, 0.03, 1.0)
    prob = recency_prob_recent(0.03, model)
    per_screenee = (prob * (1 - prob) / (prob - 0.01) ** 2 + 1 / 0.85) / 0.15
    assert constants.c_p1 == 0.0
    assert constants.c_p0 == pytest.approx(per_screenee * 0.85)


def test_screening_counts_reproduce_tabulated_rows(assay):
    counts = screening_counts(5432, 1.0, assay, 0.03)
    assert counts.n_screened == 6391
    assert counts.n_hiv_pos == 959
    assert counts.expected_recent == pytest.approx(70, abs=1)

    counts = screening_counts(12780, 2.0, assay, 0.03)
    assert (counts.n_screened, counts.n_hiv_pos) == (7518, 1128)
    assert counts.expected_recent == pytest.approx(82, abs=1)


def test_screening_counts_round_half_up(assay):
    # 0.15 * 9725 = 1458.75
    assert screening_counts(8266, 1.0, assay, 0.03).n_hiv_pos == 1459


def test_recency_estimator_and_undefined_cases():
    rate = recency_incidence_estimate(70, 959, 5432, 0.3888, 0.01, 2.0)
    assert rate == pytest.approx((70 - 9.59) / (5432 * (0.3888 - 0.02)))
    with pytest.raises(EstimatorUndefinedError):
        recency_incidence_estimate(5, 959, 5432, 0.3888, 0.01, 2.0)
    with pytest.raises(EstimatorUndefinedError):
        recency_incidence_estimate(70, 959, 5432, 0.01, 0.01, 2.0)


def test_invalid_models_rejected():
    with pytest.raises(ValueError):
        ExternalFollowUp(0)
    with pytest.raises(ValueError):
        RecencyScreening(prevalence_p=0.0, mdri_omega_T=0.4, frr_beta_T=0.01, cutoff_T=2.0)
    with pytest.raises(ValueError):
        RecencyScreening(prevalence_p=0.1, mdri_omega_T=0.01, frr_beta_T=0.01, cutoff_T=2.0)
    with pytest.raises(ValueError):
        FixedVariance(0.0, 0.0)


def test_external_draws_centre_on_truth():
    rng = np.random.default_rng(5)
    draws = [simulate_cf_estimate(ExternalFollowUp(1805), 0.03, 5000, 1.0, rng) for _ in range(3000)]
    log_rates = np.array([d.log_rate for d in draws])
    # log of a Poisson rate is biased down by about 1/(2 * mean events)
    assert log_rates.mean() == pytest.approx(math.log(0.03), abs=0.03)
    assert log_rates.std() == pytest.approx(math.sqrt(1 / 54.15), rel=0.1)


def test_recency_draw_spread_matches_constants(assay):
    rng = np.random.default_rng(9)
    constants = variance_constants(assay, 0.03, 1.0)
    draws = []
    for _ in range(3000):
        try:
            draws.append(simulate_cf_estimate(assay, 0.03, 5432, 1.0, rng).log_rate)
        except EstimatorUndefinedError:
            pass
    assert len(draws) > 2900
    assert np.std(draws) == pytest.approx(math.sqrt(constants.variance(5432)), rel=0.15)


def test_fixed_variance_draw_uses_stated_sd():
    rng = np.random.default_rng(2)
    est = simulate_cf_estimate(FixedVariance(100.0, 0.01), 0.03, 10000, 1.0, rng)
    assert est.std_err == pytest.approx(math.sqrt(0.02))
