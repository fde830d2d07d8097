# backend/simulator.py

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from backend.cf_models import CfPlaceboModel, simulate_cf_estimate, variance_constants
from backend.config import DEFAULT_THREADS
from backend.errors import EstimatorUndefinedError, InfeasibleError
from backend.procedures import (
    RaeDesignSpec,
    accf_two_step_test,
    conservative_accf_two_step_test,
    ni_margin_95_95,
    ni_test,
    single_arm_test,
)
from backend.sizing import (
    DesignKind,
    HistoricalTrial,
    IncidenceScenario,
    default_ni_delta_alt,
    lambda_e_at_gamma,
    single_arm_gammas,
    size_accf,
    size_conservative_accf,
    size_ni,
    size_single_arm,
)
from backend.stat_core import ArmSummary, poisson_draw, replicate_rng

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["lambda_P", "lambda_A", "rejection_rate", "mc_std_err"]


class HypothesisState(str, Enum):
    NULL = "null"
    ALTERNATIVE = "alternative"


@dataclass(frozen=True)
class SimulationPlan:
    """
    One Monte Carlo experiment. `design` is what the trial was sized for,
    `truth` is what events are drawn from; they differ only in sweeps.
    """

    design_kind: DesignKind
    spec: RaeDesignSpec
    design: IncidenceScenario
    truth: IncidenceScenario
    hypothesis_state: HypothesisState
    n_replicates: int
    seed: int
    cf_model: Optional[CfPlaceboModel] = None
    historical: Optional[HistoricalTrial] = None
    trial_py: Optional[float] = None
    ni_delta_alt: Optional[float] = None
    gamma_E: Optional[float] = None
    gamma_E_alt: Optional[float] = None
    cf_lambda_P: Optional[float] = None
    stream_key: Tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "design_kind", DesignKind(self.design_kind))
        object.__setattr__(self, "hypothesis_state", HypothesisState(self.hypothesis_state))
        if self.n_replicates < 1:
            raise ValueError(f"n_replicates must be at least 1, got {self.n_replicates}")
        if self.design_kind is DesignKind.NI:
            if self.historical is None:
                raise ValueError("NI plans need historical trial parameters")
        else:
            if self.cf_model is None:
                raise ValueError(f"{self.design_kind.value} plans need a counterfactual model")
            if self.trial_py is None or self.trial_py <= 0:
                raise ValueError(f"{self.design_kind.value} plans need a positive trial_py")
        if self.design_kind is DesignKind.SINGLE_ARM:
            if self.gamma_E is None or self.gamma_E_alt is None:
                raise ValueError("single-arm plans need gamma_E and gamma_E_alt")

    @property
    def counterfactual_lambda_P(self) -> float:
        return self.design.lambda_P if self.cf_lambda_P is None else self.cf_lambda_P

    @property
    def delta_alt(self) -> float:
        if self.ni_delta_alt is not None:
            return self.ni_delta_alt
        return default_ni_delta_alt(self.spec, self.design)

    def true_lambda_E(self) -> float:
        null = self.hypothesis_state is HypothesisState.NULL
        if self.design_kind is DesignKind.SINGLE_ARM:
            # absolute-efficacy hypotheses, anchored on the true placebo rate
            g_E = self.gamma_E if null else self.gamma_E_alt
            return self.truth.lambda_P * math.exp(-g_E)
        g = self.spec.gamma_null if null else self.spec.gamma_alt
        return lambda_e_at_gamma(self.truth.lambda_P, self.truth.lambda_A, g)


@dataclass(frozen=True)
class OperatingCharacteristics:
    rejection_rate: float
    mc_std_err: float
    n_replicates: int
    n_rejections: int
    n_estimator_undefined: int = 0
    n_no_margin: int = 0
    mean_sized_py: Optional[float] = None
    mean_margin: Optional[float] = None
    # NI only: rejections among replicates whose historical trial gave a margin
    rejection_rate_with_margin: Optional[float] = None


@dataclass(frozen=True)
class NiSizeSummary:
    mean_sized_py: float
    mean_margin: float
    n_replicates: int
    n_no_margin: int


@dataclass(frozen=True)
class ReplicateOutcome:
    reject: bool
    estimator_undefined: bool = False
    no_margin: bool = False
    sized_py: Optional[int] = None
    margin: Optional[float] = None


@dataclass
class _Tally:
    rejections: int = 0
    undefined: int = 0
    no_margin: int = 0
    sized_py_total: int = 0
    sized_count: int = 0
    margins: List[float] = field(default_factory=list)

    def add(self, outcome: ReplicateOutcome):
        self.rejections += int(outcome.reject)
        self.undefined += int(outcome.estimator_undefined)
        self.no_margin += int(outcome.no_margin)
        if outcome.sized_py is not None:
            self.sized_py_total += outcome.sized_py
            self.sized_count += 1
        if outcome.margin is not None:
            self.margins.append(outcome.margin)

    def merge(self, other: "_Tally"):
        self.rejections += other.rejections
        self.undefined += other.undefined
        self.no_margin += other.no_margin
        self.sized_py_total += other.sized_py_total
        self.sized_count += other.sized_count
        self.margins.extend(other.margins)


# ---------------------------------------------------------------------
# Plan construction
# ---------------------------------------------------------------------


def build_plan(
    design_kind: DesignKind,
    spec: RaeDesignSpec,
    design: IncidenceScenario,
    hypothesis_state: HypothesisState,
    n_replicates: int,
    seed: int,
    cf_model: Optional[CfPlaceboModel] = None,
    historical: Optional[HistoricalTrial] = None,
    ni_delta_alt: Optional[float] = None,
    gamma_E: Optional[float] = None,
    gamma_E_alt: Optional[float] = None,
) -> SimulationPlan:
    """
    Size the trial from design parameters (non-NI designs) and return a plan
    whose truth equals the design. NI trials are re-sized inside every
    replicate from its own simulated historical trial.
    """
    design_kind = DesignKind(design_kind)
    trial_py = None

    if design_kind is not DesignKind.NI:
        if cf_model is None:
            raise ValueError(f"{design_kind.value} plans need a counterfactual model")
        cf_constants = variance_constants(cf_model, design.lambda_P, design.tau)
        if design_kind is DesignKind.ACCF:
            trial_py = size_accf(spec, design, cf_constants).total_py
        elif design_kind is DesignKind.CONSERVATIVE_ACCF:
            trial_py = size_conservative_accf(spec, design, cf_constants).total_py
        else:
            default_null, default_alt = single_arm_gammas(spec, design)
            gamma_E = default_null if gamma_E is None else gamma_E
            gamma_E_alt = default_alt if gamma_E_alt is None else gamma_E_alt
            trial_py = size_single_arm(spec, design, cf_constants, gamma_E, gamma_E_alt).total_py
        logger.info("Sized %s trial at %d PYs", design_kind.value, trial_py)

    return SimulationPlan(
        design_kind=design_kind,
        spec=spec,
        design=design,
        truth=design,
        hypothesis_state=hypothesis_state,
        n_replicates=n_replicates,
        seed=seed,
        cf_model=cf_model,
        historical=historical,
        trial_py=trial_py,
        ni_delta_alt=ni_delta_alt,
        gamma_E=gamma_E,
        gamma_E_alt=gamma_E_alt,
    )


# ---------------------------------------------------------------------
# One replicate
# ---------------------------------------------------------------------


def _draw_historical(historical: HistoricalTrial, rng: np.random.Generator) -> Tuple[ArmSummary, ArmSummary]:
    arm_py = historical.arm_py
    placebo = ArmSummary(poisson_draw(historical.lambda_P0 * arm_py, rng), arm_py)
    active = ArmSummary(poisson_draw(historical.lambda_A0 * arm_py, rng), arm_py)
    return placebo, active


def _draw_two_arms(
    truth: IncidenceScenario, lambda_E: float, total_py: float, rng: np.random.Generator
) -> Tuple[ArmSummary, ArmSummary]:
    py_E = total_py * truth.allocation_E
    py_A = total_py * (1.0 - truth.allocation_E)
    arm_E = ArmSummary(poisson_draw(lambda_E * py_E, rng), py_E)
    arm_A = ArmSummary(poisson_draw(truth.lambda_A * py_A, rng), py_A)
    return arm_E, arm_A


def _ni_replicate(plan: SimulationPlan, rng: np.random.Generator) -> ReplicateOutcome:
    hist_placebo, hist_active = _draw_historical(plan.historical, rng)
    margin = ni_margin_95_95(hist_placebo, hist_active, plan.spec.gamma_null)
    if not margin.available:
        return ReplicateOutcome(reject=False, no_margin=True, margin=margin.delta)
    try:
        sized = size_ni(plan.spec, plan.design, margin.delta, plan.delta_alt)
    except InfeasibleError:
        return ReplicateOutcome(reject=False, no_margin=True, margin=margin.delta)

    arm_E, arm_A = _draw_two_arms(plan.truth, plan.true_lambda_E(), sized.total_py, rng)
    outcome = ni_test(arm_E, arm_A, margin, plan.spec.alpha)
    return ReplicateOutcome(reject=outcome.reject, sized_py=sized.total_py, margin=margin.delta)


def _cf_replicate(plan: SimulationPlan, rng: np.random.Generator) -> ReplicateOutcome:
    try:
        cf = simulate_cf_estimate(
            plan.cf_model, plan.counterfactual_lambda_P, plan.trial_py, plan.design.tau, rng
        )
    except EstimatorUndefinedError:
        return ReplicateOutcome(reject=False, estimator_undefined=True)

    lambda_E = plan.true_lambda_E()
    gamma = plan.spec.gamma_null
    alpha = plan.spec.alpha

    if plan.design_kind is DesignKind.SINGLE_ARM:
        arm_E = ArmSummary(poisson_draw(lambda_E * plan.trial_py, rng), plan.trial_py)
        outcome = single_arm_test(cf, arm_E, plan.gamma_E, alpha)
    else:
        arm_E, arm_A = _draw_two_arms(plan.truth, lambda_E, plan.trial_py, rng)
        if plan.design_kind is DesignKind.ACCF:
            outcome = accf_two_step_test(cf, arm_E, arm_A, gamma, alpha)
        else:
            outcome = conservative_accf_two_step_test(cf, arm_E, arm_A, gamma, alpha)
    return ReplicateOutcome(reject=outcome.reject)


def replicate_outcome(plan: SimulationPlan, replicate_index: int) -> ReplicateOutcome:
    rng = replicate_rng(plan.seed, plan.stream_key, replicate_index)
    if plan.design_kind is DesignKind.NI:
        return _ni_replicate(plan, rng)
    return _cf_replicate(plan, rng)


def run_replicate(plan: SimulationPlan, replicate_index: int) -> bool:
    """Reject/accept for one replicate; deterministic in (plan.seed, plan.stream_key, replicate_index)."""
    return replicate_outcome(plan, replicate_index).reject


# ---------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------


def _run_chunk(plan: SimulationPlan, start: int, stop: int) -> _Tally:
    tally = _Tally()
    for index in range(start, stop):
        tally.add(replicate_outcome(plan, index))
    return tally


def _chunks(n: int, threads: int) -> List[Tuple[int, int]]:
    size = max(1, math.ceil(n / (threads * 4)))
    return [(start, min(start + size, n)) for start in range(0, n, size)]


def _run_all(plan: SimulationPlan, threads: int) -> _Tally:
    threads = max(1, int(threads))
    if threads == 1:
        return _run_chunk(plan, 0, plan.n_replicates)

    total = _Tally()
    chunks = _chunks(plan.n_replicates, threads)
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(_run_chunk, plan, start, stop) for start, stop in chunks]
        for future in futures:
            total.merge(future.result())
    return total


def operating_characteristics(plan: SimulationPlan, threads: int = DEFAULT_THREADS) -> OperatingCharacteristics:
    logger.info(
        "Simulating %s under the %s: %d replicates (seed=%d, threads=%d)",
        plan.design_kind.value,
        plan.hypothesis_state.value,
        plan.n_replicates,
        plan.seed,
        threads,
    )
    tally = _run_all(plan, threads)
    n = plan.n_replicates
    rate = tally.rejections / n

    mean_py = tally.sized_py_total / tally.sized_count if tally.sized_count else None
    mean_margin = math.fsum(tally.margins) / len(tally.margins) if tally.margins else None
    if tally.undefined:
        logger.warning("%d replicate(s) had an undefined counterfactual estimate", tally.undefined)

    with_margin = None
    if plan.design_kind is DesignKind.NI:
        if tally.no_margin:
            logger.info("%d NI replicate(s) had no margin and count as non-rejections", tally.no_margin)
        if tally.no_margin < n:
            with_margin = tally.rejections / (n - tally.no_margin)

    return OperatingCharacteristics(
        rejection_rate=rate,
        mc_std_err=math.sqrt(rate * (1.0 - rate) / n),
        n_replicates=n,
        n_rejections=tally.rejections,
        n_estimator_undefined=tally.undefined,
        n_no_margin=tally.no_margin,
        mean_sized_py=mean_py if plan.design_kind is DesignKind.NI else None,
        mean_margin=mean_margin if plan.design_kind is DesignKind.NI else None,
        rejection_rate_with_margin=with_margin,
    )


def ni_size_distribution(
    spec: RaeDesignSpec,
    design: IncidenceScenario,
    historical: HistoricalTrial,
    n_replicates: int,
    seed: int,
    ni_delta_alt: Optional[float] = None,
) -> NiSizeSummary:
    """
    Mean NI trial size over simulated historical trials. Uses the same
    sub-streams as an NI plan with this seed, so it matches that plan's
    mean_sized_py without simulating the trials themselves.
    """
    if n_replicates < 1:
        raise ValueError(f"n_replicates must be at least 1, got {n_replicates}")
    delta_alt = default_ni_delta_alt(spec, design) if ni_delta_alt is None else ni_delta_alt

    sized_total = 0
    sized_count = 0
    no_margin = 0
    margins = []
    for index in range(n_replicates):
        rng = replicate_rng(seed, (), index)
        hist_placebo, hist_active = _draw_historical(historical, rng)
        margin = ni_margin_95_95(hist_placebo, hist_active, spec.gamma_null)
        margins.append(margin.delta)
        try:
            if not margin.available:
                raise InfeasibleError("no margin")
            sized_total += size_ni(spec, design, margin.delta, delta_alt).total_py
            sized_count += 1
        except InfeasibleError:
            no_margin += 1

    if sized_count == 0:
        raise InfeasibleError("no simulated historical trial supported a margin")
    return NiSizeSummary(
        mean_sized_py=sized_total / sized_count,
        mean_margin=math.fsum(margins) / len(margins),
        n_replicates=n_replicates,
        n_no_margin=no_margin,
    )


# ---------------------------------------------------------------------
# Grid sweeps
# ---------------------------------------------------------------------


def sweep_grid(
    base_plan: SimulationPlan,
    lambda_P_grid: Sequence[float],
    lambda_A_grid: Sequence[float],
    reps_per_cell: int,
    threads: int = DEFAULT_THREADS,
) -> pd.DataFrame:
    """
    Rejection rate per (lambda_P, lambda_A) cell with lambda_A <= lambda_P.
    Only the truth moves: trial size, historical trial and counterfactual
    centre stay at the base plan's design values. Infeasible cells are kept
    with NaN rates.
    """
    if len(lambda_P_grid) == 0 or len(lambda_A_grid) == 0:
        raise ValueError("sweep grids must not be empty")
    if reps_per_cell < 1:
        raise ValueError(f"reps_per_cell must be at least 1, got {reps_per_cell}")

    rows = []
    cells = [
        (i, j, float(lp), float(la))
        for i, lp in enumerate(lambda_P_grid)
        for j, la in enumerate(lambda_A_grid)
        if la <= lp
    ]
    logger.info("Sweeping %d cells x %d replicates", len(cells), reps_per_cell)

    for count, (i, j, lambda_P, lambda_A) in enumerate(cells, start=1):
        try:
            truth = replace(base_plan.truth, lambda_P=lambda_P, lambda_A=lambda_A, lambda_E=None)
            cell_plan = replace(
                base_plan,
                truth=truth,
                n_replicates=reps_per_cell,
                stream_key=tuple(base_plan.stream_key) + (i, j),
            )
            oc = operating_characteristics(cell_plan, threads=threads)
            rows.append((lambda_P, lambda_A, oc.rejection_rate, oc.mc_std_err))
        except InfeasibleError as exc:
            logger.warning("Cell (%.4f, %.4f) infeasible: %s", lambda_P, lambda_A, exc)
            rows.append((lambda_P, lambda_A, float("nan"), float("nan")))
        if count % 50 == 0:
            logger.info("Finished %d / %d cells", count, len(cells))

    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)
