# backend/scenarios.py

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union, get_args, get_origin

import numpy as np
import yaml

from backend.cf_models import (
    CfPlaceboModel,
    ExternalFollowUp,
    FixedVariance,
    RecencyScreening,
    recency_model_from_assay,
)
from backend.config import (
    DEFAULT_GRID_POINTS,
    DEFAULT_REPLICATES,
    DEFAULT_REPS_PER_CELL,
    DEFAULT_SEED,
    DEFAULT_THREADS,
    SE_FRR,
    SE_MDRI_RELATIVE,
)
from backend.errors import ConfigError
from backend.procedures import RaeDesignSpec
from backend.simulator import HypothesisState, SimulationPlan, build_plan
from backend.sizing import DesignKind, HistoricalTrial, IncidenceScenario, single_arm_gammas

logger = logging.getLogger(__name__)

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "data" / "scenarios"
SCHEMA_VERSION = 1


def _require(condition: bool, field_path: str, message: str):
    if not condition:
        raise ConfigError(field_path, message)


# ---------------------------------------------------------------------
# Config sections (values stored as written, so emit -> parse round-trips)
# ---------------------------------------------------------------------


@dataclass(frozen=True)
class HypothesisSection:
    gamma: float
    gamma_alt: float
    alpha: float = 0.025
    power: float = 0.8

    def __post_init__(self):
        _require(self.gamma > 0, "gamma", "must be positive")
        _require(self.gamma_alt > self.gamma, "gamma_alt", "must exceed gamma (gamma* > gamma)")
        _require(0 < self.alpha < 0.5, "alpha", "must lie in (0, 0.5)")
        _require(0.5 < self.power < 1, "power", "must lie in (0.5, 1)")


@dataclass(frozen=True)
class ScenarioSection:
    """Rates in cases/PY, tau in years."""

    lambda_P: float
    lambda_A: Optional[float] = None
    placebo_to_active_ratio: Optional[float] = None
    allocation_E: float = 0.5
    tau: float = 1.0

    def __post_init__(self):
        _require(self.lambda_P > 0, "lambda_P", "must be positive")
        _require(
            (self.lambda_A is None) != (self.placebo_to_active_ratio is None),
            "lambda_A",
            "give exactly one of lambda_A or placebo_to_active_ratio",
        )
        if self.lambda_A is not None:
            _require(0 < self.lambda_A < self.lambda_P, "lambda_A", "must lie in (0, lambda_P)")
        else:
            _require(self.placebo_to_active_ratio > 1, "placebo_to_active_ratio", "must exceed 1")
        _require(0 < self.allocation_E < 1, "allocation_E", "must lie in (0, 1)")
        _require(self.tau > 0, "tau", "must be positive")

    @property
    def active_rate(self) -> float:
        if self.lambda_A is not None:
            return self.lambda_A
        return self.lambda_P / self.placebo_to_active_ratio


_CF_FIELDS = {
    ExternalFollowUp.kind: ({"follow_up_py"}, set()),
    RecencyScreening.kind: ({"prevalence", "mdri_days", "frr", "cutoff_years"}, {"se_mdri_relative", "se_frr"}),
    FixedVariance.kind: ({"c_p0", "c_p1"}, set()),
}


@dataclass(frozen=True)
class CounterfactualSection:
    kind: str
    follow_up_py: Optional[float] = None
    prevalence: Optional[float] = None
    mdri_days: Optional[float] = None
    frr: Optional[float] = None
    cutoff_years: Optional[float] = None
    se_mdri_relative: Optional[float] = None
    se_frr: Optional[float] = None
    c_p0: Optional[float] = None
    c_p1: Optional[float] = None

    def __post_init__(self):
        _require(self.kind in _CF_FIELDS, "kind", f"must be one of {sorted(_CF_FIELDS)}")
        required, optional = _CF_FIELDS[self.kind]
        for f in dataclasses.fields(self):
            if f.name == "kind":
                continue
            value = getattr(self, f.name)
            if f.name in required:
                _require(value is not None, f.name, f"required for kind '{self.kind}'")
            elif f.name not in optional:
                _require(value is None, f.name, f"not used by kind '{self.kind}'")
        try:
            self.model()
        except ValueError as exc:
            raise ConfigError("", str(exc)) from exc

    def model(self) -> CfPlaceboModel:
        if self.kind == ExternalFollowUp.kind:
            return ExternalFollowUp(follow_up_py=self.follow_up_py)
        if self.kind == RecencyScreening.kind:
            return recency_model_from_assay(
                prevalence=self.prevalence,
                mdri_days=self.mdri_days,
                frr=self.frr,
                cutoff_years=self.cutoff_years,
                se_mdri_relative=SE_MDRI_RELATIVE if self.se_mdri_relative is None else self.se_mdri_relative,
                se_frr=SE_FRR if self.se_frr is None else self.se_frr,
            )
        return FixedVariance(c_p0=self.c_p0, c_p1=self.c_p1)


@dataclass(frozen=True)
class HistoricalSection:
    lambda_P0: float
    lambda_A0: float
    total_py: float = 3610.0
    delta_alt_ratio: Optional[float] = None

    def __post_init__(self):
        _require(self.lambda_P0 > 0, "lambda_P0", "must be positive")
        _require(self.lambda_A0 > 0, "lambda_A0", "must be positive")
        _require(self.total_py > 0, "total_py", "must be positive")
        if self.delta_alt_ratio is not None:
            _require(self.delta_alt_ratio > 0, "delta_alt_ratio", "must be a positive rate ratio")


@dataclass(frozen=True)
class SingleArmSection:
    gamma_E: float
    gamma_E_alt: float

    def __post_init__(self):
        _require(self.gamma_E >= 0, "gamma_E", "must be non-negative")
        _require(self.gamma_E_alt > self.gamma_E, "gamma_E_alt", "must exceed gamma_E")


@dataclass(frozen=True)
class SimulationSection:
    seed: int = DEFAULT_SEED
    replicates: int = DEFAULT_REPLICATES
    hypothesis_state: str = HypothesisState.NULL.value
    threads: int = DEFAULT_THREADS

    def __post_init__(self):
        _require(self.seed >= 0, "seed", "must be non-negative")
        _require(self.replicates >= 1, "replicates", "must be at least 1")
        _require(
            self.hypothesis_state in {s.value for s in HypothesisState},
            "hypothesis_state",
            "must be 'null' or 'alternative'",
        )
        _require(self.threads >= 1, "threads", "must be at least 1")


@dataclass(frozen=True)
class AxisSection:
    start: float
    stop: float
    num: int = DEFAULT_GRID_POINTS

    def __post_init__(self):
        _require(self.num >= 1, "num", "grid needs at least one point")
        _require(0 < self.start <= self.stop, "start", "need 0 < start <= stop")

    def values(self) -> List[float]:
        return [float(v) for v in np.linspace(self.start, self.stop, self.num)]


@dataclass(frozen=True)
class GridSection:
    lambda_P: AxisSection
    lambda_A: AxisSection
    reps_per_cell: int = DEFAULT_REPS_PER_CELL

    def __post_init__(self):
        _require(self.reps_per_cell >= 1, "reps_per_cell", "must be at least 1")


@dataclass(frozen=True)
class ScenarioConfig:
    hypothesis: HypothesisSection
    scenario: ScenarioSection
    design: str = DesignKind.ACCF.value
    version: int = SCHEMA_VERSION
    name: str = "custom"
    counterfactual: Optional[CounterfactualSection] = None
    historical: Optional[HistoricalSection] = None
    single_arm: Optional[SingleArmSection] = None
    simulation: SimulationSection = field(default_factory=SimulationSection)
    grid: Optional[GridSection] = None

    def __post_init__(self):
        _require(self.version == SCHEMA_VERSION, "version", f"only version {SCHEMA_VERSION} is supported")
        _require(self.design in {k.value for k in DesignKind}, "design", f"must be one of {[k.value for k in DesignKind]}")
        if self.design == DesignKind.NI.value:
            _require(self.historical is not None, "historical", "required for the ni design")
        else:
            _require(self.counterfactual is not None, "counterfactual", f"required for the {self.design} design")

    # -- library objects ------------------------------------------------

    @property
    def design_kind(self) -> DesignKind:
        return DesignKind(self.design)

    def rae_spec(self) -> RaeDesignSpec:
        h = self.hypothesis
        return RaeDesignSpec(gamma_null=h.gamma, gamma_alt=h.gamma_alt, alpha=h.alpha, target_power=h.power)

    def incidence_scenario(self) -> IncidenceScenario:
        s = self.scenario
        return IncidenceScenario(
            lambda_P=s.lambda_P,
            lambda_A=s.active_rate,
            allocation_E=s.allocation_E,
            tau=s.tau,
        )

    def cf_model(self) -> Optional[CfPlaceboModel]:
        return self.counterfactual.model() if self.counterfactual is not None else None

    def historical_trial(self) -> Optional[HistoricalTrial]:
        h = self.historical
        if h is None:
            return None
        return HistoricalTrial(lambda_P0=h.lambda_P0, lambda_A0=h.lambda_A0, total_py=h.total_py)

    def ni_delta_alt(self) -> Optional[float]:
        """delta* on the log scale; None falls back to (1 - gamma*) * effect."""
        if self.historical is None or self.historical.delta_alt_ratio is None:
            return None
        return math.log(self.historical.delta_alt_ratio)

    def single_arm_margins(self):
        if self.single_arm is not None:
            return self.single_arm.gamma_E, self.single_arm.gamma_E_alt
        return single_arm_gammas(self.rae_spec(), self.incidence_scenario())

    def simulation_plan(
        self,
        hypothesis_state: Optional[str] = None,
        replicates: Optional[int] = None,
        seed: Optional[int] = None,
    ) -> SimulationPlan:
        gamma_E, gamma_E_alt = (None, None)
        if self.design_kind is DesignKind.SINGLE_ARM:
            gamma_E, gamma_E_alt = self.single_arm_margins()
        return build_plan(
            self.design_kind,
            self.rae_spec(),
            self.incidence_scenario(),
            hypothesis_state or self.simulation.hypothesis_state,
            replicates if replicates is not None else self.simulation.replicates,
            seed if seed is not None else self.simulation.seed,
            cf_model=self.cf_model(),
            historical=self.historical_trial(),
            ni_delta_alt=self.ni_delta_alt(),
            gamma_E=gamma_E,
            gamma_E_alt=gamma_E_alt,
        )

    def with_design(self, design: Union[str, DesignKind]) -> "ScenarioConfig":
        return dataclasses.replace(self, design=DesignKind(design).value)

    def to_dict(self) -> Dict[str, Any]:
        def strip(value):
            if isinstance(value, dict):
                return {k: strip(v) for k, v in value.items() if v is not None}
            return value

        data = strip(dataclasses.asdict(self))
        order = ["version", "name", "design", "hypothesis", "scenario", "counterfactual",
                 "historical", "single_arm", "simulation", "grid"]
        return {key: data[key] for key in order if key in data}


# ---------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------

def _scalar_type(annotation):
    if get_origin(annotation) is Union:
        return next(a for a in get_args(annotation) if a is not type(None))
    return annotation


def _coerce(value: Any, annotation, path: str) -> Any:
    target = _scalar_type(annotation)
    if dataclasses.is_dataclass(target):
        return _build_section(target, value, path)
    if target is str:
        _require(isinstance(value, str), path, f"expected text, got {value!r}")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if target is int:
        _require(float(value).is_integer(), path, f"expected an integer, got {value!r}")
        return int(value)
    _require(math.isfinite(value), path, "must be finite")
    return float(value)


def _build_section(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected a mapping, got {type(raw).__name__}")

    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in raw:
        _require(key in known, _join(path, str(key)), "unknown key")

    kwargs = {}
    for name, f in known.items():
        has_default = f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING
        if name not in raw or raw[name] is None:
            _require(has_default, _join(path, name), "missing required field")
            continue
        kwargs[name] = _coerce(raw[name], f.type, _join(path, name))

    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(_join(path, exc.field_path), exc.message) from exc


def _join(path: str, name: str) -> str:
    if not name:
        return path
    return f"{path}.{name}" if path else name


def _parse_text(text: str, origin: str) -> ScenarioConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else origin
        raise ConfigError(where, f"invalid YAML ({getattr(exc, 'problem', exc)})") from exc
    if not isinstance(raw, dict):
        raise ConfigError("", f"{origin}: not a scenario file, built-in name or YAML mapping")
    return _build_section(ScenarioConfig, raw, "")


# ---------------------------------------------------------------------
# Built-in named scenarios (loaded once per process)
# ---------------------------------------------------------------------


@dataclass(frozen=True)
class NamedScenario:
    identifier: str
    version: int
    config: ScenarioConfig


_BUILTINS: Dict[str, NamedScenario] = {}


def _load_builtins():
    global _BUILTINS

    if _BUILTINS:
        return

    if not SCENARIO_DIR.exists():
        raise RuntimeError(f"Scenario directory not found at {SCENARIO_DIR}.")

    loaded: Dict[str, NamedScenario] = {}
    for path in sorted(SCENARIO_DIR.glob("*.yaml")):
        config = _parse_text(path.read_text(encoding="utf-8"), str(path))
        loaded[path.stem] = NamedScenario(identifier=path.stem, version=config.version, config=config)
    logger.debug("Loaded %d built-in scenarios", len(loaded))
    _BUILTINS = loaded


def builtin_names() -> List[str]:
    _load_builtins()
    return sorted(_BUILTINS)


def named_scenario(identifier: str) -> NamedScenario:
    _load_builtins()
    if identifier not in _BUILTINS:
        raise ConfigError("", f"unknown built-in scenario '{identifier}' (choose from {builtin_names()})")
    return _BUILTINS[identifier]


def parse_config(source: Union[str, Path]) -> ScenarioConfig:
    """
    Accepts a path to a YAML file, the name of a built-in scenario, or YAML
    text. Raises ConfigError naming the offending field.
    """
    if isinstance(source, Path):
        return _parse_text(source.read_text(encoding="utf-8"), str(source))

    if "\n" not in source:
        path = Path(source)
        if path.is_file():
            return _parse_text(path.read_text(encoding="utf-8"), source)
        if ":" not in source:
            return named_scenario(source).config

    return _parse_text(source, "<text>")


def emit_config(config: ScenarioConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False, default_flow_style=False)
