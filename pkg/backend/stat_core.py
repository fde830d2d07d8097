# backend/stat_core.py

import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import special

from backend.config import ZERO_EVENT_CORRECTION

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ArmSummary:
    events: int
    person_years: float

    def __post_init__(self):
        if self.person_years <= 0:
            raise ValueError(f"person_years must be positive, got {self.person_years}")
        if self.events < 0 or int(self.events) != self.events:
            raise ValueError(f"events must be a non-negative integer, got {self.events}")

    @property
    def corrected_events(self) -> float:
        return float(self.events) if self.events >= 1 else ZERO_EVENT_CORRECTION


@dataclass(frozen=True)
class LogIncidenceEstimate:
    log_rate: float
    std_err: float

    def __post_init__(self):
        if not (math.isfinite(self.log_rate) and math.isfinite(self.std_err)):
            raise ValueError("log-incidence estimate must be finite")
        if self.std_err <= 0:
            raise ValueError(f"std_err must be positive, got {self.std_err}")

    @property
    def variance(self) -> float:
        return self.std_err ** 2

    @property
    def rate(self) -> float:
        return math.exp(self.log_rate)


def normal_cdf(x: float) -> float:
    return float(special.ndtr(x))


def normal_quantile(p: float) -> float:
    """
    Lower-tail quantile. Follows the z_alpha convention used throughout the
    procedures: normal_quantile(0.025) is about -1.96.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"normal_quantile needs 0 < p < 1, got {p}")
    return float(special.ndtri(p))


def estimate_log_incidence(arm: ArmSummary) -> LogIncidenceEstimate:
    events = arm.corrected_events
    return LogIncidenceEstimate(
        log_rate=math.log(events / arm.person_years),
        std_err=math.sqrt(1.0 / events),
    )


def log_rate_ratio_se(*arms: ArmSummary) -> float:
    """Standard error of a sum/difference of independent log incidences."""
    return math.sqrt(sum(1.0 / arm.corrected_events for arm in arms))


def replicate_rng(seed: int, stream_key: Tuple[int, ...], index: int) -> np.random.Generator:
    """
    Splitting rule: replicate `index` under `stream_key` always gets the
    generator of SeedSequence(seed, spawn_key=stream_key + (index,)). That is
    the same child `SeedSequence(seed).spawn()` would hand out, but without
    needing the siblings, so replicates can run in any order or process.
    """
    seq = np.random.SeedSequence(seed, spawn_key=tuple(stream_key) + (index,))
    return np.random.default_rng(seq)


def poisson_draw(mean: float, rng: np.random.Generator) -> int:
    if mean < 0:
        raise ValueError(f"Poisson mean must be non-negative, got {mean}")
    return int(rng.poisson(mean))
