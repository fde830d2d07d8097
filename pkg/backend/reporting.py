# backend/reporting.py

import json
import logging
from pathlib import Path
from textwrap import dedent
from typing import Dict, Iterable, Optional, Sequence

import pandas as pd

from backend.errors import InfeasibleError
from backend.simulator import OperatingCharacteristics, SimulationPlan
from backend.sizing import SizingResult

logger = logging.getLogger(__name__)

SIZING_COLUMNS = ["design", "total_py", "expected_events", "aux_json"]
CURVE_COLUMNS = ["x", "value"]


def _jsonable(value):
    if isinstance(value, float):
        return value
    if hasattr(value, "item"):
        return value.item()
    return value


def sizing_frame(results: Iterable[SizingResult]) -> pd.DataFrame:
    rows = [
        {
            "design": r.design_kind.value,
            "total_py": r.total_py,
            "expected_events": r.expected_events,
            "aux_json": json.dumps({k: _jsonable(v) for k, v in r.auxiliary.items()}, sort_keys=True),
        }
        for r in results
    ]
    return pd.DataFrame(rows, columns=SIZING_COLUMNS)


def operating_characteristics_frame(
    plan: SimulationPlan, oc: OperatingCharacteristics, runtime_seconds: Optional[float] = None
) -> pd.DataFrame:
    row = {
        "design": plan.design_kind.value,
        "hypothesis_state": plan.hypothesis_state.value,
        "trial_py": plan.trial_py,
        "seed": plan.seed,
        "n_replicates": oc.n_replicates,
        "rejection_rate": oc.rejection_rate,
        "mc_std_err": oc.mc_std_err,
        "n_estimator_undefined": oc.n_estimator_undefined,
        "n_no_margin": oc.n_no_margin,
        "mean_sized_py": oc.mean_sized_py,
        "mean_margin": oc.mean_margin,
    }
    if runtime_seconds is not None:
        row["runtime_seconds"] = round(runtime_seconds, 3)
    return pd.DataFrame([row])


def curve_frame(xs: Sequence[float], values: Sequence[float]) -> pd.DataFrame:
    return pd.DataFrame({"x": list(xs), "value": list(values)}, columns=CURVE_COLUMNS)


def render(frame: pd.DataFrame, fmt: str = "table") -> str:
    """CSV keeps full precision and a dot decimal separator; 'table' is for reading."""
    if fmt == "csv":
        return frame.to_csv(index=False, lineterminator="\n")
    if fmt == "table":
        with pd.option_context("display.max_columns", None, "display.width", 200):
            return frame.to_string(index=False)
    raise ValueError(f"unknown format '{fmt}' (expected csv or table)")


def write_frame(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    logger.info("Wrote %d rows to %s", len(frame), path)
    return path


def read_frame(path: Path) -> pd.DataFrame:
    return pd.read_csv(path)


def format_infeasible(exc: InfeasibleError, design: str) -> str:
    limiting = "unknown" if exc.limiting_power is None else f"{exc.limiting_power:.4f}"
    return dedent(
        f"""
        Design infeasible
        - design: {design}
        - reason: {exc}
        - limiting power as trial PYs grow: {limiting}
        """
    ).strip()


def format_comparison_summary(target: str, comparison: pd.DataFrame) -> str:
    checked = comparison[~comparison["unreproducible"]]
    failed = checked[~checked["passed"]]
    lines = [
        f"{target}: {len(checked) - len(failed)}/{len(checked)} checked cells within tolerance"
        f" ({int(comparison['unreproducible'].sum())} reported only)"
    ]
    for _, row in failed.iterrows():
        lines.append(
            f"  FAIL {row['cell']}: observed {row['observed']:.6g}, expected {row['expected']:.6g}"
            f" ({row['mode']} {row['tolerance']:g})"
        )
    return "\n".join(lines)


def frames_to_files(frames: Dict[str, pd.DataFrame], out_dir: Path) -> Dict[str, Path]:
    return {name: write_frame(frame, out_dir / f"{name}.csv") for name, frame in frames.items()}
