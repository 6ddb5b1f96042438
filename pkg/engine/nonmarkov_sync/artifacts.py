from __future__ import annotations

import json
import logging
import math
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np
import polars as pl

from . import settings
from .solver import Trajectory

logger = logging.getLogger(__name__)


def _tmp_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".tmp")


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = _tmp_path(path)
    tmp_path.write_text(text, encoding="utf-8")
    tmp_path.replace(path)


def rounded(value: Any, digits: int = settings.SIGNIFICANT_DIGITS) -> Any:
    """Floats cut to `digits` significant digits (non-finite become null), containers walked."""
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, float | np.floating):
        x = float(value)
        if not math.isfinite(x):
            return None
        return float(f"{x:.{digits}g}")
    if isinstance(value, int | np.integer):
        return int(value)
    if isinstance(value, complex | np.complexfloating):
        return [rounded(value.real, digits), rounded(value.imag, digits)]
    if isinstance(value, np.ndarray):
        return rounded(value.tolist(), digits)
    if isinstance(value, Mapping):
        return {str(k): rounded(v, digits) for k, v in value.items()}
    if isinstance(value, Sequence) and not isinstance(value, str):
        return [rounded(v, digits) for v in value]
    return value


def dumps(doc: Mapping[str, Any]) -> str:
    return json.dumps(rounded(doc), ensure_ascii=False, sort_keys=True, indent=2) + "\n"


def write_json(path: Path, doc: Mapping[str, Any]) -> Path:
    _atomic_write(path, dumps(doc))
    logger.info("Wrote %s", path)
    return path


def write_frame(path: Path, frame: pl.DataFrame) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = _tmp_path(path)
    # 1 + 11 decimals in scientific notation: 12 significant digits.
    frame.write_csv(
        tmp_path,
        float_scientific=True,
        float_precision=settings.SIGNIFICANT_DIGITS - 1,
    )
    tmp_path.replace(path)
    logger.info("Wrote %s (%d rows)", path, frame.height)
    return path


def write_trajectory(path: Path, trajectory: Trajectory) -> Path:
    return write_frame(path, trajectory.to_frame())


def error_norm_frame(errors: Mapping[str, Trajectory]) -> pl.DataFrame:
    """t plus one |e|_<name> column per scenario; all trajectories must share the time grid."""
    if not errors:
        raise ValueError("Need at least one error trajectory")
    trajectories = list(errors.values())
    times = trajectories[0].times
    for name, trajectory in errors.items():
        if trajectory.times.shape != times.shape or not np.allclose(trajectory.times, times):
            raise ValueError(f"Trajectory {name!r} is on a different time grid")
    columns: dict[str, np.ndarray] = {"t": times}
    for name, trajectory in errors.items():
        columns[f"|e|_{name}"] = trajectory.norms
    return pl.DataFrame(columns)
