"""JSON run configuration.

Complex entries are ``[re, im]`` pairs (a bare number means a real value). Kernels follow::

    {"channels": [{"form": "exp", "terms": [{"c": 1.0, "beta": 9.0}]},
                  {"form": "tabulated", "dt": 0.01, "values": [...]},
                  {"form": "tabulated", "dt": 0.01, "csv": "gamma.csv", "column": "gamma"}]}

Unknown keys are rejected. Errors carry the JSON path and, when it can be located, the line of
the offending key in the source document.
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections.abc import Iterator, Mapping, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import polars as pl

from . import settings
from .errors import ConfigError
from .kernel import KernelChannel, MemoryKernel
from .model import AugmentedSystem, SubsystemParams, pad_fields
from .solver import CONVOLUTION_QUADRATURE, EXPONENTIAL_LIFT, IntegratorSpec

logger = logging.getLogger(__name__)

_TOP_KEYS = {
    "schema_version",
    "subsystems",
    "engineered",
    "gain",
    "integrator",
    "scenarios",
    "output_dir",
}
_SUBSYSTEM_KEYS = {"omega", "v", "kernel"}
_ENGINEERED_KEYS = {"omega12", "v12", "v21"}
# synthesis.json also carries the gain and K; they are accepted and ignored.
_SYNTHESIS_KEYS = _ENGINEERED_KEYS | {"gain_a", "k_mat"}
_INTEGRATOR_KEYS = {"method", "dt", "horizon", "memory_cutoff"}
_SCENARIO_KEYS = {"name", "alphas1", "alphas2"}
_CHANNEL_KEYS = {"form", "terms", "dt", "values", "csv", "column"}
_SCENARIO_NAME = re.compile(r"[A-Za-z0-9_-]+")


@dataclass(frozen=True)
class Scenario:
    name: str
    alphas1: tuple[complex, ...]
    alphas2: tuple[complex, ...]


@dataclass(frozen=True, eq=False)
class EngineeredBlocks:
    omega12: np.ndarray
    v12: np.ndarray
    v21: np.ndarray

    @property
    def m(self) -> int:
        return self.v12.shape[0]


@dataclass(frozen=True, eq=False)
class RunConfig:
    subsystems: tuple[SubsystemParams, SubsystemParams]
    integrator: IntegratorSpec
    engineered: EngineeredBlocks | None = None
    gain: float | None = None
    scenarios: tuple[Scenario, ...] = ()
    output_dir: Path | None = None
    source: Path | None = field(default=None, compare=False)

    def augmented(self, engineered: EngineeredBlocks | None = None) -> AugmentedSystem:
        return assemble(self.subsystems, engineered if engineered is not None else self.engineered)


def assemble(
    subsystems: Sequence[SubsystemParams], blocks: EngineeredBlocks | None
) -> AugmentedSystem:
    """Augmented system, padding both subsystems to the engineered row count."""
    sub1, sub2 = subsystems
    if blocks is None:
        return AugmentedSystem.decoupled(sub1, sub2)
    if blocks.m > max(sub1.m, sub2.m):
        sub1, sub2 = pad_fields(sub1, blocks.m), pad_fields(sub2, blocks.m)
    return AugmentedSystem(sub1, sub2, blocks.omega12, blocks.v12, blocks.v21)


def default_integrator(subsystems: Sequence[SubsystemParams]) -> IntegratorSpec:
    exponential = all(sub.kernel.is_exponential for sub in subsystems)
    return IntegratorSpec(method=EXPONENTIAL_LIFT if exponential else CONVOLUTION_QUADRATURE)


class _Reader:
    def __init__(self, text: str, base_dir: Path):
        self.text = text
        self.base_dir = base_dir
        self.path: list[str | int] = []

    @contextmanager
    def at(self, *parts: str | int) -> Iterator[None]:
        depth = len(self.path)
        self.path.extend(parts)
        try:
            yield
        except ConfigError:
            raise
        except ValueError as exc:
            raise self.error(str(exc)) from exc
        finally:
            del self.path[depth:]

    def _path_text(self) -> str:
        out = ""
        for part in self.path:
            out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else part)
        return out

    def _line(self) -> int | None:
        # Walk the source text key by key; an index k before a key selects its (k+1)-th match.
        pos = 0
        skip = 0
        found = False
        for part in self.path:
            if isinstance(part, int):
                skip += part
                continue
            needle = json.dumps(part)
            for _ in range(skip + 1):
                hit = self.text.find(needle, pos)
                if hit < 0:
                    return self.text.count("\n", 0, pos) + 1 if found else None
                pos = hit + len(needle)
            skip = 0
            found = True
        return self.text.count("\n", 0, pos) + 1 if found else None

    def error(self, message: str) -> ConfigError:
        return ConfigError(message, line=self._line(), path=self._path_text() or None)

    def mapping(self, value: Any, allowed: set[str], *, required: Sequence[str] = ()) -> dict:
        if not isinstance(value, Mapping):
            raise self.error(f"Expected an object, got {type(value).__name__}")
        for key in value:
            if key not in allowed:
                with self.at(key):
                    raise self.error(f"Unknown key {key!r} (allowed: {sorted(allowed)})")
        for key in required:
            if key not in value:
                raise self.error(f"Missing required key {key!r}")
        return dict(value)

    def sequence(self, value: Any) -> list:
        if not isinstance(value, list):
            raise self.error(f"Expected a list, got {type(value).__name__}")
        return value

    def number(self, value: Any) -> float:
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise self.error(f"Expected a number, got {value!r}")
        if not math.isfinite(value):
            raise self.error(f"Expected a finite number, got {value!r}")
        return float(value)

    def complex_number(self, value: Any) -> complex:
        if isinstance(value, list):
            if len(value) != 2:
                raise self.error(f"Complex entries are [re, im] pairs, got {value!r}")
            return complex(self.number(value[0]), self.number(value[1]))
        return complex(self.number(value), 0.0)

    def matrix(self, value: Any, *, complex_entries: bool = False) -> np.ndarray:
        rows = self.sequence(value)
        if not rows:
            raise self.error("Matrix must have at least one row")
        parsed = []
        for i, row in enumerate(rows):
            with self.at(i):
                entries = self.sequence(row)
                if len(entries) != len(self.sequence(rows[0])):
                    raise self.error("Matrix rows have different lengths")
                parse = self.complex_number if complex_entries else self.number
                parsed.append([parse(entry) for entry in entries])
        return np.array(parsed, dtype=np.complex128 if complex_entries else np.float64)


def _read_csv_column(path: Path, column: str) -> list[float]:
    frame = pl.read_csv(path)
    if column not in frame.columns:
        raise ValueError(f"Column {column!r} not found in {str(path)!r} (has {frame.columns})")
    return frame[column].cast(pl.Float64).to_list()


def _channel(reader: _Reader, value: Any) -> KernelChannel:
    raw = reader.mapping(value, _CHANNEL_KEYS, required=["form"])
    form = raw["form"]
    if form == "exp":
        terms = []
        with reader.at("terms"):
            for k, term in enumerate(reader.sequence(raw.get("terms"))):
                with reader.at(k):
                    entry = reader.mapping(term, {"c", "beta"}, required=["c", "beta"])
                    with reader.at("c"):
                        weight = reader.number(entry["c"])
                    with reader.at("beta"):
                        rate = reader.number(entry["beta"])
                    terms.append((weight, rate))
        return KernelChannel.exponential(terms)
    if form == "tabulated":
        if "dt" not in raw:
            raise reader.error("Tabulated channel needs 'dt'")
        with reader.at("dt"):
            dt = reader.number(raw["dt"])
        if ("values" in raw) == ("csv" in raw):
            raise reader.error("Tabulated channel needs exactly one of 'values' or 'csv'")
        if "csv" in raw:
            with reader.at("csv"):
                csv_path = reader.base_dir / str(raw["csv"])
                try:
                    values = _read_csv_column(csv_path, str(raw.get("column", "gamma")))
                except (OSError, pl.exceptions.PolarsError) as exc:
                    raise reader.error(f"Cannot read kernel samples: {exc}") from exc
            logger.debug("Read %d kernel samples from %s", len(values), csv_path)
        else:
            with reader.at("values"):
                values = [reader.number(v) for v in reader.sequence(raw["values"])]
        return KernelChannel.tabulated(dt, values)
    with reader.at("form"):
        raise reader.error(f"Unknown kernel form {form!r} (expected 'exp' or 'tabulated')")


def _kernel(reader: _Reader, value: Any) -> MemoryKernel:
    raw = reader.mapping(value, {"channels"}, required=["channels"])
    channels = []
    with reader.at("channels"):
        for j, channel in enumerate(reader.sequence(raw["channels"])):
            with reader.at(j):
                channels.append(_channel(reader, channel))
        return MemoryKernel(tuple(channels))


def _subsystem(reader: _Reader, value: Any) -> SubsystemParams:
    raw = reader.mapping(value, _SUBSYSTEM_KEYS, required=sorted(_SUBSYSTEM_KEYS))
    with reader.at("omega"):
        omega = reader.matrix(raw["omega"])
    with reader.at("v"):
        v = reader.matrix(raw["v"], complex_entries=True)
    with reader.at("kernel"):
        kernel = _kernel(reader, raw["kernel"])
    return SubsystemParams(omega=omega, v=v, kernel=kernel)


def _engineered(reader: _Reader, value: Any, allowed: set[str]) -> EngineeredBlocks:
    raw = reader.mapping(value, allowed, required=sorted(_ENGINEERED_KEYS))
    with reader.at("omega12"):
        omega12 = reader.matrix(raw["omega12"])
    blocks = {}
    for name in ("v12", "v21"):
        with reader.at(name):
            blocks[name] = reader.matrix(raw[name], complex_entries=True)
    if blocks["v12"].shape != blocks["v21"].shape:
        raise reader.error(
            f"v12 and v21 shapes differ: {blocks['v12'].shape!r} vs {blocks['v21'].shape!r}"
        )
    return EngineeredBlocks(omega12=omega12, v12=blocks["v12"], v21=blocks["v21"])


def _integrator(reader: _Reader, value: Any, default: IntegratorSpec) -> IntegratorSpec:
    raw = reader.mapping(value, _INTEGRATOR_KEYS)
    kwargs: dict[str, Any] = {"method": default.method}
    for key in ("dt", "horizon"):
        if key in raw:
            with reader.at(key):
                kwargs[key] = reader.number(raw[key])
    if "method" in raw:
        kwargs["method"] = str(raw["method"])
    if "memory_cutoff" in raw:
        with reader.at("memory_cutoff"):
            if not isinstance(raw["memory_cutoff"], bool):
                raise reader.error(f"Expected true/false, got {raw['memory_cutoff']!r}")
        kwargs["memory_cutoff"] = raw["memory_cutoff"]
    return IntegratorSpec(**kwargs)


def _scenario(reader: _Reader, value: Any, n_modes: int) -> Scenario:
    raw = reader.mapping(value, _SCENARIO_KEYS, required=sorted(_SCENARIO_KEYS))
    name = raw["name"]
    if not isinstance(name, str) or not _SCENARIO_NAME.fullmatch(name):
        with reader.at("name"):
            raise reader.error(f"Scenario names must be alphanumeric (with - or _), got {name!r}")
    amplitudes = {}
    for key in ("alphas1", "alphas2"):
        with reader.at(key):
            items = reader.sequence(raw[key])
            if len(items) != n_modes:
                raise reader.error(f"Expected {n_modes} amplitude(s), got {len(items)}")
            amplitudes[key] = tuple(reader.complex_number(z) for z in items)
    return Scenario(name=name, alphas1=amplitudes["alphas1"], alphas2=amplitudes["alphas2"])


def _decode(text: str, source: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Invalid JSON in {source}: {exc.msg}", line=exc.lineno) from exc


def parse_config(
    text: str, *, base_dir: Path | None = None, source: Path | None = None
) -> RunConfig:
    doc = _decode(text, str(source) if source else "config")
    reader = _Reader(text, base_dir or Path.cwd())
    raw = reader.mapping(doc, _TOP_KEYS, required=["subsystems"])

    if "schema_version" in raw:
        with reader.at("schema_version"):
            if raw["schema_version"] != settings.SCHEMA_VERSION:
                raise reader.error(f"Unsupported schema version {raw['schema_version']!r}")

    with reader.at("subsystems"):
        items = reader.sequence(raw["subsystems"])
        if len(items) != 2:
            raise reader.error(f"Expected exactly two subsystems, got {len(items)}")
        subsystems = []
        for i, item in enumerate(items):
            with reader.at(i):
                subsystems.append(_subsystem(reader, item))
        sub1, sub2 = subsystems
        if sub1.n_modes != sub2.n_modes:
            raise reader.error(f"Subsystems have {sub1.n_modes} and {sub2.n_modes} modes")

    engineered = None
    if raw.get("engineered") is not None:
        with reader.at("engineered"):
            engineered = _engineered(reader, raw["engineered"], _ENGINEERED_KEYS)
            assemble((sub1, sub2), engineered)

    gain = None
    if raw.get("gain") is not None:
        with reader.at("gain"):
            gain = reader.number(raw["gain"])

    integrator = default_integrator(subsystems)
    if "integrator" in raw:
        with reader.at("integrator"):
            integrator = _integrator(reader, raw["integrator"], integrator)

    scenarios: list[Scenario] = []
    with reader.at("scenarios"):
        for k, item in enumerate(reader.sequence(raw.get("scenarios", []))):
            with reader.at(k):
                scenarios.append(_scenario(reader, item, sub1.n_modes))
        names = [s.name for s in scenarios]
        if len(set(names)) != len(names):
            raise reader.error(f"Scenario names must be unique, got {names!r}")

    output_dir = None
    if raw.get("output_dir") is not None:
        output_dir = reader.base_dir / str(raw["output_dir"])

    return RunConfig(
        subsystems=(sub1, sub2),
        integrator=integrator,
        engineered=engineered,
        gain=gain,
        scenarios=tuple(scenarios),
        output_dir=output_dir,
        source=source,
    )


def load_config(path: Path) -> RunConfig:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"Cannot read config {str(path)!r}: {exc.strerror}") from exc
    return parse_config(text, base_dir=path.resolve().parent, source=path)


def load_engineered(path: Path) -> EngineeredBlocks:
    """Engineered blocks from a synthesis.json written by the synthesize command."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"Cannot read {str(path)!r}: {exc.strerror}") from exc
    doc = _decode(text, str(path))
    reader = _Reader(text, path.resolve().parent)
    if not isinstance(doc, Mapping) or not isinstance(doc.get("synthesis"), Mapping):
        raise reader.error(f"{str(path)!r} has no 'synthesis' section")
    with reader.at("synthesis"):
        return _engineered(reader, doc["synthesis"], _SYNTHESIS_KEYS)
