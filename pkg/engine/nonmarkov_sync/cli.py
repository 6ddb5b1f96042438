from __future__ import annotations

import argparse
import dataclasses
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any

from . import settings
from .artifacts import dumps, error_norm_frame, write_frame, write_json, write_trajectory
from .config import (
    EngineeredBlocks,
    RunConfig,
    Scenario,
    load_config,
    load_engineered,
    parse_config,
)
from .errors import ConfigError, DivergenceError, SpectralError
from .kernel import moments
from .matops import spectral_norm
from .model import AugmentedSystem, GeneratorSet, augment, pad_fields, product_expectations
from .reference import REFERENCE_GAIN, reference_config
from .solver import EXPONENTIAL_LIFT, IntegratorSpec, SimulationResult, simulate_augmented
from .sync import (
    certify_stability,
    check_conditions,
    delay_threshold,
    error_dynamics,
    find_gain,
    homogeneous,
    synthesize,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

DEFAULT_OUT = Path("out")


def _configure_logging(verbosity: int) -> None:
    level = settings.LOG_LEVEL
    if verbosity > 0:
        level = "DEBUG"
    elif verbosity < 0:
        level = "WARNING"
    logging.basicConfig(level=level, format=settings.LOG_FORMAT, force=True)


def _augmented(config: RunConfig, engineered: EngineeredBlocks | None) -> AugmentedSystem:
    try:
        return config.augmented(engineered)
    except ValueError as exc:
        raise ConfigError(f"Engineered blocks do not fit the subsystems: {exc}") from exc


def _integrator(config: RunConfig, args: argparse.Namespace) -> IntegratorSpec:
    overrides: dict[str, Any] = {}
    for key in ("method", "dt", "horizon"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "memory_cutoff", False):
        overrides["memory_cutoff"] = True
    try:
        return dataclasses.replace(config.integrator, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _schema(doc: dict[str, Any]) -> dict[str, Any]:
    return {"schema_version": settings.SCHEMA_VERSION, **doc}


def _delay_section(aug: AugmentedSystem, gain: float) -> dict[str, Any]:
    sub = aug.sub1
    if sub.m < sub.n_modes:
        sub = pad_fields(sub, sub.n_modes)
    try:
        threshold = delay_threshold(sub.omega, sub.kernel, gain)
    except ValueError as exc:
        return {"gain_a": gain, "error": str(exc)}
    mean_delay = moments(sub.kernel, sub.n_modes).mean_delay
    return {
        "gain_a": gain,
        "threshold": threshold,
        "mean_delay": mean_delay,
        "satisfied": mean_delay < threshold,
    }


def run_check(
    config: RunConfig,
    out_dir: Path,
    *,
    engineered: EngineeredBlocks | None = None,
    gain: float | None = None,
) -> int:
    """Write report.json; 0 iff the balance conditions hold and the certificate passes."""
    if engineered is None and config.engineered is None:
        raise ConfigError(
            "check needs engineered blocks: add 'engineered' to the config, "
            "pass --engineered synthesis.json, or run synthesize first"
        )
    aug = _augmented(config, engineered)
    report = check_conditions(aug)
    doc: dict[str, Any] = {"conditions": report.as_dict(), "certificate": None}

    passes = False
    if report.sufficient:
        err = error_dynamics(aug)
        certificate = certify_stability(err)
        doc["error_dynamics"] = err.as_dict()
        doc["certificate"] = certificate.as_dict()
        passes = certificate.passes
    else:
        doc["cause"] = (
            "the Hamiltonian balance or memory balance condition fails"
            + ("; the necessary conditions are violated" if report.necessary_violated else "")
        )
        logger.warning("Synchronization conditions fail: %s", doc["cause"])

    gain = gain if gain is not None else config.gain
    if gain is not None and homogeneous(aug.sub1, aug.sub2):
        doc["delay_bound"] = _delay_section(aug, gain)

    doc["status"] = "ok" if passes else "failed"
    write_json(out_dir / "report.json", _schema(doc))
    return EXIT_OK if passes else EXIT_FAILED


def run_synthesize(
    config: RunConfig, out_dir: Path, *, gain: float | None = None
) -> tuple[int, EngineeredBlocks | None]:
    """Write synthesis.json; the engineered blocks are returned on success."""
    sub1, sub2 = config.subsystems
    path = out_dir / "synthesis.json"
    if not homogeneous(sub1, sub2):
        residual = (
            spectral_norm(sub1.omega - sub2.omega)
            if sub1.omega.shape == sub2.omega.shape
            else None
        )
        doc = {
            "status": "rejected",
            "reason": (
                "subsystems are not identical; equal Hamiltonians are necessary for "
                "expectation synchronization and the synthesis assumes identical couplings "
                "and kernels"
            ),
            "omega_mismatch": residual,
        }
        logger.warning("Synthesis rejected: heterogeneous subsystems")
        write_json(path, _schema(doc))
        return EXIT_FAILED, None

    n = sub1.n_modes
    padded = max(0, n - sub1.m)
    sub = pad_fields(sub1, n) if padded else sub1

    a = gain if gain is not None else config.gain
    searched = a is None
    if a is None:
        a = find_gain(sub.omega, sub.kernel)
    if a is None:
        doc = {
            "status": "not_found",
            "reason": "no gain on the search grid satisfies the mean-delay threshold",
            "mean_delay": moments(sub.kernel, n).mean_delay,
            "padded_fields": padded,
        }
        write_json(path, _schema(doc))
        return EXIT_FAILED, None

    try:
        result = synthesize(sub, a)
        threshold = delay_threshold(sub.omega, sub.kernel, a)
    except ValueError as exc:
        raise ConfigError(str(exc), path="gain") from exc
    mean_delay = moments(sub.kernel, n).mean_delay
    doc = {
        "status": "ok",
        "synthesis": result.as_dict(),
        "gain_searched": searched,
        "padded_fields": padded,
        "delay_bound": {
            "threshold": threshold,
            "mean_delay": mean_delay,
            "satisfied": mean_delay < threshold,
        },
    }
    write_json(path, _schema(doc))
    return EXIT_OK, EngineeredBlocks(omega12=result.omega12, v12=result.v12, v21=result.v21)


def _simulate_one(
    aug: AugmentedSystem, gen: GeneratorSet, scenario: Scenario, spec: IntegratorSpec
) -> SimulationResult | DivergenceError:
    xi0 = product_expectations(scenario.alphas1, scenario.alphas2)
    try:
        return simulate_augmented(aug, xi0, spec, generators=gen)
    except DivergenceError as exc:
        logger.error("Scenario %s diverged: %s", scenario.name, exc)
        return exc
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"Scenario {scenario.name!r} cannot be simulated: {exc}") from exc


def run_simulate(
    config: RunConfig,
    out_dir: Path,
    *,
    spec: IntegratorSpec | None = None,
    engineered: EngineeredBlocks | None = None,
    jobs: int = 1,
) -> tuple[int, dict[str, SimulationResult]]:
    """Write traj_/err_ CSVs per scenario plus summary.json; divergence does not stop the rest."""
    if not config.scenarios:
        raise ConfigError("simulate needs at least one entry in 'scenarios'", path="scenarios")
    spec = spec or config.integrator
    aug = _augmented(config, engineered)
    if engineered is None and config.engineered is None:
        logger.warning("No engineered blocks given; simulating the decoupled subsystems")
    if spec.method == EXPONENTIAL_LIFT and not aug.kernel.is_exponential:
        raise ConfigError(
            "exponential-lift needs exponential-sum kernels; use convolution-quadrature",
            path="integrator.method",
        )
    gen = augment(aug)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        outcomes = list(
            pool.map(lambda s: _simulate_one(aug, gen, s, spec), config.scenarios)
        )

    results: dict[str, SimulationResult] = {}
    summary: dict[str, Any] = {}
    for scenario, outcome in zip(config.scenarios, outcomes, strict=True):
        if isinstance(outcome, DivergenceError):
            summary[scenario.name] = {"status": "diverged", "t": outcome.t, "norm": outcome.norm}
            continue
        results[scenario.name] = outcome
        write_trajectory(out_dir / f"traj_{scenario.name}.csv", outcome.state)
        write_trajectory(out_dir / f"err_{scenario.name}.csv", outcome.error)
        norms = outcome.error.norms
        decay_time = outcome.error.first_below(settings.DECAY_FRACTION)
        summary[scenario.name] = {
            "status": "ok",
            "initial_error_norm": norms[0],
            "final_error_norm": norms[-1],
            "decay_time": decay_time,
            "decayed": bool(norms[0] == 0 or norms[-1] <= settings.DECAY_FRACTION * norms[0]),
            "metadata": outcome.state.metadata,
        }

    diverged = len(results) < len(config.scenarios)
    doc = {
        "integrator": spec.as_dict(),
        "decay_fraction": settings.DECAY_FRACTION,
        "scenarios": summary,
        "status": "diverged" if diverged else "ok",
    }
    write_json(out_dir / "summary.json", _schema(doc))
    return (EXIT_DIVERGED if diverged else EXIT_OK), results


def run_reproduce(out_dir: Path, *, spec: IntegratorSpec | None = None, jobs: int = 1) -> int:
    """Built-in two-oscillator example: synthesize with a = 0.4, check, simulate, fig1_data.csv."""
    doc = reference_config()
    text = dumps(doc)
    write_json(out_dir / "config.json", doc)
    config = parse_config(text, base_dir=out_dir, source=out_dir / "config.json")

    code_synth, blocks = run_synthesize(config, out_dir, gain=REFERENCE_GAIN)
    if blocks is None:
        return code_synth
    code_check = run_check(config, out_dir, engineered=blocks, gain=REFERENCE_GAIN)
    code_sim, results = run_simulate(config, out_dir, spec=spec, engineered=blocks, jobs=jobs)
    if results:
        frame = error_norm_frame({name: result.error for name, result in results.items()})
        write_frame(out_dir / "fig1_data.csv", frame)
    return max(code_synth, code_check, code_sim)


def _out_dir(args: argparse.Namespace, config: RunConfig | None = None) -> Path:
    if args.out is not None:
        return args.out
    if config is not None and config.output_dir is not None:
        return config.output_dir
    return DEFAULT_OUT


def _engineered_arg(args: argparse.Namespace) -> EngineeredBlocks | None:
    path = getattr(args, "engineered", None)
    return load_engineered(path) if path is not None else None


def _cmd_check(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    return run_check(
        config, _out_dir(args, config), engineered=_engineered_arg(args), gain=args.gain
    )


def _cmd_synthesize(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    code, _ = run_synthesize(config, _out_dir(args, config), gain=args.gain)
    return code


def _cmd_simulate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    code, _ = run_simulate(
        config,
        _out_dir(args, config),
        spec=_integrator(config, args),
        engineered=_engineered_arg(args),
        jobs=args.jobs,
    )
    return code


def _cmd_reproduce(args: argparse.Namespace) -> int:
    base = IntegratorSpec(method=EXPONENTIAL_LIFT)
    overrides = {k: getattr(args, k) for k in ("method", "dt", "horizon")}
    try:
        spec = dataclasses.replace(base, **{k: v for k, v in overrides.items() if v is not None})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return run_reproduce(_out_dir(args), spec=spec, jobs=args.jobs)


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value!r}")
    return number


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nonmarkov-sync",
        description="Expectation synchronization of non-Markovian linear quantum systems.",
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level.")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Log warnings only.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser, *, config: bool = True) -> None:
        if config:
            p.add_argument("--config", type=Path, required=True, help="Run configuration (JSON).")
        p.add_argument("--out", type=Path, default=None, help="Output directory.")

    def add_integrator(p: argparse.ArgumentParser) -> None:
        p.add_argument("--method", default=None, help="cq | lift (or the full method names).")
        p.add_argument("--dt", type=float, default=None)
        p.add_argument("--horizon", type=float, default=None)
        p.add_argument("--jobs", type=_positive_int, default=1, help="Scenarios run in parallel.")

    check = sub.add_parser("check", help="Check the synchronization conditions and certificate.")
    add_common(check)
    check.add_argument("--engineered", type=Path, default=None, help="synthesis.json to use.")
    check.add_argument("--gain", type=float, default=None)
    check.set_defaults(handler=_cmd_check)

    synth = sub.add_parser("synthesize", help="Construct engineered coupling blocks.")
    add_common(synth)
    synth.add_argument("--gain", type=float, default=None, help="Skip the gain search.")
    synth.set_defaults(handler=_cmd_synthesize)

    simulate = sub.add_parser("simulate", help="Integrate the expectation dynamics.")
    add_common(simulate)
    add_integrator(simulate)
    simulate.add_argument("--engineered", type=Path, default=None, help="synthesis.json to use.")
    simulate.add_argument(
        "--memory-cutoff",
        action="store_true",
        help="Drop convolution lags where the kernel has decayed.",
    )
    simulate.set_defaults(handler=_cmd_simulate)

    reproduce = sub.add_parser("reproduce-example", help="Run the built-in two-oscillator example.")
    add_common(reproduce, config=False)
    add_integrator(reproduce)
    reproduce.set_defaults(handler=_cmd_reproduce)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(1 if args.verbose else -1 if args.quiet else 0)
    try:
        return args.handler(args)
    except ConfigError as exc:
        logger.error("Config error: %s", exc)
        return EXIT_CONFIG
    except DivergenceError as exc:
        logger.error("%s", exc)
        return EXIT_DIVERGED
    except SpectralError as exc:
        logger.error("Spectral computation failed: %s", exc)
        return EXIT_FAILED
    except ValueError as exc:
        logger.error("Invalid input: %s", exc)
        return EXIT_CONFIG
