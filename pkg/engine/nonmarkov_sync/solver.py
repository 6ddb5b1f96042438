"""Fixed-step integrators for linear Volterra integro-differential equations.

    ẏ(t) = E y(t) + ∫_0^t F(t - τ) y(τ) dτ

Two independent schemes: a trapezoidal convolution quadrature with a Heun step, valid for
any kernel, and an exact lift to an augmented ODE when F is a sum of decaying exponentials.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Final

import numpy as np
import polars as pl
from numpy.typing import ArrayLike, NDArray

from . import settings
from .errors import DivergenceError
from .matops import RealMatrix, frozen
from .model import AugmentedSystem, GeneratorSet, augment
from .sync import ErrorDynamics

logger = logging.getLogger(__name__)

CONVOLUTION_QUADRATURE: Final = "convolution-quadrature"
EXPONENTIAL_LIFT: Final = "exponential-lift"

_METHOD_ALIASES = {
    "cq": CONVOLUTION_QUADRATURE,
    CONVOLUTION_QUADRATURE: CONVOLUTION_QUADRATURE,
    "lift": EXPONENTIAL_LIFT,
    EXPONENTIAL_LIFT: EXPONENTIAL_LIFT,
}


def normalize_method(value: str) -> str:
    try:
        return _METHOD_ALIASES[value]
    except KeyError:
        raise ValueError(
            f"Unknown integration method {value!r} (expected one of {sorted(_METHOD_ALIASES)})"
        ) from None


@dataclass(frozen=True)
class IntegratorSpec:
    """Fixed step `dt` up to `horizon`.

    Convolution quadrature keeps the whole history: memory grows with horizon/dt and work with
    its square, unless `memory_cutoff` drops lags where the kernel has decayed below
    `settings.MEMORY_CUTOFF_REL` of its peak.
    """

    method: str = CONVOLUTION_QUADRATURE
    dt: float = settings.DEFAULT_DT
    horizon: float = settings.DEFAULT_HORIZON
    memory_cutoff: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", normalize_method(self.method))
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ValueError(f"Step must be positive, got {self.dt!r}")
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise ValueError(f"Horizon must be positive, got {self.horizon!r}")
        if self.dt > self.horizon:
            raise ValueError(f"Step {self.dt!r} exceeds horizon {self.horizon!r}")

    @property
    def steps(self) -> int:
        return math.ceil(self.horizon / self.dt - 1e-9)

    def times(self) -> NDArray[np.float64]:
        return self.dt * np.arange(self.steps + 1)

    def as_dict(self) -> dict[str, object]:
        return {
            "method": self.method,
            "dt": self.dt,
            "horizon": self.horizon,
            "memory_cutoff": self.memory_cutoff,
        }


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: NDArray[np.float64]
    states: NDArray[np.float64]
    metadata: dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=np.float64)
        states = np.asarray(self.states, dtype=np.float64)
        if states.ndim != 2 or states.shape[0] != times.shape[0]:
            raise ValueError(
                f"Trajectory needs one state per time, got {states.shape!r} for {times.shape!r}"
            )
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("Trajectory times must be strictly increasing")
        if not np.all(np.isfinite(states)):
            raise ValueError("Trajectory has non-finite states")
        object.__setattr__(self, "times", frozen(times))
        object.__setattr__(self, "states", frozen(states))

    @property
    def norms(self) -> NDArray[np.float64]:
        return np.linalg.norm(self.states, axis=1)

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def first_below(self, fraction: float) -> float | None:
        """First time the norm drops below `fraction` of its initial value."""
        norms = self.norms
        if norms[0] == 0:
            return 0.0
        hits = np.flatnonzero(norms < fraction * norms[0])
        return float(self.times[hits[0]]) if hits.size else None

    def to_frame(self) -> pl.DataFrame:
        columns = {"t": self.times}
        for k in range(self.dim):
            columns[f"x{k + 1}"] = self.states[:, k]
        columns["norm"] = self.norms
        return pl.DataFrame(columns)


@dataclass(frozen=True, eq=False)
class SimulationResult:
    state: Trajectory
    error: Trajectory


def _check_inputs(e_mat: ArrayLike, y0: ArrayLike) -> tuple[RealMatrix, NDArray[np.float64]]:
    e = np.asarray(e_mat, dtype=np.float64)
    y = np.asarray(y0, dtype=np.float64).reshape(-1)
    if e.ndim != 2 or e.shape[0] != e.shape[1]:
        raise ValueError(f"E must be square, got shape {e.shape!r}")
    if y.size != e.shape[0]:
        raise ValueError(f"Initial state has {y.size} entries, E is {e.shape[0]}-dim")
    return e, y


def _guard(t: float, y: NDArray[np.float64]) -> None:
    norm = float(np.linalg.norm(y))
    if not math.isfinite(norm) or norm > settings.DIVERGENCE_LIMIT:
        raise DivergenceError(t, norm)


def _cutoff_window(table: NDArray[np.float64]) -> int:
    norms = np.linalg.norm(table, ord=2, axis=(1, 2))
    peak = float(norms.max())
    if peak == 0:
        return 1
    alive = np.flatnonzero(norms > settings.MEMORY_CUTOFF_REL * peak)
    return int(alive[-1]) + 1


def integrate_volterra(
    e_mat: ArrayLike,
    f_fn: Callable[[float], RealMatrix],
    y0: ArrayLike,
    spec: IntegratorSpec,
    *,
    f_table: NDArray[np.float64] | None = None,
) -> Trajectory:
    """Trapezoidal convolution quadrature with a Heun predictor-corrector step.

    `f_table[k]` may carry F(k·dt) precomputed; otherwise `f_fn` is sampled on the grid.
    """
    e, y_init = _check_inputs(e_mat, y0)
    h = spec.dt
    steps = spec.steps
    times = spec.times()
    if f_table is None:
        f_table = np.stack([np.asarray(f_fn(float(t)), dtype=np.float64) for t in times])
    expected = (steps + 1, *e.shape)
    if f_table.shape != expected:
        raise ValueError(f"Kernel table has shape {f_table.shape!r}, expected {expected!r}")

    window = _cutoff_window(f_table) if spec.memory_cutoff else steps + 1
    metadata: dict[str, object] = {"method": CONVOLUTION_QUADRATURE, "dt": h, "steps": steps}
    if spec.memory_cutoff:
        metadata["memory_cutoff_time"] = (window - 1) * h
        logger.debug("Memory truncated after lag %.6g", (window - 1) * h)

    ys = np.empty((steps + 1, e.shape[0]))
    ys[0] = y_init
    f0 = f_table[0]
    # `partial` carries h·Σ w_k F(t_n - t_k) y_k over history k < n (weight ½ at k = 0).
    partial = np.zeros(e.shape[0])
    for n in range(steps):
        y_n = ys[n]
        f_n = e @ y_n
        if n:
            f_n = f_n + partial + 0.5 * h * (f0 @ y_n)
        y_pred = y_n + h * f_n

        lo = max(0, n + 2 - window)
        weights = np.ones(n + 1 - lo)
        if lo == 0:
            weights[0] = 0.5
        lags = f_table[n + 1 - lo : 0 : -1]
        partial = h * np.einsum("kij,kj->i", lags, weights[:, None] * ys[lo : n + 1])

        f_pred = e @ y_pred + partial + 0.5 * h * (f0 @ y_pred)
        ys[n + 1] = y_n + 0.5 * h * (f_n + f_pred)
        _guard(times[n + 1], ys[n + 1])

    return Trajectory(times=times, states=ys, metadata=metadata)


def lift_matrix(e_mat: ArrayLike, kernel_terms: Sequence[tuple[ArrayLike, float]]) -> RealMatrix:
    """Generator of (y, z_1, ..., z_K) with ż_k = y - β_k z_k and ẏ = E y + Σ G_k z_k."""
    e = np.asarray(e_mat, dtype=np.float64)
    d = e.shape[0]
    size = d * (1 + len(kernel_terms))
    out = np.zeros((size, size))
    out[:d, :d] = e
    eye = np.eye(d)
    for k, (g, rate) in enumerate(kernel_terms, start=1):
        if not (math.isfinite(rate) and rate > 0):
            raise ValueError(
                f"Exponential lift needs positive rates, got {rate!r}; use convolution quadrature"
            )
        block = slice(k * d, (k + 1) * d)
        out[:d, block] = np.asarray(g, dtype=np.float64)
        out[block, :d] = eye
        out[block, block] = -rate * eye
    return out


def integrate_exponential_lift(
    e_mat: ArrayLike,
    kernel_terms: Sequence[tuple[ArrayLike, float]],
    y0: ArrayLike,
    spec: IntegratorSpec,
) -> Trajectory:
    """Exact auxiliary-state lift for F(t) = Σ_k G_k exp(-β_k t), stepped with classical RK4."""
    e, y_init = _check_inputs(e_mat, y0)
    d = e.shape[0]
    generator = lift_matrix(e, kernel_terms)
    size = generator.shape[0]

    ha = spec.dt * generator
    eye = np.eye(size)
    # One RK4 step of a linear ODE is the degree-4 Taylor polynomial of exp(h A).
    propagator = eye + ha @ (eye + ha @ (eye + ha @ (eye + ha / 4.0) / 3.0) / 2.0)

    steps = spec.steps
    times = spec.times()
    x = np.zeros(size)
    x[:d] = y_init
    ys = np.empty((steps + 1, d))
    ys[0] = y_init
    for n in range(steps):
        x = propagator @ x
        ys[n + 1] = x[:d]
        _guard(times[n + 1], x)

    metadata = {
        "method": EXPONENTIAL_LIFT,
        "dt": spec.dt,
        "steps": steps,
        "lift_dimension": size,
    }
    return Trajectory(times=times, states=ys, metadata=metadata)


def _integrate(
    e_mat: RealMatrix,
    f_fn: Callable[[float], RealMatrix],
    table: Callable[[float, int], NDArray[np.float64]],
    terms: Callable[[], list[tuple[RealMatrix, float]]],
    y0: ArrayLike,
    spec: IntegratorSpec,
) -> Trajectory:
    if spec.method == EXPONENTIAL_LIFT:
        return integrate_exponential_lift(e_mat, terms(), y0, spec)
    return integrate_volterra(e_mat, f_fn, y0, spec, f_table=table(spec.dt, spec.steps))


def simulate_augmented(
    aug: AugmentedSystem,
    xi0: ArrayLike,
    spec: IntegratorSpec,
    *,
    generators: GeneratorSet | None = None,
) -> SimulationResult:
    """Expectation dynamics of the augmented system plus the error e = ⟨ξ1⟩ - ⟨ξ2⟩.

    Pass `generators` (from `augment(aug)`) to share memoized kernel tables between runs.
    """
    gen = generators if generators is not None else augment(aug)
    xi = np.asarray(xi0, dtype=np.float64).reshape(-1)
    if xi.size != gen.dim:
        raise ValueError(f"Initial expectation has {xi.size} entries, expected {gen.dim}")
    state = _integrate(gen.a_h, gen.a_k, gen.a_k_table, gen.lift_terms, xi, spec)
    half = gen.dim // 2
    error = Trajectory(
        times=state.times,
        states=state.states[:, :half] - state.states[:, half:],
        metadata=dict(state.metadata),
    )
    return SimulationResult(state=state, error=error)


def simulate_error(err: ErrorDynamics, e0: ArrayLike, spec: IntegratorSpec) -> Trajectory:
    """Integrate the reduced synchronization-error equation directly."""
    return _integrate(err.e_mat, err.f_fn, err.f_table, err.lift_terms, e0, spec)
