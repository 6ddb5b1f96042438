from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from itertools import combinations
from typing import Final

import numpy as np
import scipy.integrate
import scipy.optimize
from numpy.typing import ArrayLike, NDArray

from . import settings
from .matops import RealMatrix, frozen

logger = logging.getLogger(__name__)

FORM_EXPONENTIAL: Final = "exp"
FORM_TABULATED: Final = "tabulated"

# Crossovers between channels are searched on this many cells of [0, horizon].
_CROSSOVER_CELLS = 4000
# Horizon in units of the slowest decay time; beyond it the channel ordering is taken as fixed.
_CROSSOVER_HORIZON = 60.0


@dataclass(frozen=True)
class ExponentialTerm:
    """One term c·β·exp(-β t); integrates to c."""

    weight: float
    rate: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.weight) and self.weight > 0):
            raise ValueError(f"Exponential weight must be positive, got {self.weight!r}")
        if not (math.isfinite(self.rate) and self.rate > 0):
            raise ValueError(f"Exponential rate must be positive, got {self.rate!r}")


@dataclass(frozen=True)
class KernelChannel:
    """One diagonal entry γ(t) of a memory kernel.

    Either a positive exponential sum Σ c_k β_k exp(-β_k t) or samples on a uniform grid
    starting at t=0 (linear interpolation in between).
    """

    form: str
    terms: tuple[ExponentialTerm, ...] = ()
    dt: float | None = None
    values: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.form == FORM_EXPONENTIAL:
            if not self.terms:
                raise ValueError("Exponential channel needs at least one term")
        elif self.form == FORM_TABULATED:
            if self.dt is None or not (math.isfinite(self.dt) and self.dt > 0):
                raise ValueError(f"Tabulated channel needs a positive dt, got {self.dt!r}")
            if len(self.values) < 2:
                raise ValueError("Tabulated channel needs at least two samples")
            samples = np.asarray(self.values, dtype=np.float64)
            if not np.all(np.isfinite(samples)) or np.any(samples < 0):
                raise ValueError("Tabulated channel samples must be finite and non-negative")
            if samples[0] <= 0:
                raise ValueError("Tabulated channel must be positive at t=0")
        else:
            raise ValueError(f"Unknown kernel channel form: {self.form!r}")

    @classmethod
    def exponential(cls, terms: Iterable[tuple[float, float]]) -> KernelChannel:
        return cls(
            form=FORM_EXPONENTIAL,
            terms=tuple(ExponentialTerm(float(c), float(b)) for c, b in terms),
        )

    @classmethod
    def tabulated(cls, dt: float, values: Iterable[float]) -> KernelChannel:
        return cls(form=FORM_TABULATED, dt=float(dt), values=tuple(float(v) for v in values))

    @property
    def is_exponential(self) -> bool:
        return self.form == FORM_EXPONENTIAL

    @property
    def end(self) -> float:
        if self.is_exponential:
            return math.inf
        return self.dt * (len(self.values) - 1)

    @property
    def slowest_rate(self) -> float:
        return min(term.rate for term in self.terms)

    def exponential_terms(self) -> list[tuple[float, float]]:
        if not self.is_exponential:
            raise ValueError("Tabulated channel has no exponential terms")
        return [(term.weight, term.rate) for term in self.terms]

    def __call__(self, t: ArrayLike) -> NDArray[np.float64]:
        times = np.asarray(t, dtype=np.float64)
        if np.any(times < 0):
            raise ValueError("Kernel evaluated at negative time")
        if self.is_exponential:
            out = np.zeros_like(times)
            for term in self.terms:
                out = out + term.weight * term.rate * np.exp(-term.rate * times)
            return out
        # The table is zero past its last sample.
        grid = self.dt * np.arange(len(self.values))
        return np.interp(times, grid, np.asarray(self.values), right=0.0)

    def total(self) -> float:
        if self.is_exponential:
            return float(sum(term.weight for term in self.terms))
        samples = np.asarray(self.values)
        return float(scipy.integrate.trapezoid(samples, dx=self.dt))

    def integral(self, lo: float, hi: float) -> float:
        """∫_lo^hi γ(t) dt for an exponential channel (hi may be inf)."""
        out = 0.0
        for term in self.terms:
            upper = 0.0 if math.isinf(hi) else math.exp(-term.rate * hi)
            out += term.weight * (math.exp(-term.rate * lo) - upper)
        return out

    def first_moment(self, lo: float, hi: float) -> float:
        """∫_lo^hi t·γ(t) dt for an exponential channel (hi may be inf)."""
        out = 0.0
        for term in self.terms:
            inv = 1.0 / term.rate
            upper = 0.0 if math.isinf(hi) else (hi + inv) * math.exp(-term.rate * hi)
            out += term.weight * ((lo + inv) * math.exp(-term.rate * lo) - upper)
        return out

    def scaled(self, factor: float) -> KernelChannel:
        if not factor > 0:
            raise ValueError(f"Channel scale factor must be positive, got {factor!r}")
        if self.is_exponential:
            return KernelChannel.exponential((t.weight * factor, t.rate) for t in self.terms)
        return KernelChannel.tabulated(self.dt, (v * factor for v in self.values))

    def isclose(self, other: KernelChannel, *, tol: float = settings.HOMOGENEITY_TOL) -> bool:
        if self.form != other.form:
            return False
        if self.is_exponential:
            mine = sorted((t.rate, t.weight) for t in self.terms)
            theirs = sorted((t.rate, t.weight) for t in other.terms)
            return len(mine) == len(theirs) and bool(
                np.allclose(mine, theirs, rtol=0.0, atol=tol)
            )
        return (
            len(self.values) == len(other.values)
            and abs(self.dt - other.dt) <= tol
            and bool(np.allclose(self.values, other.values, rtol=0.0, atol=tol))
        )

    def as_dict(self) -> dict[str, object]:
        if self.is_exponential:
            return {
                "form": FORM_EXPONENTIAL,
                "terms": [{"c": t.weight, "beta": t.rate} for t in self.terms],
            }
        return {"form": FORM_TABULATED, "dt": self.dt, "values": list(self.values)}


PLACEHOLDER_CHANNEL: Final = KernelChannel.exponential([(1.0, 1.0)])


@dataclass(frozen=True)
class MemoryKernel:
    """Diagonal memory kernel Γ(t) = diag(γ_1(t), ..., γ_M(t))."""

    channels: tuple[KernelChannel, ...]

    def __post_init__(self) -> None:
        if not self.channels:
            raise ValueError("Memory kernel needs at least one channel")

    @classmethod
    def single_exponential(cls, weight: float, rate: float, *, m: int = 1) -> MemoryKernel:
        return cls(tuple(KernelChannel.exponential([(weight, rate)]) for _ in range(m)))

    @property
    def m(self) -> int:
        return len(self.channels)

    @property
    def is_exponential(self) -> bool:
        return all(ch.is_exponential for ch in self.channels)

    def channel_values(self, t: ArrayLike) -> NDArray[np.float64]:
        """γ_j(t) stacked on the last axis."""
        return np.stack([ch(t) for ch in self.channels], axis=-1)

    def totals(self) -> NDArray[np.float64]:
        return np.array([ch.total() for ch in self.channels])

    def exponential_terms(self) -> list[list[tuple[float, float]]]:
        return [ch.exponential_terms() for ch in self.channels]

    def scaled(self, factors: ArrayLike) -> MemoryKernel:
        scales = np.broadcast_to(np.asarray(factors, dtype=np.float64), (self.m,))
        return MemoryKernel(
            tuple(ch.scaled(float(s)) for ch, s in zip(self.channels, scales, strict=True))
        )

    def top(self, n: int) -> MemoryKernel:
        if not 1 <= n <= self.m:
            raise ValueError(f"Block size must be in [1, {self.m}], got {n!r}")
        return MemoryKernel(self.channels[:n])

    def padded(self, target_m: int) -> MemoryKernel:
        if target_m < self.m:
            raise ValueError(f"Cannot pad {self.m} channels down to {target_m}")
        return MemoryKernel(self.channels + (PLACEHOLDER_CHANNEL,) * (target_m - self.m))

    def isclose(self, other: MemoryKernel, *, tol: float = settings.HOMOGENEITY_TOL) -> bool:
        return self.m == other.m and all(
            a.isclose(b, tol=tol) for a, b in zip(self.channels, other.channels, strict=True)
        )

    def as_dict(self) -> dict[str, object]:
        return {"channels": [ch.as_dict() for ch in self.channels]}


@dataclass(frozen=True, eq=False)
class KernelMoments:
    total: RealMatrix
    norm_mass: float
    mean_delay: float

    def as_dict(self) -> dict[str, object]:
        return {
            "total": np.diag(self.total).tolist(),
            "norm_mass": self.norm_mass,
            "mean_delay": self.mean_delay,
        }


def evaluate(kernel: MemoryKernel, t: float) -> RealMatrix:
    """Γ(t); a tabulated channel is only defined on its own grid here."""
    if t < 0:
        raise ValueError(f"Kernel evaluated at negative time {t!r}")
    end = min(ch.end for ch in kernel.channels)
    if t > end * (1 + 1e-12):
        raise ValueError(f"Time beyond tabulated kernel range [0, {end!r}]: {t!r}")
    return np.diag(kernel.channel_values(float(t)))


def _crossovers(channels: Sequence[KernelChannel]) -> list[float]:
    horizon = _CROSSOVER_HORIZON / min(ch.slowest_rate for ch in channels)
    grid = np.linspace(0.0, horizon, _CROSSOVER_CELLS + 1)
    points: set[float] = set()
    for a, b in combinations(channels, 2):

        def diff(t: float, a: KernelChannel = a, b: KernelChannel = b) -> float:
            return float(a(t) - b(t))

        sampled = a(grid) - b(grid)
        for k in np.flatnonzero(sampled[:-1] * sampled[1:] < 0):
            points.add(scipy.optimize.brentq(diff, grid[k], grid[k + 1], xtol=1e-14))
        touching = (sampled[1:-1] == 0) & (sampled[:-2] * sampled[2:] < 0)
        for k in np.flatnonzero(touching):
            points.add(float(grid[k + 1]))
    return sorted(points)


def _exponential_envelope(channels: Sequence[KernelChannel]) -> tuple[float, float]:
    if len(channels) == 1:
        (ch,) = channels
        return ch.integral(0.0, math.inf), ch.first_moment(0.0, math.inf)

    breaks = [0.0, *(t for t in _crossovers(channels) if t > 0), math.inf]
    tail_point = _CROSSOVER_HORIZON / min(ch.slowest_rate for ch in channels)
    mass = 0.0
    first = 0.0
    for lo, hi in zip(breaks[:-1], breaks[1:], strict=True):
        if math.isfinite(hi):
            at = 0.5 * (lo + hi)
        else:
            at = lo + 0.5 * (tail_point - lo) if tail_point > lo else 1.5 * lo
        values = [float(ch(at)) for ch in channels]
        dominant = channels[int(np.argmax(values))]
        mass += dominant.integral(lo, hi)
        first += dominant.first_moment(lo, hi)
    logger.debug("Channel envelope integrated over %d pieces", len(breaks) - 1)
    return mass, first


def _sampled_envelope(channels: Sequence[KernelChannel]) -> tuple[float, float]:
    tabulated = [ch for ch in channels if not ch.is_exponential]
    for ch in tabulated:
        last, peak = ch.values[-1], max(ch.values)
        if last > settings.TAIL_REL_TOL * peak:
            raise ValueError(
                f"Tabulated kernel has not decayed by t={ch.end!r} "
                f"(last sample {last!r}, peak {peak!r})"
            )
    dt = min(ch.dt for ch in tabulated)
    end = max(ch.end for ch in tabulated)
    times = np.linspace(0.0, end, int(round(end / dt)) + 1)
    envelope = np.max(np.stack([ch(times) for ch in channels]), axis=0)
    mass = float(scipy.integrate.trapezoid(envelope, times))
    first = float(scipy.integrate.trapezoid(times * envelope, times))
    return mass, first


def envelope_integrals(channels: Sequence[KernelChannel]) -> tuple[float, float]:
    """∫ max_j γ_j(t) dt and ∫ t·max_j γ_j(t) dt over [0, ∞)."""
    channels = list(dict.fromkeys(channels))
    if all(ch.is_exponential for ch in channels):
        return _exponential_envelope(channels)
    return _sampled_envelope(channels)


def moments(kernel: MemoryKernel, top_n: int | None = None) -> KernelMoments:
    block = kernel.top(kernel.m if top_n is None else top_n)
    mass, first = envelope_integrals(block.channels)
    if mass <= 0:
        raise ValueError("Kernel has zero norm mass")
    return KernelMoments(
        total=frozen(np.diag(block.totals())),
        norm_mass=mass,
        mean_delay=first / mass,
    )


def inverse_sqrt_total(kernel: MemoryKernel) -> RealMatrix:
    totals = kernel.totals()
    small = np.flatnonzero(totals < settings.TOTAL_EPS)
    if small.size:
        raise ValueError(f"Kernel channels {small.tolist()} integrate to (near) zero")
    return np.diag(totals**-0.5)


def kernel_dominates(kernel: MemoryKernel, reference: MemoryKernel, top_n: int) -> bool:
    """True when `kernel` has the same n×n totals as `reference` and no larger mean delay."""
    if kernel.m < top_n or reference.m < top_n:
        raise ValueError(f"Both kernels need at least {top_n} channels")
    mine = moments(kernel, top_n)
    ref = moments(reference, top_n)
    same_totals = np.allclose(
        np.diag(mine.total), np.diag(ref.total), rtol=0.0, atol=settings.DOMINANCE_TOL
    )
    return bool(same_totals and mine.mean_delay <= ref.mean_delay)
