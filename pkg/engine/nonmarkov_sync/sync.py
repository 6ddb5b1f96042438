from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from itertools import combinations

import numpy as np
import scipy.integrate
import scipy.optimize
from numpy.typing import ArrayLike, NDArray

from . import settings
from .errors import PreconditionError
from .kernel import KernelChannel, MemoryKernel, envelope_integrals, inverse_sqrt_total, moments
from .matops import (
    ComplexMatrix,
    RealMatrix,
    cross_block,
    error_block,
    frozen,
    is_hurwitz,
    spectral_norm,
    spectral_summary,
    symplectic,
)
from .model import (
    AugmentedSystem,
    SubsystemParams,
    augment,
    complex_rows,
    coupling_matrices,
    lift_terms,
    symmetrized,
    uniform_table,
    weighted_sum,
)

logger = logging.getLogger(__name__)

# Gain search: ‖J Ω1‖·(1 + 2^(k/4)/100) for k = 0..160.
_GAIN_GRID_STEPS = 160
_GAIN_GRID_DENSITY = 4


@dataclass(frozen=True)
class ConditionReport:
    hamiltonian_balanced: bool
    memory_balanced: bool
    hamiltonians_match: bool
    hamiltonian_residual: float
    memory_residual: float
    symmetry_residual: float

    @property
    def sufficient(self) -> bool:
        return self.hamiltonian_balanced and self.memory_balanced

    @property
    def necessary_violated(self) -> bool:
        return not (self.hamiltonian_balanced and self.hamiltonians_match)

    def as_dict(self) -> dict[str, object]:
        return {
            "hamiltonian_balanced": self.hamiltonian_balanced,
            "memory_balanced": self.memory_balanced,
            "hamiltonians_match": self.hamiltonians_match,
            "hamiltonian_residual": self.hamiltonian_residual,
            "memory_residual": self.memory_residual,
            "symmetry_residual": self.symmetry_residual,
            "sufficient": self.sufficient,
            "necessary_violated": self.necessary_violated,
        }


@dataclass(frozen=True, eq=False)
class ErrorDynamics:
    """ė = E e + ∫ F(t-τ) e(τ) dτ with F(t) = Σ_j γ_j(t) f_channels[j]."""

    e_mat: RealMatrix
    kernel: MemoryKernel
    f_channels: NDArray[np.float64]
    f_total: RealMatrix
    f_norm_mass: float
    f_mean_delay: float

    @property
    def dim(self) -> int:
        return self.e_mat.shape[0]

    def f_fn(self, t: float) -> RealMatrix:
        if t < 0:
            raise ValueError(f"Error kernel evaluated at negative time {t!r}")
        return weighted_sum(self.kernel, self.f_channels, t)

    def f_table(self, dt: float, steps: int) -> NDArray[np.float64]:
        return uniform_table(self.kernel, self.f_channels, dt, steps)

    def lift_terms(self) -> list[tuple[RealMatrix, float]]:
        return lift_terms(self.kernel, self.f_channels)

    def as_dict(self) -> dict[str, object]:
        return {
            "e_mat": self.e_mat.tolist(),
            "f_total": self.f_total.tolist(),
            "f_norm_mass": self.f_norm_mass,
            "f_mean_delay": self.f_mean_delay,
        }


@dataclass(frozen=True)
class StabilityCertificate:
    hurwitz: bool
    lambda1: complex
    threshold: float
    mean_delay: float
    passes: bool
    e_norm: float
    f_norm_mass: float
    cause: str | None = None

    def as_dict(self) -> dict[str, object]:
        return {
            "hurwitz": self.hurwitz,
            "lambda1": [self.lambda1.real, self.lambda1.imag],
            # No convolution term: the threshold is unbounded.
            "threshold": self.threshold if math.isfinite(self.threshold) else None,
            "mean_delay": self.mean_delay if math.isfinite(self.mean_delay) else None,
            "passes": self.passes,
            "e_norm": self.e_norm,
            "f_norm_mass": self.f_norm_mass,
            "cause": self.cause,
        }


@dataclass(frozen=True, eq=False)
class SynthesisResult:
    gain_a: float
    k_mat: ComplexMatrix
    omega12: RealMatrix
    v12: ComplexMatrix
    v21: ComplexMatrix

    def augmented(self, sub: SubsystemParams) -> AugmentedSystem:
        return AugmentedSystem(sub, sub, self.omega12, self.v12, self.v21)

    def as_dict(self) -> dict[str, object]:
        return {
            "gain_a": self.gain_a,
            "k_mat": complex_rows(self.k_mat),
            "omega12": self.omega12.tolist(),
            "v12": complex_rows(self.v12),
            "v21": complex_rows(self.v21),
        }


def check_conditions(
    aug: AugmentedSystem, t_samples: Iterable[float] = settings.CONDITION_T_SAMPLES
) -> ConditionReport:
    samples = tuple(float(t) for t in t_samples)
    if not samples or 0.0 not in samples:
        raise ValueError("Condition samples must be non-empty and include t=0")

    o1, o2, o12 = aug.sub1.omega, aug.sub2.omega, aug.omega12
    hamiltonian_residual = spectral_norm(cross_block(aug.r))

    imbalance = np.stack([cross_block(s) for s in coupling_matrices(aug.v)])
    kernel = aug.kernel
    memory_residual = max(spectral_norm(weighted_sum(kernel, imbalance, t)) for t in samples)
    if kernel.is_exponential:
        # Matching coefficients of each exponential rate makes the check exact in t.
        per_rate = [spectral_norm(coef) for coef, _ in lift_terms(kernel, imbalance)]
        memory_residual = max([memory_residual, *per_rate])

    symmetry_residual = max(spectral_norm(o1 - o2), spectral_norm(o12 - o12.T))

    tol = settings.RESIDUAL_TOL
    report = ConditionReport(
        hamiltonian_balanced=hamiltonian_residual <= tol,
        memory_balanced=memory_residual <= tol,
        hamiltonians_match=symmetry_residual <= tol,
        hamiltonian_residual=hamiltonian_residual,
        memory_residual=memory_residual,
        symmetry_residual=symmetry_residual,
    )
    logger.debug("Condition residuals: %s", report)
    return report


def _merge_identical(
    kernel: MemoryKernel, mats: NDArray[np.float64]
) -> list[tuple[KernelChannel, RealMatrix]]:
    merged: dict[KernelChannel, RealMatrix] = {}
    for channel, mat in zip(kernel.channels, mats, strict=True):
        merged[channel] = merged.get(channel, 0.0) + mat
    return [
        (channel, mat)
        for channel, mat in merged.items()
        if spectral_norm(mat) > settings.ZERO_MASS_TOL
    ]


def _negligible(residual: NDArray[np.float64], scale: float) -> bool:
    atol = settings.PROJECTOR_ATOL + settings.PROJECTOR_RTOL * scale
    return bool(np.all(np.abs(residual) <= atol))


def projector_scale(mat: RealMatrix) -> float | None:
    """s when mat = s·P for a symmetric projection P, else None."""
    norm = spectral_norm(mat)
    if not _negligible(mat - mat.T, norm):
        return None
    trace = float(np.trace(mat))
    if abs(trace) <= settings.ZERO_MASS_TOL:
        return None
    square = mat @ mat
    s = float(np.trace(square)) / trace
    if not _negligible(square - s * mat, norm * norm):
        return None
    return s


def _quadrature_norm_integrals(
    channels: Sequence[KernelChannel], mats: Sequence[RealMatrix]
) -> tuple[float, float]:
    sub = MemoryKernel(tuple(channels))
    stack = np.stack(mats)

    def norm_at(t: float) -> float:
        return spectral_norm(weighted_sum(sub, stack, t))

    if sub.is_exponential:
        mass, _ = scipy.integrate.quad(norm_at, 0.0, np.inf, limit=400)
        first, _ = scipy.integrate.quad(lambda t: t * norm_at(t), 0.0, np.inf, limit=400)
        return mass, first

    tabulated = [ch for ch in channels if not ch.is_exponential]
    dt = min(ch.dt for ch in tabulated)
    end = max(ch.end for ch in tabulated)
    times = np.linspace(0.0, end, int(round(end / dt)) + 1)
    norms = np.array([norm_at(t) for t in times])
    if norms[-1] > settings.TAIL_REL_TOL * norms.max():
        raise ValueError(f"Error kernel norm has not decayed by t={end!r}")
    return (
        float(scipy.integrate.trapezoid(norms, times)),
        float(scipy.integrate.trapezoid(times * norms, times)),
    )


def norm_moments(kernel: MemoryKernel, mats: NDArray[np.float64]) -> tuple[float, float]:
    """(∫‖F(t)‖dt, ∫ t p_F(t) dt) for F(t) = Σ_j γ_j(t) mats[j]."""
    pieces = _merge_identical(kernel, mats)
    if not pieces:
        return 0.0, 0.0
    channels = [ch for ch, _ in pieces]
    matrices = [mat for _, mat in pieces]

    scales = [projector_scale(mat) for mat in matrices]
    orthogonal = all(
        _negligible(a @ b, spectral_norm(a) * spectral_norm(b))
        for a, b in combinations(matrices, 2)
    )
    if all(s is not None for s in scales) and orthogonal:
        # ‖F(t)‖ = max_j |s_j| γ_j(t): a channel envelope with closed-form moments.
        scaled = [ch.scaled(abs(s)) for ch, s in zip(channels, scales, strict=True)]
        mass, first = envelope_integrals(scaled)
    else:
        logger.debug("Error kernel is not block-scalar; integrating its norm by quadrature")
        mass, first = _quadrature_norm_integrals(channels, matrices)
    if mass <= settings.ZERO_MASS_TOL:
        return 0.0, 0.0
    return mass, first / mass


def error_dynamics(aug: AugmentedSystem) -> ErrorDynamics:
    report = check_conditions(aug)
    if not report.sufficient:
        raise PreconditionError(
            "Error dynamics need the Hamiltonian balance and memory balance conditions "
            f"(residuals {report.hamiltonian_residual:.3e}, {report.memory_residual:.3e})",
            report=report,
        )
    gen = augment(aug)
    e_mat = error_block(gen.a_h)
    f_channels = np.stack([error_block(q) for q in gen.q])
    kernel = aug.kernel
    f_total = np.tensordot(kernel.totals(), f_channels, axes=1)
    norm_mass, mean_delay = norm_moments(kernel, f_channels)
    return ErrorDynamics(
        e_mat=frozen(e_mat),
        kernel=kernel,
        f_channels=frozen(f_channels),
        f_total=frozen(f_total),
        f_norm_mass=norm_mass,
        f_mean_delay=mean_delay,
    )


def certify_stability(err: ErrorDynamics) -> StabilityCertificate:
    """Sufficient test for asymptotic stability of the zero error solution."""
    e_norm = spectral_norm(err.e_mat)
    f_plus = err.f_norm_mass

    if f_plus <= settings.ZERO_MASS_TOL:
        summary = spectral_summary(err.e_mat)
        hurwitz = is_hurwitz(summary)
        return StabilityCertificate(
            hurwitz=hurwitz,
            lambda1=summary.lambda1,
            threshold=math.inf,
            mean_delay=0.0,
            passes=hurwitz,
            e_norm=e_norm,
            f_norm_mass=0.0,
            cause=None if hurwitz else "E is not Hurwitz",
        )

    summary = spectral_summary(err.e_mat + err.f_total)
    hurwitz = is_hurwitz(summary)
    dim = err.dim
    threshold = (
        2.0
        * abs(summary.lambda1.real) ** dim
        / (dim * (2.0 * e_norm + 2.0 * f_plus) ** dim * f_plus)
    )
    mean_delay = err.f_mean_delay

    cause = None
    if not math.isfinite(mean_delay):
        cause = "first moment of the error kernel norm is not finite"
    elif not hurwitz:
        cause = "E + ∫F is not Hurwitz"
    elif not mean_delay < threshold:
        cause = "mean delay exceeds the stability threshold"
    certificate = StabilityCertificate(
        hurwitz=hurwitz,
        lambda1=summary.lambda1,
        threshold=threshold,
        mean_delay=mean_delay,
        passes=cause is None,
        e_norm=e_norm,
        f_norm_mass=f_plus,
        cause=cause,
    )
    logger.info(
        "Stability certificate: mean delay %.6g vs threshold %.6g -> %s",
        mean_delay,
        threshold,
        "pass" if certificate.passes else "fail",
    )
    return certificate


def _jomega(omega1: ArrayLike) -> tuple[int, RealMatrix]:
    omega = symmetrized(omega1, name="omega1")
    n = omega.shape[0] // 2
    return n, symplectic(n) @ omega


def _threshold(
    re_lambda1: float,
    jo_norm: float,
    n: int,
    gamma_plus: float,
    sigmas: tuple[float, float],
    a: float,
) -> float:
    sigma_min, sigma_max = sigmas
    spread = 2.0 * a * gamma_plus / sigma_min
    numerator = abs(re_lambda1 - a) ** (2 * n) * sigma_min
    denominator = n * (2.0 * jo_norm + spread) ** (2 * n) * spread * sigma_max
    return numerator / denominator


def _kernel_block(kernel: MemoryKernel, n: int) -> tuple[float, tuple[float, float], float]:
    if kernel.m < n:
        raise ValueError(f"Kernel has {kernel.m} channels, needs at least {n}; pad fields first")
    mom = moments(kernel, n)
    totals = np.diag(mom.total)
    return mom.norm_mass, (float(totals.min()), float(totals.max())), mom.mean_delay


def delay_threshold(omega1: ArrayLike, kernel: MemoryKernel, a: float) -> float:
    """Upper bound on the kernel mean delay under which gain `a` synthesizes synchronization."""
    n, jo = _jomega(omega1)
    jo_norm = spectral_norm(jo)
    if not a > jo_norm:
        raise ValueError(f"Gain {a!r} must exceed ‖J Ω1‖ = {jo_norm!r}")
    gamma_plus, sigmas, _ = _kernel_block(kernel, n)
    re_lambda1 = spectral_summary(jo).lambda1.real
    return _threshold(re_lambda1, jo_norm, n, gamma_plus, sigmas, a)


def find_gain(omega1: ArrayLike, kernel: MemoryKernel) -> float | None:
    """A gain satisfying the synthesis threshold, or None when the search finds none."""
    n, jo = _jomega(omega1)
    jo_norm = spectral_norm(jo)
    gamma_plus, sigmas, mean_delay = _kernel_block(kernel, n)
    re_lambda1 = spectral_summary(jo).lambda1.real

    def threshold(a: float) -> float:
        return _threshold(re_lambda1, jo_norm, n, gamma_plus, sigmas, a)

    if jo_norm <= settings.TOTAL_EPS:
        # With Ω1 = 0 the threshold is threshold(1)/a; take the gain where it is twice the delay.
        gain = threshold(1.0) / (2.0 * mean_delay)
        logger.info(
            "Gain %.6g gives threshold %.6g (mean delay %.6g)", gain, threshold(gain), mean_delay
        )
        return gain

    exponents = np.arange(_GAIN_GRID_STEPS + 1) / _GAIN_GRID_DENSITY
    grid = jo_norm * (1.0 + 2.0**exponents / 100.0)
    values = np.array([threshold(a) for a in grid])
    best = int(np.argmax(values))
    if not values[best] > mean_delay:
        logger.info(
            "No gain found: best threshold %.6g does not exceed mean delay %.6g",
            values[best],
            mean_delay,
        )
        return None

    lo = grid[best - 1] if best > 0 else 0.5 * (jo_norm + grid[0])
    hi = grid[min(best + 1, grid.size - 1)]
    refined = scipy.optimize.minimize_scalar(
        lambda a: -threshold(a), bounds=(lo, hi), method="bounded", options={"xatol": 1e-12}
    )
    gain = float(grid[best])
    if refined.success and refined.x > jo_norm and threshold(refined.x) > values[best]:
        gain = float(refined.x)
    logger.info(
        "Gain %.6g gives threshold %.6g (mean delay %.6g)", gain, threshold(gain), mean_delay
    )
    return gain


def synthesize(sub: SubsystemParams, a: float) -> SynthesisResult:
    """Engineered blocks coupling two copies of `sub` through the environment only."""
    n, m = sub.n_modes, sub.m
    if m < n:
        raise ValueError(f"Need at least {n} field channels, got {m}; pad fields first")
    jo_norm = spectral_norm(symplectic(n) @ sub.omega)
    if not a > jo_norm:
        raise ValueError(f"Gain {a!r} must exceed ‖J Ω1‖ = {jo_norm!r}")

    k1 = np.kron(np.eye(n), np.array([[1.0, 1.0j]]))
    k_mat = math.sqrt(a) * np.vstack([k1, np.zeros((m - n, 2 * n), dtype=np.complex128)])
    v12 = sub.v - inverse_sqrt_total(sub.kernel) @ k_mat
    return SynthesisResult(
        gain_a=float(a),
        k_mat=frozen(k_mat),
        omega12=frozen(np.zeros((2 * n, 2 * n))),
        v12=frozen(v12),
        v21=frozen(v12.copy()),
    )


def synthesized_system(sub: SubsystemParams, a: float) -> AugmentedSystem:
    return synthesize(sub, a).augmented(sub)


def homogeneous(
    sub1: SubsystemParams, sub2: SubsystemParams, *, tol: float = settings.HOMOGENEITY_TOL
) -> bool:
    return (
        sub1.omega.shape == sub2.omega.shape
        and sub1.v.shape == sub2.v.shape
        and bool(np.allclose(sub1.omega, sub2.omega, rtol=0.0, atol=tol))
        and bool(np.allclose(sub1.v, sub2.v, rtol=0.0, atol=tol))
        and sub1.kernel.isclose(sub2.kernel, tol=tol)
    )
