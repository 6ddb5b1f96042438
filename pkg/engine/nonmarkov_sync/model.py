from __future__ import annotations

import logging
import threading
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import settings
from .kernel import MemoryKernel
from .matops import (
    ComplexMatrix,
    RealMatrix,
    as_matrix,
    frozen,
    spectral_norm,
    symplectic,
    sync_projections,
)

logger = logging.getLogger(__name__)


def symmetrized(omega: ArrayLike, *, name: str = "omega") -> RealMatrix:
    mat = as_matrix(omega, name=name)
    if mat.shape[0] != mat.shape[1] or mat.shape[0] % 2:
        raise ValueError(f"{name} must be 2n x 2n, got shape {mat.shape!r}")
    asymmetry = float(np.max(np.abs(mat - mat.T)))
    if asymmetry > settings.SYMMETRY_TOL:
        raise ValueError(f"{name} is not symmetric (max |Ω - Ωᵀ| = {asymmetry:.3e})")
    return 0.5 * (mat + mat.T)


@dataclass(frozen=True, eq=False)
class SubsystemParams:
    """One non-Markovian linear subsystem (Ω, V, Γ(t)); variables ordered (q1, p1, ...)."""

    omega: RealMatrix
    v: ComplexMatrix
    kernel: MemoryKernel

    def __post_init__(self) -> None:
        omega = symmetrized(self.omega)
        v = as_matrix(self.v, name="v", dtype=np.complex128)
        if v.shape[1] != omega.shape[0]:
            raise ValueError(
                f"Coupling matrix has {v.shape[1]} columns, Hamiltonian is {omega.shape[0]}-dim"
            )
        if v.shape[0] != self.kernel.m:
            raise ValueError(
                f"Coupling matrix has {v.shape[0]} rows but the kernel has {self.kernel.m} channels"
            )
        object.__setattr__(self, "omega", frozen(omega))
        object.__setattr__(self, "v", frozen(v))

    @property
    def n_modes(self) -> int:
        return self.omega.shape[0] // 2

    @property
    def m(self) -> int:
        return self.kernel.m

    def as_dict(self) -> dict[str, object]:
        return {
            "omega": self.omega.tolist(),
            "v": complex_rows(self.v),
            "kernel": self.kernel.as_dict(),
        }


@dataclass(frozen=True, eq=False)
class AugmentedSystem:
    """Two subsystems joined by the engineered blocks Ω12, V12, V21."""

    sub1: SubsystemParams
    sub2: SubsystemParams
    omega12: RealMatrix
    v12: ComplexMatrix
    v21: ComplexMatrix

    def __post_init__(self) -> None:
        if self.sub1.n_modes != self.sub2.n_modes:
            raise ValueError(
                f"Subsystems have {self.sub1.n_modes} and {self.sub2.n_modes} modes"
            )
        if self.sub1.m != self.sub2.m:
            raise ValueError(f"Subsystems have {self.sub1.m} and {self.sub2.m} field channels")
        dim = 2 * self.sub1.n_modes
        omega12 = as_matrix(self.omega12, name="omega12")
        if omega12.shape != (dim, dim):
            raise ValueError(f"omega12 must be {dim} x {dim}, got {omega12.shape!r}")
        blocks = {}
        for name in ("v12", "v21"):
            mat = as_matrix(getattr(self, name), name=name, dtype=np.complex128)
            if mat.shape != (self.sub1.m, dim):
                raise ValueError(f"{name} must be {self.sub1.m} x {dim}, got {mat.shape!r}")
            blocks[name] = frozen(mat)
        object.__setattr__(self, "omega12", frozen(omega12))
        object.__setattr__(self, "v12", blocks["v12"])
        object.__setattr__(self, "v21", blocks["v21"])

    @classmethod
    def decoupled(cls, sub1: SubsystemParams, sub2: SubsystemParams) -> AugmentedSystem:
        dim = 2 * sub1.n_modes
        zeros = np.zeros((sub1.m, dim), dtype=np.complex128)
        return cls(sub1, sub2, np.zeros((dim, dim)), zeros, zeros.copy())

    @property
    def n_modes(self) -> int:
        return self.sub1.n_modes

    @property
    def m(self) -> int:
        return self.sub1.m

    @property
    def r(self) -> RealMatrix:
        return np.block([[self.sub1.omega, self.omega12], [self.omega12.T, self.sub2.omega]])

    @property
    def v(self) -> ComplexMatrix:
        return np.block([[self.sub1.v, self.v12], [self.v21, self.sub2.v]])

    @property
    def kernel(self) -> MemoryKernel:
        return MemoryKernel(self.sub1.kernel.channels + self.sub2.kernel.channels)


def complex_rows(mat: ComplexMatrix) -> list[list[list[float]]]:
    return [[[float(z.real), float(z.imag)] for z in row] for row in np.asarray(mat)]


def coupling_matrices(v: ComplexMatrix) -> NDArray[np.float64]:
    """S_j = Im(v_j† v_j) for each coupling row v_j."""
    return np.einsum("ki,kj->kij", np.asarray(v).conj(), np.asarray(v)).imag


def channel_generators(v: ComplexMatrix) -> NDArray[np.float64]:
    """Q_j = 2J S_j, so A_K(t) = Σ_j γ_j(t) Q_j."""
    j = symplectic(v.shape[1] // 2)
    return 2.0 * np.einsum("ab,kbj->kaj", j, coupling_matrices(v))


def weighted_sum(kernel: MemoryKernel, mats: NDArray[np.float64], t: float) -> RealMatrix:
    return np.tensordot(kernel.channel_values(float(t)), mats, axes=1)


def uniform_table(
    kernel: MemoryKernel, mats: NDArray[np.float64], dt: float, steps: int
) -> NDArray[np.float64]:
    times = dt * np.arange(steps + 1)
    return np.einsum("tk,kij->tij", kernel.channel_values(times), mats)


def lift_terms(
    kernel: MemoryKernel, mats: NDArray[np.float64]
) -> list[tuple[RealMatrix, float]]:
    """(G, β) pairs with Σ_j γ_j(t) mats_j = Σ G exp(-β t); terms sharing a rate are merged."""
    if not kernel.is_exponential:
        raise ValueError("Exponential lift needs exponential-sum kernels")
    by_rate: dict[float, RealMatrix] = {}
    for terms, mat in zip(kernel.exponential_terms(), mats, strict=True):
        if not np.any(mat):
            continue
        for weight, rate in terms:
            by_rate[rate] = by_rate.get(rate, 0.0) + weight * rate * mat
    return [(by_rate[rate], rate) for rate in sorted(by_rate)]


@dataclass(frozen=True, eq=False)
class GeneratorSet:
    """Generators of ẋ = A_H x + ∫ A_K(t-τ) x(τ) dτ + B b̃.

    B is kept for completeness; vacuum-mean expectation dynamics never use it.
    """

    a_h: RealMatrix
    b: ComplexMatrix
    kernel: MemoryKernel
    q: NDArray[np.float64]
    _tables: dict[tuple[float, int], NDArray[np.float64]] = field(
        default_factory=dict, repr=False
    )
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def dim(self) -> int:
        return self.a_h.shape[0]

    def a_k(self, t: float) -> RealMatrix:
        if t < 0:
            raise ValueError(f"Memory generator evaluated at negative time {t!r}")
        return weighted_sum(self.kernel, self.q, t)

    def a_k_total(self) -> RealMatrix:
        return np.tensordot(self.kernel.totals(), self.q, axes=1)

    def a_k_table(self, dt: float, steps: int) -> NDArray[np.float64]:
        key = (float(dt), int(steps))
        with self._lock:
            table = self._tables.get(key)
            if table is None:
                table = frozen(uniform_table(self.kernel, self.q, dt, steps))
                self._tables[key] = table
        return table

    def lift_terms(self) -> list[tuple[RealMatrix, float]]:
        return lift_terms(self.kernel, self.q)


def _assemble(omega: RealMatrix, v: ComplexMatrix, kernel: MemoryKernel) -> GeneratorSet:
    dim = omega.shape[0]
    if v.shape[1] != dim or v.shape[0] != kernel.m:
        raise ValueError(
            f"Inconsistent dimensions: omega {omega.shape!r}, v {v.shape!r}, {kernel.m} channels"
        )
    j = symplectic(dim // 2)
    b = 1j * j @ np.hstack([-v.conj().T, v.T])
    return GeneratorSet(
        a_h=frozen(2.0 * j @ omega),
        b=frozen(b),
        kernel=kernel,
        q=frozen(channel_generators(v)),
    )


def pad_fields(sub: SubsystemParams, target_m: int) -> SubsystemParams:
    """Append zero coupling rows and placeholder channels until there are `target_m` fields."""
    if target_m < sub.m:
        raise ValueError(f"Cannot pad {sub.m} field channels down to {target_m}")
    if target_m == sub.m:
        return sub
    extra = np.zeros((target_m - sub.m, sub.v.shape[1]), dtype=np.complex128)
    logger.info("Padding subsystem with %d dummy field(s)", target_m - sub.m)
    return SubsystemParams(
        omega=sub.omega,
        v=np.vstack([sub.v, extra]),
        kernel=sub.kernel.padded(target_m),
    )


def assemble_qsde(sub: SubsystemParams) -> GeneratorSet:
    return _assemble(sub.omega, sub.v, sub.kernel)


def augment(aug: AugmentedSystem) -> GeneratorSet:
    return _assemble(aug.r, aug.v, aug.kernel)


def projection_residuals(gen: GeneratorSet, t_samples: Iterable[float]) -> tuple[float, float]:
    """‖Π⊥ 𝒜_H Π‖ and max over samples of ‖Π⊥ 𝒜_K(t) Π‖."""
    if gen.dim % 4:
        raise ValueError(f"Augmented generators must be 4n-dimensional, got {gen.dim}")
    pi, pi_perp = sync_projections(gen.dim // 4)
    residual_h = spectral_norm(pi_perp @ gen.a_h @ pi)
    residual_k = max(spectral_norm(pi_perp @ gen.a_k(t) @ pi) for t in t_samples)
    return residual_h, residual_k


def coherent_expectations(alphas: Sequence[complex]) -> NDArray[np.float64]:
    """(⟨q_1⟩, ⟨p_1⟩, ...) of a product of coherent states |α_1⟩ ⊗ ... ⊗ |α_n⟩."""
    values = np.asarray(alphas, dtype=np.complex128).reshape(-1)
    out = np.empty(2 * values.size)
    out[0::2] = np.sqrt(2.0) * values.real
    out[1::2] = np.sqrt(2.0) * values.imag
    return out


def product_expectations(
    alphas1: Sequence[complex], alphas2: Sequence[complex]
) -> NDArray[np.float64]:
    if len(alphas1) != len(alphas2):
        raise ValueError(f"Subsystems need equal mode counts, got {len(alphas1)}, {len(alphas2)}")
    return np.concatenate([coherent_expectations(alphas1), coherent_expectations(alphas2)])
