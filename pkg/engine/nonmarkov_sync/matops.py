from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray

from . import settings
from .errors import SpectralError

RealMatrix = NDArray[np.float64]
ComplexMatrix = NDArray[np.complex128]

_J = np.array([[0.0, 1.0], [-1.0, 0.0]])


def as_matrix(value: ArrayLike, *, name: str = "matrix", dtype=np.float64) -> NDArray:
    arr = np.array(value, dtype=dtype)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} must be a non-empty 2-D matrix, got shape {arr.shape!r}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def frozen(arr: NDArray) -> NDArray:
    arr.setflags(write=False)
    return arr


def symplectic(n: int) -> RealMatrix:
    """Block-diagonal symplectic form J_n = I_n ⊗ [[0, 1], [-1, 0]]."""
    if n < 1:
        raise ValueError(f"Mode count must be positive, got {n!r}")
    return np.kron(np.eye(n), _J)


def sync_projections(n: int) -> tuple[RealMatrix, RealMatrix]:
    """Projections of R^{4n} onto the synchronized subspace and onto its complement."""
    if n < 1:
        raise ValueError(f"Mode count must be positive, got {n!r}")
    eye = np.eye(2 * n)
    pi = 0.5 * np.block([[eye, eye], [eye, eye]])
    pi_perp = 0.5 * np.block([[eye, -eye], [-eye, eye]])
    return pi, pi_perp


def _halves(d: RealMatrix) -> tuple[RealMatrix, RealMatrix, RealMatrix, RealMatrix]:
    size = d.shape[0]
    if d.ndim != 2 or size != d.shape[1] or size % 4:
        raise ValueError(f"Expected a 4n x 4n matrix, got shape {d.shape!r}")
    h = size // 2
    return d[:h, :h], d[:h, h:], d[h:, :h], d[h:, h:]


def cross_block(d: RealMatrix) -> RealMatrix:
    """D1 = D11 - D21 + D12 - D22, so that Π⊥ D Π = ¼[[D1, D1], [-D1, -D1]]."""
    d11, d12, d21, d22 = _halves(np.asarray(d))
    return d11 - d21 + d12 - d22


def error_block(d: RealMatrix) -> RealMatrix:
    """D2 = D11 - D21; Π⊥ D Π⊥ = ½[[D2, -D2], [-D2, D2]] whenever Π⊥ D Π = 0."""
    d11, _, d21, _ = _halves(np.asarray(d))
    return d11 - d21


@dataclass(frozen=True, eq=False)
class SpectralSummary:
    eigenvalues: tuple[complex, ...]
    spectral_abscissa: float
    sigma_min: float
    sigma_max: float

    @property
    def lambda1(self) -> complex:
        return self.eigenvalues[0]

    @property
    def norm(self) -> float:
        return self.sigma_max


def _sort_key(z: complex) -> tuple[float, float]:
    return (-z.real, -z.imag)


def spectral_summary(a: ArrayLike) -> SpectralSummary:
    mat = np.asarray(a)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1] or mat.shape[0] == 0:
        raise ValueError(f"Spectral summary needs a square matrix, got shape {mat.shape!r}")
    if not np.all(np.isfinite(mat)):
        raise ValueError("Spectral summary needs finite entries")

    try:
        if np.isrealobj(mat) and np.array_equal(mat, mat.T):
            eigenvalues = scipy.linalg.eigvalsh(mat).astype(np.complex128)
        else:
            eigenvalues = scipy.linalg.eigvals(mat)
        singular = scipy.linalg.svdvals(mat)
    except np.linalg.LinAlgError as exc:
        raise SpectralError(f"Dense eigensolver failed: {exc}") from exc

    ordered = tuple(sorted((complex(z) for z in eigenvalues), key=_sort_key))
    return SpectralSummary(
        eigenvalues=ordered,
        spectral_abscissa=ordered[0].real,
        sigma_min=float(singular.min()),
        sigma_max=float(singular.max()),
    )


def spectral_norm(a: ArrayLike) -> float:
    mat = np.asarray(a)
    if mat.size == 0:
        return 0.0
    try:
        return float(scipy.linalg.svdvals(mat).max())
    except np.linalg.LinAlgError as exc:
        raise SpectralError(f"SVD failed: {exc}") from exc


def is_hurwitz(a: ArrayLike | SpectralSummary, *, eps: float = settings.HURWITZ_EPS) -> bool:
    summary = a if isinstance(a, SpectralSummary) else spectral_summary(a)
    return summary.spectral_abscissa < -eps
