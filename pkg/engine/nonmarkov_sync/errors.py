from __future__ import annotations

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .sync import ConditionReport


class ConfigError(ValueError):
    """Malformed run configuration; `line` points into the source document when known."""

    def __init__(self, message: str, *, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        prefix = f"line {line}: " if line is not None else ""
        where = f" (at {path})" if path else ""
        super().__init__(f"{prefix}{message}{where}")


class PreconditionError(ValueError):
    def __init__(self, message: str, *, report: ConditionReport | None = None):
        self.report = report
        super().__init__(message)


class SpectralError(RuntimeError):
    """Dense eigensolver or SVD did not converge."""


class DivergenceError(RuntimeError):
    def __init__(self, t: float, norm: float):
        self.t = t
        self.norm = norm
        super().__init__(f"State norm {norm:.3e} exceeded the divergence limit at t={t:.6g}")
