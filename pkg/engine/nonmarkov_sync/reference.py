"""Built-in two-oscillator example: one mode per subsystem, Lorentzian bath with β = 9."""

from __future__ import annotations

from typing import Final

import numpy as np

from .kernel import MemoryKernel
from .model import SubsystemParams

REFERENCE_BETA: Final = 9.0
REFERENCE_GAIN: Final = 0.4
REFERENCE_OMEGA: Final = ((0.0, 0.1), (0.1, 0.0))
REFERENCE_V: Final = ((0.2 + 0.0j, -0.1j),)

# Coherent amplitudes used to build the product initial states.
ALPHAS: Final = {"alpha1": 1.0 + 0.0j, "alpha2": 0.0j, "alpha3": 1.0j}

# (name, amplitude of subsystem 1, amplitude of subsystem 2)
SCENARIOS: Final = (
    ("scenario1", "alpha1", "alpha2"),
    ("scenario2", "alpha2", "alpha3"),
    ("scenario3", "alpha1", "alpha3"),
)


def reference_subsystem(beta: float = REFERENCE_BETA) -> SubsystemParams:
    return SubsystemParams(
        omega=np.array(REFERENCE_OMEGA),
        v=np.array(REFERENCE_V),
        kernel=MemoryKernel.single_exponential(1.0, beta),
    )


def reference_scenarios() -> list[tuple[str, list[complex], list[complex]]]:
    return [(name, [ALPHAS[a]], [ALPHAS[b]]) for name, a, b in SCENARIOS]


def _pair(z: complex) -> list[float]:
    return [z.real, z.imag]


def reference_config(beta: float = REFERENCE_BETA) -> dict[str, object]:
    """Run configuration document for the built-in example (engineered blocks left out)."""
    sub = reference_subsystem(beta).as_dict()
    return {
        "schema_version": 1,
        "subsystems": [sub, reference_subsystem(beta).as_dict()],
        "gain": REFERENCE_GAIN,
        "integrator": {"method": "exponential-lift", "dt": 1e-3, "horizon": 20.0},
        "scenarios": [
            {"name": name, "alphas1": [_pair(z1) for z1 in a1], "alphas2": [_pair(z2) for z2 in a2]}
            for name, a1, a2 in reference_scenarios()
        ],
    }
