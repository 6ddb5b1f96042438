LOG_LEVEL = "INFO"
LOG_FORMAT = "%(asctime)s [%(name)s] %(levelname)s: %(message)s"

SCHEMA_VERSION = 1

# Tolerances.
SYMMETRY_TOL = 1e-10
RESIDUAL_TOL = 1e-10
HURWITZ_EPS = 1e-10
TOTAL_EPS = 1e-12
TAIL_REL_TOL = 1e-8
DOMINANCE_TOL = 1e-10
HOMOGENEITY_TOL = 1e-10
ZERO_MASS_TOL = 1e-14
# Structure tests on error-kernel coefficients pass when |residual| <= ATOL + RTOL * scale.
PROJECTOR_ATOL = 1e-14
PROJECTOR_RTOL = 1e-12

# Time samples (seconds) at which the memory-kernel balance condition is checked.
CONDITION_T_SAMPLES = (0.0, 0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0)

# Integrator defaults.
DEFAULT_DT = 1e-3
DEFAULT_HORIZON = 20.0
DIVERGENCE_LIMIT = 1e12
MEMORY_CUTOFF_REL = 1e-12

# A trajectory counts as decayed once its norm is below this fraction of the initial norm.
DECAY_FRACTION = 1e-3

SIGNIFICANT_DIGITS = 12
