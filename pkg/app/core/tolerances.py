"""Numeric tolerances and budgets shared by the core modules."""

TAU_EIG: float = 1e-9
TAU_LIN: float = 1e-9
TAU_GEO: float = 1e-12
TAU_AREA: float = 1e-12
TAU_WEIGHTS: float = 1e-12

# |mu_hat| below this is an exact zero in log-domain products
ZERO_CHARACTER: float = 1e-300

STATE_CAP: int = 2**27

# replicates per worker-thread slice; every replicate keeps its own stream
SIMULATION_BLOCK: int = 4096
