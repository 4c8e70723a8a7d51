from enum import Enum


class FaultKind(str, Enum):
    NONE = "none"
    STEP = "step"
    IMPULSE = "impulse"


class NoiseKind(str, Enum):
    GAUSSIAN = "gaussian"
    PAPER_RANDOM_WALK = "paper_random_walk"


class ControllerKind(str, Enum):
    NONE = "none"
    DISCRETE_PI = "discrete_pi"


class FilterKind(str, Enum):
    KALMAN = "kalman"
    HINF = "hinf"


# What a calibration percentile is taken over: every fault-free h value, or the
# largest h of each fault-free run.
class TauStatistic(str, Enum):
    POOLED = "pooled"
    RUN_MAX = "run_max"


# Numerical tolerances shared by the filter and detector code.
tolerances = {
    "pd_eigenvalue": 1e-12,
    "condition_cap": 1e12,
    "symmetry": 1e-10,
    "psd_factor": 1e-12,
}

# Defaults filled in when a scenario leaves a value out.
scenario_defaults = {
    "horizon": 400,
    "tau_scale": 3.0,
    "tau_percentile": 99.0,
    "tau_statistic": "pooled",
    "pe_window": 20,
    "pe_gamma": 1e-6,
    "search_window": 100,
    "figure_seed": 20240601,
}

exit_codes = {
    "ok": 0,
    "usage": 1,
    "numerical": 2,
    "divergence": 3,
}
