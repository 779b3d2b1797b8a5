"""Simulation of small-noise SDEs with dissipative, locally Lipschitz coefficients."""

__version__ = "0.1.0"

from .errors import ConfigError, DivergenceError, InvalidInputError  # noqa: E402
from .model import (  # noqa: E402
    Problem, TruncationLevel, builtin_problem, clip_vector, constant_problem, cubic_problem,
    ou_problem, polynomial_problem, truncate_coefficients,
)
from .randomness import TimeGrid, derive_path_seed, sample_increments  # noqa: E402
from .integrate import euler_maruyama, integrate_pair, solve_ode, truncated_euler  # noqa: E402
from .approx import MCEstimate, epsilon_sweep, estimate_strong_error  # noqa: E402

__all__ = [
    "ConfigError", "DivergenceError", "InvalidInputError",
    "Problem", "TruncationLevel", "builtin_problem", "clip_vector", "truncate_coefficients",
    "ou_problem", "cubic_problem", "constant_problem", "polynomial_problem",
    "TimeGrid", "derive_path_seed", "sample_increments",
    "euler_maruyama", "integrate_pair", "solve_ode", "truncated_euler",
    "MCEstimate", "epsilon_sweep", "estimate_strong_error",
]
