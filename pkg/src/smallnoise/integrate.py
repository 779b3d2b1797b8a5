"""Time steppers for the unperturbed ODE and the perturbed SDE.

``euler_maruyama`` is the plain explicit scheme.  ``truncated_euler`` runs the
same recursion on the clipped coefficients ``b_N``, ``sigma_N`` starting from
the clipped point ``x_N``; because clipping is the identity on values inside
``[-N, N]`` the two produce bit-identical states for as long as no clipping
is triggered.  Both are thin wrappers over :func:`step_batch`, which advances
many paths at once and is what the ensemble code uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DivergenceError, InvalidInputError
from .model import Problem, as_level
from .randomness import BrownianIncrements, TimeGrid

__all__ = [
    "OdePath",
    "SdePath",
    "PathPair",
    "BatchResult",
    "solve_ode",
    "euler_maruyama",
    "truncated_euler",
    "integrate_pair",
    "step_batch",
    "pair_differences",
]


@dataclass(frozen=True)
class OdePath:
    grid: TimeGrid
    states: np.ndarray
    diverged: bool = False


@dataclass(frozen=True)
class SdePath:
    """One simulated path.  ``states`` stops at the last finite row when ``diverged``."""

    grid: TimeGrid
    states: np.ndarray
    epsilon: float
    exit_time: Optional[float] = None
    diverged: bool = False

    @property
    def exit_index(self):
        if self.exit_time is None:
            return None
        return int(round(self.exit_time / self.grid.dt))


@dataclass(frozen=True)
class PathPair:
    perturbed: SdePath
    unperturbed: OdePath
    sup_abs_diff: float
    terminal_sq_diff: float


@dataclass(frozen=True)
class BatchResult:
    """Output of :func:`step_batch`.

    ``states`` has shape ``(P, n_steps + 1, r)``; rows at or after
    ``n_valid[p]`` of a diverged path are NaN.  ``exit_index[p]`` is the first
    grid index whose sup-norm exceeds the exit level, or -1.
    """

    states: np.ndarray
    diverged: np.ndarray
    n_valid: np.ndarray
    exit_index: np.ndarray


def _noise_term(s, dw):
    # s: (P, r, l), dw: (P, l); plain multiply-and-sum keeps each row independent of batch size
    return (s * dw[:, None, :]).sum(axis=-1)


def step_batch(p: Problem, epsilon, dW, dt, x0=None, level=None) -> BatchResult:
    """Advance ``P`` paths of ``X_{k+1} = X_k + b(X_k) dt + eps sigma(X_k) dW_k``.

    With ``level`` set, drift and diffusion values are clipped to ``[-N, N]``
    and the first grid index at which ``|X|_inf > N`` is recorded.  Paths with
    a non-finite state are frozen, flagged and padded with NaN.
    """
    epsilon = float(epsilon)
    if not (np.isfinite(epsilon) and epsilon >= 0):
        raise InvalidInputError(f"epsilon must be nonnegative, got {epsilon}")
    dW = np.asarray(dW, dtype=float)
    P, n, l = dW.shape
    r = p.dim_r
    if l != p.dim_l:
        raise InvalidInputError(f"increments have {l} columns, diffusion has l={p.dim_l}")
    x = np.array(p.x0 if x0 is None else x0, dtype=float)
    if x.ndim == 1:
        x = np.broadcast_to(x, (P, r)).copy()
    N = None if level is None else as_level(level).N
    if N is not None:
        x = np.clip(x, -N, N)

    b, sigma = p.b.func, p.sigma.func
    states = np.empty((P, n + 1, r))
    states[:, 0] = x
    diverged = np.zeros(P, dtype=bool)
    n_valid = np.full(P, n + 1, dtype=np.int64)
    exit_index = np.full(P, -1, dtype=np.int64)

    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            drift = b(x)
            if N is not None:
                drift = np.clip(drift, -N, N)
            x_new = x + drift * dt
            if epsilon != 0.0:
                s = sigma(x)
                if N is not None:
                    s = np.clip(s, -N, N)
                x_new = x_new + epsilon * _noise_term(s, dW[:, k])
            finite = np.isfinite(x_new).all(axis=-1)
            if not finite.all():
                fresh = ~finite & ~diverged
                n_valid[fresh] = k + 1
                diverged |= ~finite
                x_new[~finite] = x[~finite]
            if N is not None:
                out = (np.abs(x_new).max(axis=-1) > N) & (exit_index < 0)
                exit_index[out] = k + 1
            states[:, k + 1] = x_new
            x = x_new

    for i in np.flatnonzero(diverged):
        states[i, n_valid[i]:] = np.nan
    return BatchResult(states, diverged, n_valid, exit_index)


def _check_incr(p: Problem, incr: BrownianIncrements):
    if incr.dW.shape != (incr.grid.n_steps, p.dim_l):
        raise InvalidInputError(
            f"increments shape {incr.dW.shape} does not match grid/l "
            f"({incr.grid.n_steps}, {p.dim_l})")


def _to_path(res: BatchResult, grid, epsilon, with_exit):
    nv = int(res.n_valid[0])
    states = res.states[0, :nv].copy()
    exit_time = None
    if with_exit and res.exit_index[0] >= 0:
        exit_time = float(grid.times[res.exit_index[0]])
    return SdePath(grid, states, float(epsilon), exit_time, bool(res.diverged[0]))


def euler_maruyama(p: Problem, epsilon, incr: BrownianIncrements) -> SdePath:
    """Explicit Euler-Maruyama path.  Divergence is flagged, never hidden."""
    _check_incr(p, incr)
    res = step_batch(p, epsilon, incr.dW[None], incr.grid.dt)
    return _to_path(res, incr.grid, epsilon, with_exit=False)


def truncated_euler(p: Problem, epsilon, incr: BrownianIncrements, level) -> SdePath:
    """Euler-Maruyama on the clipped coefficients, recording the box exit time."""
    _check_incr(p, incr)
    res = step_batch(p, epsilon, incr.dW[None], incr.grid.dt, level=level)
    return _to_path(res, incr.grid, epsilon, with_exit=True)


def solve_ode(p: Problem, grid: TimeGrid, x0=None) -> OdePath:
    """Classical fourth-order Runge-Kutta for ``x' = b(x)`` on ``grid``."""
    b = p.b.func
    h = grid.dt
    x = np.array(p.x0 if x0 is None else x0, dtype=float)
    states = np.empty((grid.n_steps + 1,) + x.shape)
    states[0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(grid.n_steps):
            k1 = b(x)
            k2 = b(x + 0.5 * h * k1)
            k3 = b(x + 0.5 * h * k2)
            k4 = b(x + h * k3)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(x)):
                return OdePath(grid, states[:k + 1].copy(), diverged=True)
            states[k + 1] = x
    return OdePath(grid, states)


def pair_differences(states, ode_states):
    """Per-path ``(sup_k |X_k - x_k|, |X_T - x_T|^2)`` for states of shape ``(P, n+1, r)``."""
    with np.errstate(over="ignore", invalid="ignore"):
        diff = states - ode_states[None]
        sq = np.sum(diff * diff, axis=-1)
    return np.sqrt(sq.max(axis=-1)), sq[:, -1]


def integrate_pair(p: Problem, epsilon, incr: BrownianIncrements, level) -> PathPair:
    """Truncated SDE path and RK4 ODE path on the same grid, with their discrepancies."""
    ode = solve_ode(p, incr.grid)
    if ode.diverged:
        raise DivergenceError("unperturbed ODE diverged", ())
    sde = truncated_euler(p, epsilon, incr, level)
    sup, term = pair_differences(sde.states[None], ode.states)
    return PathPair(sde, ode, float(sup[0]), float(term[0]))
