"""Ensemble estimates of how fast the perturbed solution approaches the ODE flow.

The squared discrepancy ``E|X_t^eps - x_t|^2`` is expected to scale like
``eps^2 a(t)`` with an unknown increasing ``a``.  Nothing here tries to pin
down ``a`` itself: checks are either against closed forms or on the fitted
log-log slope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from scipy import stats

from .ensemble import raise_on_divergence, run_ensemble
from .errors import InvalidInputError
from .integrate import pair_differences, solve_ode
from .model import Problem
from .randomness import TimeGrid

__all__ = [
    "MCEstimate",
    "SweepResult",
    "MomentCurve",
    "estimate_strong_error",
    "coupled_discrepancies",
    "epsilon_sweep",
    "moment_bound_check",
    "moment_bound",
    "exceedance_probability",
    "gronwall_check",
    "gronwall_premise_holds",
    "decreasing_beyond_noise",
]

MODES = ("terminal", "sup")


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    n_paths: int

    @classmethod
    def from_samples(cls, samples):
        x = np.asarray(samples, dtype=float)
        n = x.size
        if n == 0:
            raise InvalidInputError("cannot estimate from zero samples")
        sd = float(np.std(x, ddof=1)) if n > 1 else 0.0
        return cls(float(np.mean(x)), sd / math.sqrt(n), n)

    def band(self, k=3.0):
        return self.mean - k * self.stderr, self.mean + k * self.stderr

    def within(self, target, k=4.0):
        return abs(self.mean - target) <= k * self.stderr


@dataclass(frozen=True)
class SweepResult:
    epsilons: List[float]
    sq_error_estimates: List[MCEstimate]
    slope_fit: float
    slope_stderr: float
    intercept: float
    mode: str = "terminal"

    @property
    def a_estimate(self):
        """Smallest ``a`` with ``mean <= eps^2 a`` at every swept ``eps``."""
        return max(e.mean / (eps * eps) for eps, e in zip(self.epsilons, self.sq_error_estimates))

    def first_moment_bound(self, eps):
        """``eps * sqrt(a)``: the first-moment bound implied by the squared one via Jensen."""
        return eps * math.sqrt(self.a_estimate)


@dataclass(frozen=True)
class MomentCurve:
    """Per-grid-point estimates of ``1 + E|X_t|^2`` alongside the analytic bound."""

    grid: TimeGrid
    mean: np.ndarray
    stderr: np.ndarray
    bound: np.ndarray
    n_paths: int

    @property
    def second_moment(self):
        return [MCEstimate(float(m), float(s), self.n_paths) for m, s in zip(self.mean, self.stderr)]


def _check_mode(mode):
    if mode not in MODES:
        raise InvalidInputError(f"mode must be one of {MODES}, got {mode!r}")


def coupled_discrepancies(p: Problem, epsilon, grid: TimeGrid, level, n_paths, master_seed, *,
                          scheme="truncated", stream_tag=0, workers=1):
    """Per-path ``(sup_abs_diff, terminal_sq_diff)`` against the RK4 flow, in path order."""
    ode = solve_ode(p, grid)
    if ode.diverged:
        raise_on_divergence(np.array([True]), "unperturbed ODE")

    def reducer(chunk):
        sup, term = pair_differences(chunk.result.states, ode.states)
        return {"sup": sup, "terminal": term, "diverged": chunk.result.diverged}

    out = run_ensemble(p, epsilon, grid, n_paths, master_seed, reducer, scheme=scheme,
                       level=level, stream_tag=stream_tag, workers=workers)
    raise_on_divergence(out["diverged"], f"eps={epsilon}")
    return out["sup"], out["terminal"]


def estimate_strong_error(p: Problem, epsilon, grid: TimeGrid, level, n_paths, master_seed,
                          mode="terminal", *, scheme="truncated", stream_tag=0,
                          workers=1) -> MCEstimate:
    """Monte Carlo estimate of ``E|X_T - x_T|^2`` (terminal) or ``E sup_k |X_k - x_k|^2`` (sup).

    The sup is taken over grid points only, so it under-estimates the
    continuous-time supremum.
    """
    _check_mode(mode)
    if int(n_paths) < 2:
        raise InvalidInputError("n_paths must be >= 2")
    sup, term = coupled_discrepancies(p, epsilon, grid, level, n_paths, master_seed,
                                      scheme=scheme, stream_tag=stream_tag, workers=workers)
    return MCEstimate.from_samples(term if mode == "terminal" else sup * sup)


def epsilon_sweep(p: Problem, epsilons: Sequence[float], grid: TimeGrid, level, n_paths,
                  master_seed, mode="terminal", *, independent_seeds=False, scheme="truncated",
                  workers=1) -> SweepResult:
    """Strong error over a set of noise levels and its least-squares log-log slope.

    By default every noise level reuses the same path seeds (common random
    numbers), which makes the fitted slope far less noisy than the individual
    estimates.  ``independent_seeds=True`` gives each level its own stream.
    """
    eps = sorted((float(e) for e in epsilons), reverse=True)
    if len(eps) < 3 or len(set(eps)) != len(eps) or min(eps) <= 0:
        raise InvalidInputError("epsilon_sweep needs >= 3 distinct positive values")
    estimates = [
        estimate_strong_error(p, e, grid, level, n_paths, master_seed, mode, scheme=scheme,
                              stream_tag=(i + 1) if independent_seeds else 0, workers=workers)
        for i, e in enumerate(eps)
    ]
    usable = [(e, est.mean) for e, est in zip(eps, estimates) if est.mean > 0]
    slope = slope_err = intercept = float("nan")
    if len(usable) >= 3:
        x = np.log([u[0] for u in usable])
        y = np.log([u[1] for u in usable])
        fit = stats.linregress(x, y)
        slope, slope_err, intercept = float(fit.slope), float(fit.stderr), float(fit.intercept)
    return SweepResult(eps, estimates, slope, slope_err, intercept, mode)


def moment_bound(x0, K, epsilon, times):
    """``(1 + |x|^2) exp((2K^2 + eps^2 K^2) t)``."""
    x0 = np.asarray(x0, dtype=float)
    rate = (2.0 + epsilon * epsilon) * K * K
    return (1.0 + float(np.dot(x0, x0))) * np.exp(rate * np.asarray(times, dtype=float))


def moment_bound_check(p: Problem, epsilon, K, grid: TimeGrid, level, n_paths, master_seed, *,
                       scheme="truncated", k_stderr=3.0, workers=1):
    """Compare the simulated ``1 + E|X_t|^2`` with its exponential bound at every grid point.

    ``K`` should come from a passing :func:`check_dissipativity` report.
    Returns ``(curve, passed)`` where ``passed`` means ``mean - 3 stderr <= bound``
    everywhere.
    """
    if not (np.isfinite(K) and K >= 0):
        raise InvalidInputError(f"K must be nonnegative, got {K}")
    if int(n_paths) < 2:
        raise InvalidInputError("n_paths must be >= 2")

    def reducer(chunk):
        m = 1.0 + np.sum(chunk.result.states ** 2, axis=-1)
        mean = m.mean(axis=0)
        m2 = np.sum((m - mean) ** 2, axis=0)
        return {"count": np.array([m.shape[0]]), "mean": mean[None], "m2": m2[None],
                "diverged": chunk.result.diverged}

    out = run_ensemble(p, epsilon, grid, n_paths, master_seed, reducer, scheme=scheme,
                       level=level, workers=workers)
    raise_on_divergence(out["diverged"], f"eps={epsilon}")

    # Chan et al. pairwise combination, applied in chunk order
    n_tot, mean, m2 = 0, None, None
    for n_c, mean_c, m2_c in zip(out["count"], out["mean"], out["m2"]):
        if mean is None:
            n_tot, mean, m2 = int(n_c), mean_c.copy(), m2_c.copy()
            continue
        n_new = n_tot + int(n_c)
        delta = mean_c - mean
        mean = mean + delta * (n_c / n_new)
        m2 = m2 + m2_c + delta * delta * (n_tot * n_c / n_new)
        n_tot = n_new
    n = int(n_paths)
    stderr = np.sqrt(m2 / (n - 1)) / math.sqrt(n)
    bound = moment_bound(p.x0, K, epsilon, grid.times)
    curve = MomentCurve(grid, mean, stderr, bound, n)
    passed = bool(np.all(mean - k_stderr * stderr <= bound))
    return curve, passed


def exceedance_probability(p: Problem, epsilon, delta, grid: TimeGrid, level, n_paths,
                           master_seed, *, scheme="truncated", stream_tag=0,
                           workers=1) -> MCEstimate:
    """Fraction of coupled paths with ``max_k |X_k - x_k| > delta``, with binomial stderr."""
    if not (np.isfinite(delta) and delta > 0):
        raise InvalidInputError(f"delta must be positive, got {delta}")
    sup, _ = coupled_discrepancies(p, epsilon, grid, level, n_paths, master_seed, scheme=scheme,
                                   stream_tag=stream_tag, workers=workers)
    n = sup.size
    frac = float(np.count_nonzero(sup > delta)) / n
    return MCEstimate(frac, math.sqrt(frac * (1.0 - frac) / n), n)


def _check_curve(m):
    m = np.asarray(m, dtype=float)
    if np.any(m < 0) or not np.all(np.isfinite(m)):
        raise InvalidInputError("Gronwall check needs a finite nonnegative curve")
    return m


def gronwall_check(m, times, C, alpha, rtol=1e-12):
    """True iff ``m(t_k) <= C exp(alpha t_k)`` at every grid point."""
    m = _check_curve(m)
    bound = C * np.exp(alpha * np.asarray(times, dtype=float))
    return bool(np.all(m <= bound * (1.0 + rtol)))


def gronwall_premise_holds(m, times, C, alpha, rtol=1e-12):
    """True iff ``m(t_k) <= C + alpha * int_0^{t_k} m`` (trapezoid rule) at every grid point."""
    m = _check_curve(m)
    t = np.asarray(times, dtype=float)
    integral = np.concatenate([[0.0], np.cumsum(0.5 * (m[1:] + m[:-1]) * np.diff(t))])
    rhs = C + alpha * integral
    return bool(np.all(m <= rhs * (1.0 + rtol)))


def decreasing_beyond_noise(values, stderrs, k=2.0):
    """Each consecutive step drops by more than ``k`` combined stderrs, or both
    neighbours are already indistinguishable from zero."""
    ok = []
    for (v0, s0), (v1, s1) in zip(zip(values, stderrs), zip(values[1:], stderrs[1:])):
        combined = math.hypot(s0, s1)
        at_zero = v0 <= k * s0 and v1 <= k * s1
        ok.append(v0 - v1 > k * combined or at_zero)
    return all(ok)
