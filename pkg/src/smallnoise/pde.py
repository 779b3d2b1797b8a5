"""Cauchy and transport problems with a small second-order term.

For ``eps > 0`` the solution is the Feynman-Kac expectation

    v(t, x) = E[ f(X_t) exp(int_0^t c(X_s) ds) + int_0^t g(X_s) exp(int_0^s c(X_u) du) ds ]

over paths of ``dX = b(X) dt + eps sigma(X) dW`` started at ``x``.  Both time
integrals use left-endpoint sums on the simulation grid so they share the
Euler scheme's order.  For ``eps = 0`` the same functional is evaluated along
the ODE characteristic with the trapezoid rule; that value is the reference
the Monte Carlo sweep converges to.

Scalar fields are vectorised callables mapping states of shape ``(..., r)``
to values of shape ``(...)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy import stats

from .approx import MCEstimate, decreasing_beyond_noise
from .ensemble import raise_on_divergence, run_ensemble
from .errors import DivergenceError, InvalidInputError
from .integrate import solve_ode
from .model import ConditionReport, DiffusionField, Problem, VectorField
from .randomness import TimeGrid

__all__ = [
    "CauchySpec",
    "OperatorSpec",
    "PdeSolution",
    "PdeSweepReport",
    "check_ellipticity",
    "solve_cauchy_mc",
    "solve_cauchy_characteristics",
    "solve_transport",
    "pde_epsilon_sweep",
    "zero",
    "one",
    "constant",
    "coordinate",
    "squared_norm",
    "polynomial",
]

ScalarField = Callable[[np.ndarray], np.ndarray]


def constant(value):
    value = float(value)

    def field_(y):
        return np.full(np.shape(y)[:-1], value)

    return field_


zero = constant(0.0)
one = constant(1.0)


def coordinate(i=0):
    def field_(y):
        return np.asarray(y, dtype=float)[..., i]

    return field_


def squared_norm(y):
    y = np.asarray(y, dtype=float)
    return np.sum(y * y, axis=-1)


def polynomial(coeffs, component=0):
    """Polynomial (ascending coefficients) in a single state component."""
    coeffs = np.asarray(coeffs, dtype=float)

    def field_(y):
        return np.polynomial.polynomial.polyval(np.asarray(y, dtype=float)[..., component], coeffs)

    return field_


@dataclass(frozen=True)
class CauchySpec:
    """Potential ``c``, source ``g`` and initial datum ``f``.

    ``c_bound`` and ``f_bound`` are optional declared sup-bounds; values seen
    along simulated paths that exceed them are reported as warnings.
    """

    f: ScalarField = one
    c: ScalarField = zero
    g: ScalarField = zero
    c_bound: Optional[float] = None
    f_bound: Optional[float] = None


def check_ellipticity(b: VectorField, sigma: DiffusionField, k, box_halfwidth=10.0,
                      n_samples=256, seed=0) -> ConditionReport:
    """Sampled check of ``k^-2 |lam|^2 <= lam^T sigma sigma^T lam <= k^2 |lam|^2``."""
    rng = np.random.default_rng(seed)
    r = sigma.dim_r
    xs = rng.uniform(-box_halfwidth, box_halfwidth, size=(n_samples, r))
    lam = rng.standard_normal((n_samples, r))
    s = np.asarray(sigma(xs), dtype=float)
    proj = np.einsum("ni,nij->nj", lam, s)
    quad = np.sum(proj * proj, axis=-1)
    norm2 = np.sum(lam * lam, axis=-1)
    k2 = float(k) ** 2
    # small relative slack so that sigma = k I passes with equality
    slack = 1e-12 * norm2 * k2
    bad = (quad < norm2 / k2 - slack) | (quad > norm2 * k2 + slack) | ~np.isfinite(quad)
    point = None
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        point = (tuple(xs[i]), tuple(lam[i]))
    return ConditionReport("ellipticity", not bad.any(), k2, point, float(box_halfwidth),
                           int(n_samples), int(seed))


@dataclass(frozen=True)
class OperatorSpec:
    """Drift and diffusion factor of the generator; ``sigma sigma^T`` is the second-order matrix."""

    b: VectorField
    sigma: DiffusionField
    ellipticity_k: float = 1.0

    def __post_init__(self):
        if not self.ellipticity_k > 0:
            raise InvalidInputError("ellipticity_k must be positive")
        if self.b.dim_r != self.sigma.dim_r:
            raise InvalidInputError("drift and diffusion dimensions differ")
        report = check_ellipticity(self.b, self.sigma, self.ellipticity_k, n_samples=64)
        if not report.satisfied_on_sample:
            raise InvalidInputError(
                f"diffusion is not uniformly elliptic with k={self.ellipticity_k}: "
                f"violated at {report.violation_point}")

    @classmethod
    def from_problem(cls, p: Problem, ellipticity_k=1.0):
        return cls(p.b, p.sigma, ellipticity_k)

    def problem(self, x, t):
        return Problem(self.b, self.sigma, np.atleast_1d(np.asarray(x, dtype=float)), t)


@dataclass(frozen=True)
class PdeSolution:
    """``value`` with either a Monte Carlo stderr or a quadrature error estimate as ``uncertainty``."""

    t: float
    x: Tuple[float, ...]
    epsilon: float
    value: float
    uncertainty: float
    method: str
    n_paths: Optional[int] = None
    warnings: Tuple[str, ...] = ()

    @property
    def estimate(self):
        if self.method != "monte_carlo":
            return None
        return MCEstimate(self.value, self.uncertainty, self.n_paths)


@dataclass(frozen=True)
class PdeSweepReport:
    v0: PdeSolution
    epsilons: List[float]
    gaps: List[float]
    gap_stderrs: List[float]
    decreasing: bool
    slope_fit: float
    slope_stderr: float
    solutions: List[PdeSolution] = field(default_factory=list)


def _path_functional(states, spec: CauchySpec, dt):
    """Per-path Feynman-Kac integrand with left-endpoint sums; returns values and max |c|, |f|."""
    head = states[:, :-1]
    c_vals = np.asarray(spec.c(head), dtype=float)
    c_vals = np.broadcast_to(c_vals, head.shape[:-1])
    cum = np.zeros((states.shape[0], states.shape[1]))
    np.cumsum(c_vals * dt, axis=1, out=cum[:, 1:])
    weights = np.exp(cum)
    f_end = np.broadcast_to(np.asarray(spec.f(states[:, -1]), dtype=float), states.shape[:1])
    g_vals = np.broadcast_to(np.asarray(spec.g(head), dtype=float), head.shape[:-1])
    source = np.sum(g_vals * weights[:, :-1], axis=1) * dt
    values = f_end * weights[:, -1] + source
    return values, float(np.max(np.abs(c_vals))), float(np.max(np.abs(f_end)))


def _bound_warnings(spec: CauchySpec, c_max, f_max):
    out = []
    if spec.c_bound is not None and c_max > spec.c_bound:
        out.append(f"|c| reached {c_max:.6g} along paths, above declared bound {spec.c_bound:g}")
    if spec.f_bound is not None and f_max > spec.f_bound:
        out.append(f"|f| reached {f_max:.6g} along paths, above declared bound {spec.f_bound:g}")
    return tuple(out)


def solve_cauchy_mc(op: OperatorSpec, spec: CauchySpec, epsilon, t, x, grid: TimeGrid, level,
                    n_paths, master_seed, *, stream_tag=0, workers=1) -> PdeSolution:
    """Monte Carlo Feynman-Kac value at ``(t, x)`` using the truncated scheme.

    ``t`` must be a grid point of ``grid``; the simulation uses the grid's
    step up to ``t``.
    """
    if not epsilon > 0:
        raise InvalidInputError("solve_cauchy_mc needs epsilon > 0; use the characteristics solver")
    if int(n_paths) < 2:
        raise InvalidInputError("n_paths must be >= 2")
    sub = grid.prefix(t)
    p = op.problem(x, sub.T)

    def reducer(chunk):
        vals, c_max, f_max = _path_functional(chunk.result.states, spec, sub.dt)
        return {"value": vals, "diverged": chunk.result.diverged,
                "c_max": np.array([c_max]), "f_max": np.array([f_max])}

    out = run_ensemble(p, epsilon, sub, n_paths, master_seed, reducer, level=level,
                       stream_tag=stream_tag, workers=workers)
    raise_on_divergence(out["diverged"], f"cauchy eps={epsilon}")
    est = MCEstimate.from_samples(out["value"])
    warnings = _bound_warnings(spec, float(out["c_max"].max()), float(out["f_max"].max()))
    return PdeSolution(float(sub.T), tuple(float(v) for v in p.x0), float(epsilon), est.mean, est.stderr,
                       "monte_carlo", est.n_paths, warnings)


def _characteristic_value(op, spec, x, grid):
    p = op.problem(x, grid.T)
    ode = solve_ode(p, grid)
    if ode.diverged:
        raise DivergenceError(f"characteristic from x={tuple(float(v) for v in p.x0)} diverged", ())
    states = ode.states
    dt = grid.dt
    c_vals = np.broadcast_to(np.asarray(spec.c(states), dtype=float), states.shape[:1])
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (c_vals[1:] + c_vals[:-1]) * dt)])
    weights = np.exp(cum)
    g_vals = np.broadcast_to(np.asarray(spec.g(states), dtype=float), states.shape[:1])
    integrand = g_vals * weights
    source = float(np.sum(0.5 * (integrand[1:] + integrand[:-1])) * dt)
    f_end = float(np.asarray(spec.f(states[-1]), dtype=float))
    return f_end * weights[-1] + source, tuple(float(v) for v in p.x0)


def solve_cauchy_characteristics(op: OperatorSpec, spec: CauchySpec, t, x,
                                 grid: TimeGrid) -> PdeSolution:
    """Zero-noise solution along the ODE characteristic.

    The reported uncertainty is a Richardson estimate from re-solving on a grid
    with half as many steps (trapezoid rule, second order).
    """
    sub = grid.prefix(t)
    value, x0 = _characteristic_value(op, spec, x, sub)
    n = sub.n_steps
    if n >= 2:
        coarse_n = n // 2
        coarse, _ = _characteristic_value(op, spec, x, TimeGrid(sub.T, coarse_n))
        q = n / coarse_n
        err = abs(value - coarse) / (q * q - 1.0)
    else:
        fine, _ = _characteristic_value(op, spec, x, TimeGrid(sub.T, 2))
        err = abs(fine - value) / 3.0
    return PdeSolution(float(sub.T), x0, 0.0, float(value), float(err), "characteristics")


def solve_transport(op: OperatorSpec, f: ScalarField, epsilon, t, x, grid: TimeGrid, level=None,
                    n_paths=None, master_seed=0, *, stream_tag=0, workers=1) -> PdeSolution:
    """``v(t, x) = E f(X_t)``; zero noise goes to the characteristics solver."""
    spec = CauchySpec(f=f)
    if epsilon == 0:
        return solve_cauchy_characteristics(op, spec, t, x, grid)
    if level is None or n_paths is None:
        raise InvalidInputError("epsilon > 0 needs a truncation level and n_paths")
    return solve_cauchy_mc(op, spec, epsilon, t, x, grid, level, n_paths, master_seed,
                           stream_tag=stream_tag, workers=workers)


def pde_epsilon_sweep(op: OperatorSpec, spec: CauchySpec, epsilons, t, x, grid: TimeGrid, level,
                      n_paths, master_seed, *, workers=1) -> PdeSweepReport:
    """Gaps ``|v^eps - v^0|`` over decreasing noise levels, with common random numbers.

    ``decreasing`` requires every step to shrink the gap by more than two
    combined stderrs unless both gaps are already indistinguishable from zero.
    """
    eps = sorted((float(e) for e in epsilons), reverse=True)
    if len(eps) < 3 or len(set(eps)) != len(eps) or min(eps) <= 0:
        raise InvalidInputError("pde_epsilon_sweep needs >= 3 distinct positive epsilons")
    v0 = solve_cauchy_characteristics(op, spec, t, x, grid)
    sols = [solve_cauchy_mc(op, spec, e, t, x, grid, level, n_paths, master_seed, workers=workers)
            for e in eps]
    gaps = [abs(s.value - v0.value) for s in sols]
    ses = [math.hypot(s.uncertainty, v0.uncertainty) for s in sols]
    decreasing = decreasing_beyond_noise(gaps, ses)
    slope = slope_err = float("nan")
    usable = [(e, gp) for e, gp in zip(eps, gaps) if gp > 0]
    if len(usable) >= 3:
        fit = stats.linregress(np.log([u[0] for u in usable]), np.log([u[1] for u in usable]))
        slope, slope_err = float(fit.slope), float(fit.stderr)
    return PdeSweepReport(v0, eps, gaps, ses, decreasing, slope, slope_err, sols)
