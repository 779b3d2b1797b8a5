"""SDE problem definitions, coefficient truncation and sampled condition checks.

Coefficient callables are vectorised: a drift maps an array of states with
shape ``(..., r)`` to an array of the same shape, and a diffusion maps it to
shape ``(..., r, l)``.  All ensemble code relies on this to step many paths at
once, so custom coefficients must be written with numpy broadcasting in mind.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "VectorField",
    "DiffusionField",
    "Problem",
    "ConditionReport",
    "TruncationLevel",
    "clip_vector",
    "truncate_coefficients",
    "check_dissipativity",
    "check_difference_dissipativity",
    "estimate_local_lipschitz",
    "dissipativity_margin",
    "difference_dissipativity_margin",
    "ou_problem",
    "cubic_problem",
    "constant_problem",
    "polynomial_problem",
    "builtin_problem",
    "BUILTIN_PROBLEMS",
]


@dataclass(frozen=True)
class VectorField:
    func: Callable[[np.ndarray], np.ndarray]
    dim_r: int

    def __post_init__(self):
        if int(self.dim_r) < 1:
            raise InvalidInputError(f"dim_r must be positive, got {self.dim_r}")
        probe = np.asarray(self.func(np.zeros(self.dim_r)), dtype=float)
        if probe.shape != (self.dim_r,):
            raise InvalidInputError(
                f"drift returned shape {probe.shape}, expected ({self.dim_r},)")

    def __call__(self, y):
        return self.func(y)

    eval = __call__


@dataclass(frozen=True)
class DiffusionField:
    func: Callable[[np.ndarray], np.ndarray]
    dim_r: int
    dim_l: int

    def __post_init__(self):
        if int(self.dim_r) < 1 or int(self.dim_l) < 1:
            raise InvalidInputError(
                f"dimensions must be positive, got r={self.dim_r}, l={self.dim_l}")
        probe = np.asarray(self.func(np.zeros(self.dim_r)), dtype=float)
        if probe.shape != (self.dim_r, self.dim_l):
            raise InvalidInputError(
                f"diffusion returned shape {probe.shape}, expected ({self.dim_r}, {self.dim_l})")

    def __call__(self, y):
        return self.func(y)

    eval = __call__


@dataclass(frozen=True)
class Problem:
    """Drift ``b``, diffusion ``sigma``, initial point ``x0`` and horizon of
    ``dX = b(X) dt + eps * sigma(X) dW``."""

    b: VectorField
    sigma: DiffusionField
    x0: np.ndarray
    horizon_T: float = 1.0
    label: str = ""

    def __post_init__(self):
        x0 = np.array(self.x0, dtype=float).reshape(-1)
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        if not (self.b.dim_r == self.sigma.dim_r == x0.shape[0]):
            raise InvalidInputError(
                f"dimension mismatch: drift r={self.b.dim_r}, diffusion r={self.sigma.dim_r}, "
                f"len(x0)={x0.shape[0]}")
        if not np.all(np.isfinite(x0)):
            raise InvalidInputError("x0 must be finite")
        T = float(self.horizon_T)
        if not (np.isfinite(T) and T > 0):
            raise InvalidInputError(f"horizon_T must be positive and finite, got {self.horizon_T}")

    @property
    def dim_r(self):
        return self.b.dim_r

    @property
    def dim_l(self):
        return self.sigma.dim_l

    def with_x0(self, x0, horizon_T=None):
        return replace(self, x0=x0, horizon_T=self.horizon_T if horizon_T is None else horizon_T)


@dataclass(frozen=True)
class TruncationLevel:
    N: float

    def __post_init__(self):
        N = float(self.N)
        if not N > 0:
            raise InvalidInputError(f"truncation level must be positive, got {self.N}")
        object.__setattr__(self, "N", N)


def as_level(level):
    """Accept a TruncationLevel or a bare number."""
    if isinstance(level, TruncationLevel):
        return level
    return TruncationLevel(level)


@dataclass(frozen=True)
class ConditionReport:
    condition_name: str
    satisfied_on_sample: bool
    witness_constant: float
    violation_point: Optional[tuple] = None
    box_halfwidth: float = 0.0
    n_samples: int = 0
    seed: int = 0
    details: dict = field(default_factory=dict)

    @property
    def sample_spec(self):
        return {"box_halfwidth": self.box_halfwidth, "n_samples": self.n_samples, "seed": self.seed}


# ---------------------------------------------------------------------------
# Truncation
# ---------------------------------------------------------------------------

def clip_vector(x, level):
    """Component-wise clipping: ``x^i`` if ``|x^i| <= N`` else ``N * sign(x^i)``."""
    N = as_level(level).N
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("clip_vector: non-finite input")
    return np.clip(x, -N, N)


def truncate_coefficients(p: Problem, level) -> Problem:
    """Return the problem with drift, diffusion entries and initial point clipped at level N.

    Wherever every drift component and diffusion entry is already within
    ``[-N, N]`` the clipped coefficients are bit-identical to the originals.
    """
    N = as_level(level).N
    b, sigma = p.b.func, p.sigma.func

    def b_N(y):
        return np.clip(b(y), -N, N)

    def sigma_N(y):
        return np.clip(sigma(y), -N, N)

    return Problem(
        b=VectorField(b_N, p.dim_r),
        sigma=DiffusionField(sigma_N, p.dim_r, p.dim_l),
        x0=clip_vector(p.x0, N),
        horizon_T=p.horizon_T,
        label=f"{p.label} [N={N:g}]",
    )


# ---------------------------------------------------------------------------
# Sampled condition checks
# ---------------------------------------------------------------------------

def _sample_box(rng, n, r, halfwidth):
    return rng.uniform(-halfwidth, halfwidth, size=(n, r))


def dissipativity_margin(p: Problem, K, y):
    """``<y, b(y)> + sum sigma^2 - K^2 (1 + |y|^2)``; positive means violated."""
    y = np.asarray(y, dtype=float)
    with np.errstate(all="ignore"):
        lhs = np.sum(y * p.b(y), axis=-1) + np.sum(p.sigma(y) ** 2, axis=(-2, -1))
        rhs = K * K * (1.0 + np.sum(y * y, axis=-1))
        return lhs - rhs


def difference_dissipativity_margin(p: Problem, K, y, z):
    """``<y - z, b(y) - b(z)> - K^2 (1 + |y - z|^2)``; positive means violated."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    with np.errstate(all="ignore"):
        d = y - z
        lhs = np.sum(d * (p.b(y) - p.b(z)), axis=-1)
        rhs = K * K * (1.0 + np.sum(d * d, axis=-1))
        return lhs - rhs


def _worst(margin):
    """Index of the worst violation, treating NaN and +inf margins as the worst of all."""
    bad = np.isnan(margin) | np.isposinf(margin)
    if bad.any():
        return int(np.flatnonzero(bad)[0])
    return int(np.argmax(margin))


def _validate_sampling(K, box_halfwidth, n_samples):
    if not (np.isfinite(K) and K >= 0):
        raise InvalidInputError(f"K must be nonnegative, got {K}")
    if not (np.isfinite(box_halfwidth) and box_halfwidth > 0):
        raise InvalidInputError(f"box_halfwidth must be positive, got {box_halfwidth}")
    if int(n_samples) < 1:
        raise InvalidInputError(f"n_samples must be >= 1, got {n_samples}")


def check_dissipativity(p: Problem, K, box_halfwidth=10.0, n_samples=1000, seed=0) -> ConditionReport:
    """Look for a point in the sup-norm box where the dissipativity bound fails.

    A ``True`` result only means no violation was found among the samples.
    """
    _validate_sampling(K, box_halfwidth, n_samples)
    rng = np.random.default_rng(seed)
    ys = _sample_box(rng, int(n_samples), p.dim_r, box_halfwidth)
    margin = dissipativity_margin(p, K, ys)
    violated = ~(margin <= 0)
    point = None
    if violated.any():
        point = (tuple(ys[_worst(np.where(violated, margin, -np.inf))]),)
    return ConditionReport(
        condition_name="dissipativity",
        satisfied_on_sample=not violated.any(),
        witness_constant=float(K),
        violation_point=point,
        box_halfwidth=float(box_halfwidth),
        n_samples=int(n_samples),
        seed=int(seed),
        details={"max_margin": float(np.max(np.where(np.isfinite(margin), margin, np.inf)))},
    )


def check_difference_dissipativity(p: Problem, K, box_halfwidth=10.0, n_samples=1000,
                                   seed=0) -> ConditionReport:
    """Sampled check of the one-sided bound on drift differences over pairs (y, z)."""
    _validate_sampling(K, box_halfwidth, n_samples)
    rng = np.random.default_rng(seed)
    ys = _sample_box(rng, int(n_samples), p.dim_r, box_halfwidth)
    zs = _sample_box(rng, int(n_samples), p.dim_r, box_halfwidth)
    margin = difference_dissipativity_margin(p, K, ys, zs)
    violated = ~(margin <= 0)
    point = None
    if violated.any():
        i = _worst(np.where(violated, margin, -np.inf))
        point = (tuple(ys[i]), tuple(zs[i]))
    return ConditionReport(
        condition_name="difference_dissipativity",
        satisfied_on_sample=not violated.any(),
        witness_constant=float(K),
        violation_point=point,
        box_halfwidth=float(box_halfwidth),
        n_samples=int(n_samples),
        seed=int(seed),
        details={"max_margin": float(np.max(np.where(np.isfinite(margin), margin, np.inf)))},
    )


def estimate_local_lipschitz(p: Problem, N, n_pairs=1000, seed=0) -> ConditionReport:
    """Empirical lower bound for the local Lipschitz constant on the box ``|y|_inf <= N``.

    Half the pairs are drawn independently over the box, the other half as
    close neighbours (offset of relative size 1e-4), which is what drives the
    estimate towards the supremum of the local derivative.  Points are drawn
    on the unit box and scaled by N, so boxes of different N see nested,
    scaled copies of the same sample.
    """
    N = as_level(N).N
    if int(n_pairs) < 1:
        raise InvalidInputError(f"n_pairs must be >= 1, got {n_pairs}")
    n = int(n_pairs)
    r = p.dim_r
    rng = np.random.default_rng(seed)
    y = _sample_box(rng, n, r, 1.0)
    z_far = _sample_box(rng, n, r, 1.0)
    z_near = np.clip(y + 1e-4 * rng.uniform(-1.0, 1.0, size=(n, r)), -1.0, 1.0)
    half = n // 2
    z = np.concatenate([z_far[:n - half], z_near[n - half:]])
    y, z = N * y, N * z

    with np.errstate(all="ignore"):
        dist = np.sqrt(np.sum((y - z) ** 2, axis=-1))
        num = (np.sum(np.abs(p.b(y) - p.b(z)), axis=-1)
               + np.sum(np.abs(p.sigma(y) - p.sigma(z)), axis=(-2, -1)))
    # coincident pairs are skipped rather than divided by
    keep = dist > 1e-12 * max(1.0, N)
    quotients = num[keep] / dist[keep]
    finite = quotients[np.isfinite(quotients)]
    estimate = float(finite.max()) if finite.size else 0.0
    return ConditionReport(
        condition_name="local_lipschitz",
        satisfied_on_sample=True,
        witness_constant=estimate,
        box_halfwidth=N,
        n_samples=n,
        seed=int(seed),
        details={"pairs_used": int(keep.sum())},
    )


# ---------------------------------------------------------------------------
# Built-in problems
# ---------------------------------------------------------------------------

def _identity_diffusion(r):
    eye = np.eye(r)

    def sigma(y):
        y = np.asarray(y)
        return np.broadcast_to(eye, y.shape[:-1] + (r, r))

    return DiffusionField(sigma, r, r)


def _default_x0(r, x0):
    return np.ones(r) if x0 is None else x0


def ou_problem(dim=1, x0=None, T=1.0) -> Problem:
    """Linear Ornstein-Uhlenbeck problem ``b(y) = -y``, ``sigma = I``."""
    return Problem(VectorField(lambda y: -np.asarray(y), dim), _identity_diffusion(dim),
                   _default_x0(dim, x0), T, label="ou")


def cubic_problem(dim=1, x0=None, T=1.0) -> Problem:
    """Dissipative cubic drift ``b(y) = -y**3`` (component-wise), ``sigma = I``."""
    def b(y):
        y = np.asarray(y)
        return -(y * y * y)

    return Problem(VectorField(b, dim), _identity_diffusion(dim), _default_x0(dim, x0), T,
                   label="cubic")


def constant_problem(dim=1, x0=None, T=1.0, drift=0.0, noise=1.0) -> Problem:
    """Constant coefficients: ``b = drift`` in every component, ``sigma = noise * I``.

    The defaults give the pure-noise problem ``X_t = x0 + eps * W_t``.
    """
    drift_vec = np.full(dim, float(drift))
    noise_mat = float(noise) * np.eye(dim)

    def b(y):
        y = np.asarray(y)
        return np.broadcast_to(drift_vec, y.shape).copy()

    def sigma(y):
        y = np.asarray(y)
        return np.broadcast_to(noise_mat, y.shape[:-1] + (dim, dim))

    return Problem(VectorField(b, dim), DiffusionField(sigma, dim, dim), _default_x0(dim, x0), T,
                   label="const")


def polynomial_problem(drift, diffusion, x0=None, T=1.0) -> Problem:
    """Component-wise scalar polynomial coefficients.

    ``drift[i]`` lists ascending coefficients of ``b^i`` as a polynomial in
    ``y^i``; ``diffusion[i]`` does the same for the diagonal entry
    ``sigma^i_i`` (off-diagonal entries are zero, so ``l == r``).
    """
    drift = [np.asarray(c, dtype=float) for c in drift]
    diffusion = [np.asarray(c, dtype=float) for c in diffusion]
    r = len(drift)
    if r == 0 or len(diffusion) != r:
        raise InvalidInputError(
            f"need one drift and one diffusion polynomial per component, got {len(drift)} and "
            f"{len(diffusion)}")
    for c in drift + diffusion:
        if c.ndim != 1 or c.size == 0 or not np.all(np.isfinite(c)):
            raise InvalidInputError("polynomial coefficients must be non-empty finite lists")
    polyval = np.polynomial.polynomial.polyval

    def b(y):
        y = np.asarray(y, dtype=float)
        return np.stack([polyval(y[..., i], drift[i]) for i in range(r)], axis=-1)

    def sigma(y):
        y = np.asarray(y, dtype=float)
        out = np.zeros(y.shape[:-1] + (r, r))
        for i in range(r):
            out[..., i, i] = polyval(y[..., i], diffusion[i])
        return out

    return Problem(VectorField(b, r), DiffusionField(sigma, r, r), _default_x0(r, x0), T,
                   label="polynomial")


BUILTIN_PROBLEMS = {
    "ou": ou_problem,
    "cubic": cubic_problem,
    "const": constant_problem,
}


def builtin_problem(name, dim=1, x0=None, T=1.0) -> Problem:
    try:
        factory = BUILTIN_PROBLEMS[name]
    except KeyError:
        raise InvalidInputError(
            f"unknown problem {name!r}; choose from {sorted(BUILTIN_PROBLEMS)}") from None
    return factory(dim=dim, x0=x0, T=T)
