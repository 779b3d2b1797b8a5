"""Time grids and reproducible Brownian increments.

Every path draws its noise from its own counter-based stream, so results do
not depend on how paths are distributed over workers.  The algorithm is
fixed and documented here bit-exactly; it uses only 64-bit integer
arithmetic plus ``log``/``sqrt``/``cos``/``sin`` and does not depend on the
stream layout of any numpy bit generator.

Mixing function (SplitMix64 finaliser), all arithmetic mod 2**64::

    GAMMA = 0x9E3779B97F4A7C15
    mix(z):  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
             z = (z ^ (z >> 27)) * 0x94D049BB133111EB
             return z ^ (z >> 31)

Path seed::

    h = mix(master_seed + GAMMA)
    h = mix((h ^ (path_index * GAMMA)) + GAMMA)
    path_seed = mix((h ^ (stream_tag * 0xD1B54A32D192ED03)) + GAMMA)

For a fixed master seed and tag the map ``path_index -> path_seed`` is a
bijection on 64-bit integers (composition of bijections), so distinct path
indices never collide.

Uniform stream: the k-th output (k = 1, 2, ...) is the SplitMix64 sequence
started at ``path_seed``, ``u_k = ((mix(path_seed + k * GAMMA) >> 11) + 1) * 2**-53``,
which lies in (0, 1].

Gaussians: Box-Muller on consecutive pairs ``(u_{2j+1}, u_{2j+2})``::

    rad = sqrt(-2 log u_{2j+1});  ang = 2 pi u_{2j+2}
    z_{2j} = rad * cos(ang);  z_{2j+1} = rad * sin(ang)

The ``n_steps * l`` normals fill the increment matrix in row-major order
(time step major, noise column minor) and are scaled by ``sqrt(dt)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "TimeGrid",
    "BrownianIncrements",
    "derive_path_seed",
    "derive_path_seeds",
    "sample_increments",
    "sample_increments_batch",
]

_MASK = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_TAG_MULT = 0xD1B54A32D192ED03

_U = np.uint64


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on ``[0, T]`` with ``n_steps`` steps."""

    T: float
    n_steps: int

    def __post_init__(self):
        T = float(self.T)
        if not (np.isfinite(T) and T > 0):
            raise InvalidInputError(f"grid horizon must be positive and finite, got {self.T}")
        if int(self.n_steps) != self.n_steps or int(self.n_steps) < 1:
            raise InvalidInputError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @classmethod
    def from_dt(cls, T, dt):
        """Grid with step ``dt``; ``T / dt`` must be (numerically) an integer."""
        if not (np.isfinite(dt) and dt > 0):
            raise InvalidInputError(f"dt must be positive, got {dt}")
        n = int(round(T / dt))
        if n < 1 or abs(n * dt - T) > 1e-9 * max(1.0, abs(T)):
            raise InvalidInputError(f"t={T} is not an integer multiple of dt={dt}")
        return cls(T, n)

    @property
    def t0(self):
        return 0.0

    @property
    def dt(self):
        return self.T / self.n_steps

    @property
    def times(self):
        return np.arange(self.n_steps + 1) * self.dt

    def prefix(self, t):
        """Sub-grid ``[0, t]`` sharing this grid's step; ``t`` must be a grid point."""
        k = int(round(t / self.dt))
        if k < 1 or k > self.n_steps or abs(k * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise InvalidInputError(f"t={t} is not a positive grid point of {self}")
        return TimeGrid(k * self.dt, k)


@dataclass(frozen=True)
class BrownianIncrements:
    grid: TimeGrid
    dW: np.ndarray
    path_seed: int

    @property
    def dim_l(self):
        return self.dW.shape[1]


def _mix_int(z):
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def _mix_array(z):
    z = (z ^ (z >> _U(30))) * _U(_M1)
    z = (z ^ (z >> _U(27))) * _U(_M2)
    return z ^ (z >> _U(31))


def derive_path_seed(master_seed, path_index, stream_tag=0):
    """64-bit seed for one path; pure function of its three arguments."""
    h = _mix_int((int(master_seed) + GAMMA) & _MASK)
    h = _mix_int(((h ^ ((int(path_index) * GAMMA) & _MASK)) + GAMMA) & _MASK)
    return _mix_int(((h ^ ((int(stream_tag) * _TAG_MULT) & _MASK)) + GAMMA) & _MASK)


def derive_path_seeds(master_seed, path_indices, stream_tag=0):
    """Vectorised :func:`derive_path_seed` returning a ``uint64`` array."""
    idx = np.asarray(path_indices, dtype=np.int64).astype(np.uint64)
    h = _U(_mix_int((int(master_seed) + GAMMA) & _MASK))
    tag = _U((int(stream_tag) * _TAG_MULT) & _MASK)
    h = _mix_array((h ^ (idx * _U(GAMMA))) + _U(GAMMA))
    return _mix_array((h ^ tag) + _U(GAMMA))


def _standard_normals(seeds, m):
    """``(len(seeds), m)`` standard normals, one counter stream per seed."""
    pairs = (m + 1) // 2
    counters = np.arange(1, 2 * pairs + 1, dtype=np.uint64) * _U(GAMMA)
    bits = _mix_array(seeds[:, None] + counters[None, :])
    u = ((bits >> _U(11)).astype(np.float64) + 1.0) * (2.0 ** -53)
    rad = np.sqrt(-2.0 * np.log(u[:, 0::2]))
    ang = (2.0 * np.pi) * u[:, 1::2]
    out = np.empty((seeds.shape[0], 2 * pairs))
    out[:, 0::2] = rad * np.cos(ang)
    out[:, 1::2] = rad * np.sin(ang)
    return out[:, :m]


def sample_increments_batch(grid: TimeGrid, l, path_seeds):
    """Increments for many paths at once, shape ``(n_paths, n_steps, l)``.

    Row ``p`` equals ``sample_increments(grid, l, path_seeds[p]).dW`` bit for bit.
    """
    l = int(l)
    if l < 1:
        raise InvalidInputError(f"noise dimension l must be >= 1, got {l}")
    seeds = np.atleast_1d(np.asarray(path_seeds, dtype=np.uint64))
    z = _standard_normals(seeds, grid.n_steps * l)
    return (z * np.sqrt(grid.dt)).reshape(seeds.shape[0], grid.n_steps, l)


def sample_increments(grid: TimeGrid, l, path_seed) -> BrownianIncrements:
    dW = sample_increments_batch(grid, l, [int(path_seed) & _MASK])[0]
    dW.setflags(write=False)
    return BrownianIncrements(grid, dW, int(path_seed) & _MASK)
