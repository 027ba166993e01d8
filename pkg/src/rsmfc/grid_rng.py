"""Uniform time grids, path containers and counter-based Gaussian increments.

The Gaussian draw for ``(master_seed, path, step)`` is the Box-Muller transform
of one Philox4x32-10 block with counter ``(step, path)`` and key ``master_seed``.
Any draw is therefore addressable without generating its predecessors, and
splitting the path range across workers cannot change a single value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from .errors import InvalidArgumentError

_U64 = 1 << 64


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k * t_end / n_steps`` on ``[0, t_end]``."""

    t_end: float
    n_steps: int

    def __post_init__(self):
        if not (isinstance(self.n_steps, (int, np.integer)) and self.n_steps >= 1):
            raise InvalidArgumentError(f"n_steps must be a positive integer, got {self.n_steps!r}")
        if not (math.isfinite(self.t_end) and self.t_end > 0):
            raise InvalidArgumentError(f"t_end must be positive and finite, got {self.t_end!r}")
        object.__setattr__(self, "t_end", float(self.t_end))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return self.t_end / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    def node(self, k: int) -> float:
        if k == self.n_steps:
            return self.t_end
        return k * self.t_end / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.t_end / self.n_steps
        t[-1] = self.t_end
        return t

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t_end, self.n_steps * int(factor))

    def coarsen(self, factor: int) -> "TimeGrid":
        if self.n_steps % factor:
            raise InvalidArgumentError(f"{factor} does not divide n_steps={self.n_steps}")
        return TimeGrid(self.t_end, self.n_steps // factor)

    def index_of(self, t: float) -> int:
        """Nearest node index to time ``t``."""
        return int(round(t / self.t_end * self.n_steps))


def make_grid(t_end: float, n_steps: int) -> TimeGrid:
    return TimeGrid(t_end, n_steps)


@dataclass(frozen=True, eq=False)
class ScalarPath:
    """Values of one scalar process on a grid.

    ``blow_up_index`` marks the first node that is no longer finite; every
    value before it is finite and every value from it on is NaN.
    """

    grid: TimeGrid
    values: np.ndarray
    blow_up_index: int | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.n_nodes,):
            raise InvalidArgumentError(
                f"path has {v.shape} values, grid needs ({self.grid.n_nodes},)"
            )
        stop = self.grid.n_nodes if self.blow_up_index is None else self.blow_up_index
        if not np.all(np.isfinite(v[:stop])):
            raise InvalidArgumentError("non-finite value before the blow-up marker")
        object.__setattr__(self, "values", v)

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes

    @property
    def blew_up(self) -> bool:
        return self.blow_up_index is not None

    def finite_part(self) -> tuple[np.ndarray, np.ndarray]:
        stop = self.grid.n_nodes if self.blow_up_index is None else self.blow_up_index
        return self.grid.nodes[:stop], self.values[:stop]

    @classmethod
    def from_values(cls, grid: TimeGrid, values) -> "ScalarPath":
        """Wrap ``values``, placing the blow-up marker at the first non-finite entry."""
        v = np.asarray(values, dtype=np.float64)
        bad = np.flatnonzero(~np.isfinite(v))
        if bad.size == 0:
            return cls(grid, v)
        k = int(bad[0])
        v = v.copy()
        v[k:] = np.nan
        return cls(grid, v, blow_up_index=k)


def _check_u64(name, value):
    if not (isinstance(value, (int, np.integer)) and 0 <= int(value) < _U64):
        raise InvalidArgumentError(f"{name} must be an integer in [0, 2**64), got {value!r}")
    return int(value)


@dataclass(frozen=True)
class RngStream:
    """Gaussian stream of one path: draws are keyed by ``(master_seed, path_index, step)``."""

    master_seed: int
    path_index: int

    def __post_init__(self):
        _check_u64("master_seed", self.master_seed)
        _check_u64("path_index", self.path_index)

    def standard_normal(self, step: int) -> float:
        step = _check_u64("step", step)
        return float(kernels.normals(self.master_seed, self.path_index, 1, step, 1)[0, 0])


def gaussian_increment(stream: RngStream, step: int, dt: float) -> float:
    """One N(0, dt) draw, a pure function of the stream key and ``step``."""
    if not dt > 0:
        raise InvalidArgumentError(f"dt must be positive, got {dt!r}")
    return math.sqrt(dt) * stream.standard_normal(step)


def standard_normals(seed: int, n_paths: int, n_steps: int, *, path_offset: int = 0,
                     step_offset: int = 0, threads: int = 1) -> np.ndarray:
    """Block ``z[i, k]`` of the streams ``path_offset + i`` at steps ``step_offset + k``."""
    _check_u64("seed", seed)
    return kernels.normals(seed, path_offset, n_paths, step_offset, n_steps, threads)


def brownian_increments(seed: int, n_paths: int, grid: TimeGrid, *, substeps: int = 1,
                        path_offset: int = 0, threads: int = 1) -> np.ndarray:
    """Increments ``dB[i, k]`` over the steps of ``grid``.

    With ``substeps = r`` each increment is the sum of the ``r`` draws of the
    grid refined ``r`` times, so a coarse and a fine simulation built from the
    same seed share one Brownian path (common random numbers across ``dt``).
    """
    _check_u64("seed", seed)
    if substeps < 1:
        raise InvalidArgumentError("substeps must be >= 1")
    sqrt_dtf = math.sqrt(grid.dt / substeps)
    return kernels.brownian_block(seed, path_offset, n_paths, 0, grid.n_steps, substeps,
                                  sqrt_dtf, threads)
