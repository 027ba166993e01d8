"""Particle Euler-Maruyama for the controlled mean-field SDE and its exponential martingales.

Every particle at step k sees the same ensemble mean ``m_hat(t_k)`` (explicit
coupling). Means are taken over the finite paths only, with numpy's pairwise
summation over a contiguous array, so the reduction order is fixed.

Linear feedback laws on an LQ coefficient set run through the compiled
closed-loop kernel; everything else goes through a vectorized numpy loop that
calls the coefficient and control evaluators once per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import logsumexp

from ._backend import kernels
from .errors import BlowUpError, EnsembleBlowUpError, EvaluationError, InvalidArgumentError
from .grid_rng import ScalarPath, TimeGrid, brownian_increments
from .lq_model import CoefficientSet
from .riccati import RiccatiSolution

BLOW_UP_THRESHOLD = 1e10


def _finite_mean(values: np.ndarray) -> float:
    v = np.ascontiguousarray(values[np.isfinite(values)])
    if v.size == 0:
        return math.nan
    return float(np.sum(v) / v.size)


# -- control laws ---------------------------------------------------------


class ControlLaw:
    """Base class: ``evaluate`` returns the control of every particle at node ``k``."""

    def evaluate(self, k: int, t: float, x: np.ndarray, m: float, log_tilt: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Feedback(ControlLaw):
    """``u = fn(t, x, m)`` with ``m`` the ensemble mean."""

    fn: Callable

    def evaluate(self, k, t, x, m, log_tilt):
        return np.broadcast_to(np.asarray(self.fn(t, x, m), dtype=np.float64), x.shape)


@dataclass(frozen=True)
class OpenLoop(ControlLaw):
    """Deterministic control ``u = fn(t)`` shared by all particles."""

    fn: Callable

    def evaluate(self, k, t, x, m, log_tilt):
        return np.full(x.shape, float(self.fn(t)))


@dataclass(frozen=True)
class LinearFeedback(ControlLaw):
    """``u = gain[k] x + shift[k] / L(t_k)``, tabulated on the simulation nodes.

    ``shift`` needs the per-path exponential martingale, so simulations using
    it must be given a :class:`Tilt`.
    """

    gain: np.ndarray
    shift: np.ndarray | None = None

    def evaluate(self, k, t, x, m, log_tilt):
        u = self.gain[k] * x
        if self.shift is not None:
            u = u + self.shift[k] * np.exp(-log_tilt)
        return u


@dataclass(frozen=True)
class Perturbed(ControlLaw):
    """``base`` shifted by a constant."""

    base: ControlLaw
    offset: float

    def evaluate(self, k, t, x, m, log_tilt):
        return self.base.evaluate(k, t, x, m, log_tilt) + self.offset


@dataclass(frozen=True)
class Tilt:
    """Exponential martingale driver: ``log L`` is accumulated from ``theta * gamma[k] * x``."""

    gamma: np.ndarray
    theta: float


# -- ensemble -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Simulated particles.

    ``states``, ``controls`` and ``log_tilt`` are ``(n_paths, grid.n_nodes)``
    arrays recorded on ``grid``; with ``record_every > 1`` that grid is
    coarser than ``sim_grid`` and the increments are not kept. ``blow_index``
    holds, per path, the first simulation step whose state left the finite
    region (``-1`` if none).
    """

    grid: TimeGrid
    sim_grid: TimeGrid
    states: np.ndarray
    controls: np.ndarray
    empirical_mean: ScalarPath
    blow_index: np.ndarray
    seed: int
    increments: np.ndarray | None = None
    log_tilt: np.ndarray | None = None
    substeps: int = 1
    record_every: int = 1
    info: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def blow_up(self) -> tuple[int, np.ndarray] | None:
        """``(first blow-up step, indices of blown paths)`` or ``None``."""
        blown = np.flatnonzero(self.blow_index >= 0)
        if blown.size == 0:
            return None
        return int(self.blow_index[blown].min()), blown

    def path(self, i: int) -> ScalarPath:
        return ScalarPath.from_values(self.grid, self.states[i])

    def control_path(self, i: int) -> ScalarPath:
        return ScalarPath.from_values(self.grid, self.controls[i])

    def require_increments(self) -> np.ndarray:
        if self.increments is None:
            raise InvalidArgumentError(
                "ensemble was simulated without stored increments (record_every > 1)"
            )
        return self.increments


def _mean_path(grid: TimeGrid, states: np.ndarray) -> ScalarPath:
    return ScalarPath.from_values(grid, [_finite_mean(states[:, k]) for k in range(states.shape[1])])


def empirical_mean_function(ensemble: Ensemble) -> ScalarPath:
    """Recompute ``m_hat`` from the stored states."""
    return _mean_path(ensemble.grid, ensemble.states)


def _unwrap_linear(control: ControlLaw):
    offset = None
    if isinstance(control, Perturbed) and isinstance(control.base, LinearFeedback):
        offset, control = control.offset, control.base
    if isinstance(control, LinearFeedback):
        return control, offset
    return None, None


def _fast_path(coeffs, lin, offset, x0, grid, n_paths, seed, tilt, increments, substeps,
               record_every, store, threads):
    p = coeffs.lq
    n = grid.n_nodes
    gain = np.ascontiguousarray(lin.gain, dtype=np.float64)
    if gain.shape != (n,):
        raise InvalidArgumentError(f"gain has shape {gain.shape}, grid needs ({n},)")
    shift = None if lin.shift is None else np.ascontiguousarray(lin.shift, dtype=np.float64)
    off = None if offset is None else np.full(n, float(offset))
    gamma = None if tilt is None else np.ascontiguousarray(tilt.gamma, dtype=np.float64)
    theta = 0.0 if tilt is None else float(tilt.theta)
    return kernels.lq_closed_loop(
        float(x0), p.a, p.b, p.sigma, grid.dt, grid.n_steps, gain, shift, off, gamma, theta,
        seed, 0, n_paths, substeps, increments, record_every, BLOW_UP_THRESHOLD, store, threads,
    )


def _generic_path(coeffs, control, x0, grid, n_paths, seed, tilt, increments, substeps,
                  record_every, store, threads):
    n_steps, dt, t = grid.n_steps, grid.dt, grid.nodes
    n_rec = n_steps // record_every + 1
    states = np.full((n_paths, n_rec), np.nan)
    controls = np.full((n_paths, n_rec), np.nan)
    log_tilt = np.full((n_paths, n_rec), np.nan) if tilt is not None else None
    dB_out = np.empty((n_paths, n_steps)) if store else None
    blow = np.full(n_paths, -1, dtype=np.int64)
    if increments is None:
        increments = brownian_increments(seed, n_paths, grid, substeps=substeps, threads=threads)

    x = np.full(n_paths, float(x0))
    lg = np.zeros(n_paths)
    alive = np.ones(n_paths, dtype=bool)
    for k in range(n_steps + 1):
        m = _finite_mean(x)
        try:
            u = np.asarray(control.evaluate(k, t[k], x, m, lg), dtype=np.float64)
        except BlowUpError:
            u = np.full(n_paths, np.nan)
        if k % record_every == 0:
            r = k // record_every
            states[alive, r] = x[alive]
            controls[alive, r] = u[alive]
            if log_tilt is not None:
                log_tilt[alive, r] = lg[alive]
        if k == n_steps:
            break
        dB = increments[:, k]
        if dB_out is not None:
            dB_out[:, k] = dB
        if tilt is not None:
            ell = tilt.gamma[k] * x
            lg = lg + tilt.theta * ell * dB - 0.5 * tilt.theta * tilt.theta * ell * ell * dt
        try:
            drift = coeffs.b(t[k], x, m, u)
            diff = coeffs.sigma(t[k], x, m, u)
        except (BlowUpError, FloatingPointError) as exc:
            raise EvaluationError(f"coefficient evaluation failed at t={t[k]}: {exc}") from exc
        x = x + drift * dt + diff * dB
        bad = alive & (~np.isfinite(x) | (np.abs(x) > BLOW_UP_THRESHOLD))
        if bad.any():
            blow[bad] = k + 1
            alive &= ~bad
            x[bad] = np.nan
            lg[bad] = np.nan
            if not alive.any() and not store:
                break
    return states, controls, log_tilt, dB_out, blow


def simulate_state(coeffs: CoefficientSet, control: ControlLaw, x0: float, grid: TimeGrid,
                   n_paths: int, seed: int, *, tilt: Tilt | None = None,
                   increments: np.ndarray | None = None, substeps: int = 1,
                   record_every: int = 1, threads: int = 1) -> Ensemble:
    """Euler-Maruyama particle simulation of ``dx = b dt + sigma dB``.

    ``increments`` replaces the generated Brownian increments (shape
    ``(n_paths, n_steps)``). ``substeps`` draws each increment as the sum of
    that many fine-grid draws so that runs on nested grids share noise.
    Paths crossing ``|x| > 1e10`` are frozen to NaN; if every path does,
    :class:`EnsembleBlowUpError` is raised with the partial ensemble attached.
    """
    if not (isinstance(n_paths, (int, np.integer)) and n_paths >= 1):
        raise InvalidArgumentError(f"n_paths must be a positive integer, got {n_paths!r}")
    if record_every < 1 or grid.n_steps % record_every:
        raise InvalidArgumentError(f"record_every={record_every} must divide n_steps={grid.n_steps}")
    if substeps < 1:
        raise InvalidArgumentError("substeps must be >= 1")
    if increments is not None:
        increments = np.ascontiguousarray(increments, dtype=np.float64)
        if increments.shape != (n_paths, grid.n_steps):
            raise InvalidArgumentError(
                f"increments have shape {increments.shape}, expected {(n_paths, grid.n_steps)}"
            )
    if tilt is not None and np.shape(tilt.gamma) != (grid.n_nodes,):
        raise InvalidArgumentError("tilt.gamma must be tabulated on the grid nodes")
    store = record_every == 1
    lin, offset = _unwrap_linear(control)
    if lin is not None and lin.shift is not None and tilt is None:
        raise InvalidArgumentError("a feedback with a 1/L shift needs a tilt")
    if coeffs.lq is not None and lin is not None:
        out = _fast_path(coeffs, lin, offset, x0, grid, n_paths, seed, tilt, increments,
                         substeps, record_every, store, threads)
    else:
        out = _generic_path(coeffs, control, x0, grid, n_paths, seed, tilt, increments,
                            substeps, record_every, store, threads)
    states, controls, log_tilt, dB, blow = out
    rec_grid = grid if record_every == 1 else grid.coarsen(record_every)
    ens = Ensemble(
        grid=rec_grid, sim_grid=grid, states=states, controls=controls,
        empirical_mean=_mean_path(rec_grid, states), blow_index=blow, seed=seed,
        increments=dB, log_tilt=log_tilt, substeps=substeps, record_every=record_every,
    )
    if np.all(blow >= 0):
        k = int(blow.min())
        raise EnsembleBlowUpError(
            f"all {n_paths} paths blew up; first crossing at step {k} (t={grid.node(k)})",
            t=grid.node(k), last_finite=k - 1, partial=ens,
        )
    return ens


# -- martingales ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MartingalePanel:
    """Per-path ``ell``, ``log L^theta`` and ``log v^theta`` on the ensemble grid.

    ``log_v0`` is the ensemble estimate of ``log E[exp(theta Psi_T)]``.
    """

    grid: TimeGrid
    ell: np.ndarray
    log_l: np.ndarray
    log_v: np.ndarray
    log_v0: float
    theta: float

    @property
    def l_theta(self) -> np.ndarray:
        return np.exp(self.log_l)

    @property
    def v_theta(self) -> np.ndarray:
        return np.exp(self.log_v)

    def l_path(self, i: int) -> ScalarPath:
        return ScalarPath.from_values(self.grid, self.l_theta[i])

    def v_path(self, i: int) -> ScalarPath:
        return ScalarPath.from_values(self.grid, self.v_theta[i])

    def ell_path(self, i: int) -> ScalarPath:
        return ScalarPath.from_values(self.grid, self.ell[i])


def path_costs(coeffs: CoefficientSet, ensemble: Ensemble) -> np.ndarray:
    """``Psi_T`` per path: trapezoidal running cost plus ``h(x_T, m_hat(T))``; NaN if blown."""
    t = ensemble.grid.nodes
    m = ensemble.empirical_mean.values
    x, u = ensemble.states, ensemble.controls
    f = np.empty_like(x)
    for k in range(ensemble.grid.n_nodes):
        f[:, k] = coeffs.f(t[k], x[:, k], m[k], u[:, k])
    running = trapezoid(f, dx=ensemble.grid.dt, axis=1)
    return running + np.asarray(coeffs.h(x[:, -1], m[-1]), dtype=np.float64)


def log_mean_exp(values: np.ndarray) -> float:
    """``log mean exp(values)`` over the finite entries."""
    v = values[np.isfinite(values)]
    if v.size == 0:
        return math.nan
    return float(logsumexp(v) - math.log(v.size))


def _tabulate(gamma, grid: TimeGrid) -> np.ndarray:
    if callable(gamma):
        return np.broadcast_to(np.asarray(gamma(grid.nodes), dtype=np.float64), (grid.n_nodes,))
    g = np.asarray(gamma, dtype=np.float64)
    if g.ndim == 0:
        return np.full(grid.n_nodes, float(g))
    if g.shape != (grid.n_nodes,):
        raise InvalidArgumentError(f"gamma has shape {g.shape}, grid needs ({grid.n_nodes},)")
    return g


def simulate_martingales(coeffs: CoefficientSet, ensemble: Ensemble, gamma, theta: float, *,
                         ell: Callable | None = None) -> MartingalePanel:
    """Exponential martingale ``L^theta`` and ``v^theta = v_hat0 L^theta`` along the ensemble.

    ``ell_i(t_k) = gamma(t_k) x_i(t_k)`` unless ``ell(t, x)`` is given, and
    ``log L`` takes the exact log-Euler step
    ``log L += theta ell dB - theta^2 ell^2 dt / 2``.
    """
    grid = ensemble.grid
    dB = ensemble.require_increments()
    t, dt, x = grid.nodes, grid.dt, ensemble.states
    with np.errstate(invalid="ignore", over="ignore"):
        if ell is None:
            ell_v = _tabulate(gamma, grid)[None, :] * x
        else:
            ell_v = np.empty_like(x)
            for k in range(grid.n_nodes):
                ell_v[:, k] = ell(t[k], x[:, k])
        te = theta * ell_v
    live = np.isfinite(x)
    if not np.all(np.isfinite(te[live])):
        raise EvaluationError("theta * ell is not finite on a live path")
    log_l = np.empty_like(x)
    lg = np.zeros(x.shape[0])
    log_l[:, 0] = lg
    for k in range(grid.n_steps):
        e = ell_v[:, k]
        lg = lg + theta * e * dB[:, k] - 0.5 * theta * theta * e * e * dt
        log_l[:, k + 1] = lg
    log_l[~live] = np.nan
    log_v0 = log_mean_exp(theta * path_costs(coeffs, ensemble))
    return MartingalePanel(grid, ell_v, log_l, log_v0 + log_l, log_v0, float(theta))


# -- LQ helpers -----------------------------------------------------------


def lq_optimal_control(ricc: RiccatiSolution, grid: TimeGrid) -> LinearFeedback:
    """``u = b p = -b beta x - b mu alpha / L`` tabulated on ``grid`` (NaN past blow-up)."""
    p = ricc.params
    gain = -p.b * np.asarray(ricc.beta_or_nan(grid.nodes), dtype=np.float64)
    shift = None
    if p.mu != 0.0:
        shift = -p.b * p.mu * ricc.alpha_on_grid(grid)
    return LinearFeedback(gain, shift)


def lq_tilt(ricc: RiccatiSolution, grid: TimeGrid) -> Tilt:
    gamma = np.asarray(ricc.gamma_or_nan(grid.nodes), dtype=np.float64)
    return Tilt(np.broadcast_to(gamma, (grid.n_nodes,)).copy(), ricc.params.theta)
