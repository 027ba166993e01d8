"""First- and second-order adjoint processes of the LQ example and BSDE residual checks.

The closed-form adjoints are plugged into the discretized backward equations
rather than solved for. Residuals are reported in integrated form: the per-step
residuals ``R_{i,k}`` are summed from ``t_0`` so that the martingale parts of
neighbouring steps cancel, which leaves an ``O(dt)`` quantity whose halving
ratio can be measured. Per-step statistics are reported alongside.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from .errors import InvalidArgumentError
from .grid_rng import ScalarPath, TimeGrid
from .lq_model import CoefficientSet, LqParams, lq_coefficients
from .mfsde_sim import Ensemble, MartingalePanel, _finite_mean, path_costs
from .riccati import RiccatiSolution, ode_oracle


class ResidualKind(enum.Enum):
    FIRST_ORDER = "first_order"
    SECOND_ORDER = "second_order"
    TERMINAL_FIRST_ORDER = "terminal_first_order"
    TERMINAL_MEAN_FIELD = "terminal_mean_field"
    QUADRATIC_BSDE = "quadratic_bsde"


@dataclass(frozen=True)
class ResidualReport:
    """Aggregated absolute residuals.

    ``mean_abs_residual`` and ``max_abs_residual`` refer to the integrated
    residual (or to the terminal identity for the terminal kinds);
    ``step_mean_abs`` and ``step_max_abs`` to the raw per-step residual.
    """

    mean_abs_residual: float
    max_abs_residual: float
    dt: float
    n_paths: int
    which_equation: ResidualKind
    step_mean_abs: float = math.nan
    step_max_abs: float = math.nan
    seed: int | None = None
    grid: TimeGrid | None = None
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class AdjointPanel:
    """Adjoint values on the ensemble grid.

    ``q`` is one row shared by all paths when it is deterministic, otherwise an
    ``(n_paths, n_nodes)`` array; :attr:`q_paths` always broadcasts.
    ``terminal_residual[i]`` is ``p_i(T) + h_x + E[phi h_y] / phi_i`` with
    ``phi_i = exp(theta Psi_T,i)`` estimated over the ensemble.
    """

    grid: TimeGrid
    p: np.ndarray
    q: np.ndarray
    ell: np.ndarray
    P_bar: ScalarPath
    Q_bar: ScalarPath
    terminal_residual: np.ndarray
    mean_field: bool = False

    @property
    def q_paths(self) -> np.ndarray:
        return np.broadcast_to(self.q, self.p.shape)

    def p_path(self, i: int) -> ScalarPath:
        return ScalarPath.from_values(self.grid, self.p[i])


def solve_second_order(params: LqParams, ricc: RiccatiSolution, grid: TimeGrid,
                       printed_sign: bool = False) -> tuple[ScalarPath, ScalarPath]:
    """``P_bar`` from ``P' = 2a P - theta q_bar^2``, ``P(T) = -1``, with ``q_bar = -sigma beta``.

    RK4 on ``grid``; ``Q_bar`` is identically zero. ``printed_sign`` flips the
    right-hand side to ``-2a P + theta q_bar^2``, whose ``theta = 0`` solution
    is ``-exp(2a (T - t))``.
    """
    if abs(grid.t_end - params.t_end) > 1e-12 * params.t_end:
        raise InvalidArgumentError("grid horizon differs from params.t_end")
    ricc.beta(grid.nodes)  # raises if beta blows up on the grid
    a, th, s2 = params.a, params.theta, params.sigma * params.sigma
    sign = -1.0 if printed_sign else 1.0

    def rhs(t, P):
        b = ricc.beta(min(max(t, 0.0), params.t_end))
        return sign * (2.0 * a * P - th * s2 * b * b)

    P = ode_oracle(rhs, -1.0, grid)
    return P, ScalarPath(grid, np.zeros(grid.n_nodes))


def _check_grids(ensemble: Ensemble, panel: MartingalePanel):
    if ensemble.grid != panel.grid:
        raise InvalidArgumentError("ensemble and martingale panel are on different grids")
    if panel.ell.shape != ensemble.states.shape:
        raise InvalidArgumentError("martingale panel does not match the ensemble size")


def build_lq_adjoint(params: LqParams, ricc: RiccatiSolution, ensemble: Ensemble,
                     panel: MartingalePanel, mean_field: bool | None = None) -> AdjointPanel:
    """Adjoints of the LQ example along ``ensemble``.

    Without the mean-field term ``p = -beta x`` and ``q = -sigma beta``. With
    it (default when ``mu != 0``) ``p = -beta x - mu alpha / L`` and
    ``q = mu theta gamma x alpha / L - sigma beta``.
    """
    _check_grids(ensemble, panel)
    grid = ensemble.grid
    if abs(grid.t_end - params.t_end) > 1e-12 * params.t_end or ricc.params != params:
        raise InvalidArgumentError("ensemble grid or Riccati solution does not match params")
    if mean_field is None:
        mean_field = params.mu != 0.0
    t = grid.nodes
    x = ensemble.states
    beta = np.asarray(ricc.beta(t), dtype=np.float64)
    gamma = np.broadcast_to(np.asarray(ricc.gamma(t), dtype=np.float64), t.shape)
    ell = gamma * x
    p = -beta * x
    q = -params.sigma * beta
    if mean_field:
        alpha = ricc.alpha_on_grid(grid, force=True)
        inv_l = np.exp(-panel.log_l)
        p = p - params.mu * alpha * inv_l
        q = params.mu * params.theta * gamma * x * alpha * inv_l - params.sigma * beta
    P_bar, Q_bar = solve_second_order(params, ricc, grid)

    psi = path_costs(lq_coefficients(params), ensemble)
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(panel.log_v0 - params.theta * psi)
    terminal = p[:, -1] + x[:, -1] + params.mu * ratio
    return AdjointPanel(grid, p, q, ell, P_bar, Q_bar, terminal, bool(mean_field))


def terminal_mean_field_residual(adjoint: AdjointPanel, ensemble: Ensemble, panel: MartingalePanel,
                                 mu: float) -> ResidualReport:
    """``|L(T) p(T) + L(T) x(T) + mu|`` per path."""
    l_T = panel.l_theta[:, -1]
    r = np.abs(l_T * adjoint.p[:, -1] + l_T * ensemble.states[:, -1] + mu)
    r = r[np.isfinite(r)]
    return ResidualReport(float(np.mean(r)), float(np.max(r)), ensemble.grid.dt, ensemble.n_paths,
                          ResidualKind.TERMINAL_MEAN_FIELD, seed=ensemble.seed, grid=ensemble.grid)


def terminal_first_order_residual(adjoint: AdjointPanel, ensemble: Ensemble) -> ResidualReport:
    r = np.abs(adjoint.terminal_residual)
    r = r[np.isfinite(r)]
    return ResidualReport(float(np.mean(r)), float(np.max(r)), ensemble.grid.dt, ensemble.n_paths,
                          ResidualKind.TERMINAL_FIRST_ORDER, seed=ensemble.seed, grid=ensemble.grid)


def _report(step: np.ndarray, kind, ensemble, **extra) -> ResidualReport:
    live = np.all(np.isfinite(step), axis=1)
    step = step[live]
    cum = np.cumsum(step, axis=1)
    return ResidualReport(
        mean_abs_residual=float(np.mean(np.abs(cum))),
        max_abs_residual=float(np.max(np.abs(cum))),
        dt=ensemble.grid.dt,
        n_paths=int(step.shape[0]),
        which_equation=kind,
        step_mean_abs=float(np.mean(np.abs(step))),
        step_max_abs=float(np.max(np.abs(step))),
        seed=ensemble.seed,
        grid=ensemble.grid,
        extra=extra,
    )


def _node_eval(fn, t, x, m, u):
    return np.broadcast_to(np.asarray(fn(t, x, m, u), dtype=np.float64), x.shape)


def first_order_residual(coeffs: CoefficientSet, adjoint: AdjointPanel, ensemble: Ensemble,
                         panel: MartingalePanel, theta: float) -> ResidualReport:
    """Residual of ``dp = -{H_x + E[v H_y] / v} dt + q (dB - theta ell dt)``.

    Per step ``R = dp + {H_x + E[v H_y] / v} dt + q (theta ell dt - dB)`` with
    every term at ``(t_k, x_i(t_k))``; the hat expectation is the ensemble mean.
    """
    _check_grids(ensemble, panel)
    dB = ensemble.require_increments()
    grid = ensemble.grid
    t, dt = grid.nodes, grid.dt
    x, u, m = ensemble.states, ensemble.controls, ensemble.empirical_mean.values
    p, q, ell, v = adjoint.p, adjoint.q_paths, panel.ell, panel.v_theta
    n = grid.n_steps
    R = np.empty((x.shape[0], n))
    for k in range(n):
        xk, uk, pk, qk, lk = x[:, k], u[:, k], p[:, k], q[:, k], ell[:, k]
        w = qk + theta * lk * pk
        hx = (_node_eval(coeffs.b_x, t[k], xk, m[k], uk) * pk
              + _node_eval(coeffs.sigma_x, t[k], xk, m[k], uk) * w
              - _node_eval(coeffs.f_x, t[k], xk, m[k], uk))
        hy = (_node_eval(coeffs.b_y, t[k], xk, m[k], uk) * pk
              + _node_eval(coeffs.sigma_y, t[k], xk, m[k], uk) * w
              - _node_eval(coeffs.f_y, t[k], xk, m[k], uk))
        mf = _finite_mean(v[:, k] * hy) / v[:, k]
        R[:, k] = (p[:, k + 1] - pk) + (hx + mf) * dt + qk * (theta * lk * dt - dB[:, k])
    return _report(R, ResidualKind.FIRST_ORDER, ensemble)


def running_cost_integral(coeffs: CoefficientSet, ensemble: Ensemble) -> tuple[np.ndarray, np.ndarray]:
    """``(f, int_0^t f ds)`` per path and node; the integral is the cumulative trapezoid."""
    t, dt = ensemble.grid.nodes, ensemble.grid.dt
    x, u, m = ensemble.states, ensemble.controls, ensemble.empirical_mean.values
    f = np.empty_like(x)
    for k in range(ensemble.grid.n_nodes):
        f[:, k] = coeffs.f(t[k], x[:, k], m[k], u[:, k])
    integral = np.zeros_like(f)
    integral[:, 1:] = np.cumsum(0.5 * (f[:, 1:] + f[:, :-1]) * dt, axis=1)
    return f, integral


def reconstruct_y(ensemble: Ensemble, panel: MartingalePanel, coeffs: CoefficientSet,
                  theta: float) -> np.ndarray:
    """``Y = log(v) / theta - int_0^t f ds`` per path and node."""
    if theta == 0:
        raise InvalidArgumentError("the logarithmic transform needs theta != 0")
    _check_grids(ensemble, panel)
    _, integral = running_cost_integral(coeffs, ensemble)
    return panel.log_v / theta - integral


def quadratic_bsde_check(ensemble: Ensemble, panel: MartingalePanel, coeffs: CoefficientSet,
                         theta: float) -> ResidualReport:
    """Residual of ``dY = -{f + theta ell^2 / 2} dt + ell dB`` and of ``Y_T = h``.

    The terminal mismatch ``|Y_i(T) - h(x_i(T), m_hat(T))|`` is returned in
    ``extra`` as ``terminal_mean_abs`` and ``terminal_max_abs``.
    """
    if theta == 0:
        raise InvalidArgumentError("the logarithmic transform needs theta != 0")
    _check_grids(ensemble, panel)
    dB = ensemble.require_increments()
    dt = ensemble.grid.dt
    f, integral = running_cost_integral(coeffs, ensemble)
    Y = panel.log_v / theta - integral
    ell = panel.ell
    R = (Y[:, 1:] - Y[:, :-1]) + (f[:, :-1] + 0.5 * theta * ell[:, :-1] ** 2) * dt - ell[:, :-1] * dB
    h = np.asarray(coeffs.h(ensemble.states[:, -1], ensemble.empirical_mean.values[-1]), dtype=np.float64)
    term = np.abs(Y[:, -1] - h)
    term = term[np.isfinite(term)]
    return _report(R, ResidualKind.QUADRATIC_BSDE, ensemble,
                   terminal_mean_abs=float(np.mean(term)), terminal_max_abs=float(np.max(term)))


def integrability_report(adjoint: AdjointPanel, panel: MartingalePanel) -> dict:
    """Ensemble averages of the square-integrability proxies of the adjoint processes."""
    dt = adjoint.grid.dt
    live = np.all(np.isfinite(adjoint.p), axis=1)
    q = adjoint.q_paths[live]
    return {
        "sup_p2": float(np.mean(np.max(adjoint.p[live] ** 2, axis=1))),
        "sup_v2": float(np.mean(np.max(panel.v_theta[live] ** 2, axis=1))),
        "int_q2": float(np.mean(trapezoid(q ** 2, dx=dt, axis=1))),
        "int_ell2": float(np.mean(trapezoid(panel.ell[live] ** 2, dx=dt, axis=1))),
        "sup_P2": float(np.max(adjoint.P_bar.values ** 2)),
        "int_Q2": float(trapezoid(adjoint.Q_bar.values ** 2, dx=dt)),
    }
