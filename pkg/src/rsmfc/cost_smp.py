"""Risk-sensitive costs, Hamiltonians and the maximum-principle checks.

All ``exp(theta Psi)`` averages are formed in the log domain. The standard
error of ``Psi_theta = log(mean exp(theta Psi)) / theta`` uses the delta
method: with normalized weights ``r_i = exp(theta Psi_i) / mean exp(theta Psi)``
it is ``std(r) / (sqrt(M) |theta|)``, which tends to ``std(Psi) / sqrt(M)``
as ``theta -> 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adjoint import AdjointPanel
from .errors import BlowUpError, InvalidArgumentError
from .grid_rng import TimeGrid
from .lq_model import CoefficientSet, LqParams
from .mfsde_sim import (ControlLaw, Ensemble, MartingalePanel, Tilt, log_mean_exp, path_costs,
                        simulate_state)

VI_PATH_CAP = 1000


def hamiltonian(coeffs: CoefficientSet, t, x, m, u, p, q):
    """``H = b p + sigma q - f``."""
    return coeffs.b(t, x, m, u) * p + coeffs.sigma(t, x, m, u) * q - coeffs.f(t, x, m, u)


def rs_hamiltonian(coeffs: CoefficientSet, t, x, m, u, p, q, ell, theta):
    """``H^theta = b p + sigma (q + theta ell p) - f``."""
    return (coeffs.b(t, x, m, u) * p + coeffs.sigma(t, x, m, u) * (q + theta * ell * p)
            - coeffs.f(t, x, m, u))


@dataclass(frozen=True)
class CostEstimate:
    j_theta: float
    psi_theta: float
    mean_psi_T: float
    var_psi_T: float
    std_error: float
    n_samples: int
    log_domain_value: float
    theta: float = 0.0


def cost_from_samples(psi: np.ndarray, theta: float) -> CostEstimate:
    """Aggregate per-path costs ``Psi_T`` into a :class:`CostEstimate`.

    ``var_psi_T`` is the plug-in (``ddof = 0``) variance. The exponent is
    centred at the sample mean, and small exponents go through
    ``expm1``/``log1p`` so that ``Psi_theta`` keeps full precision as
    ``theta -> 0``.
    """
    psi = np.asarray(psi, dtype=np.float64)
    psi = psi[np.isfinite(psi)]
    n = psi.size
    if n == 0:
        raise InvalidArgumentError("no finite path costs")
    mean = float(np.mean(psi))
    var = float(np.var(psi))
    if theta == 0:
        return CostEstimate(1.0, mean, mean, var, float(np.std(psi) / math.sqrt(n)), n, 0.0, 0.0)
    y = theta * (psi - mean)
    if np.max(np.abs(y)) < 0.5:
        ly = math.log1p(float(np.mean(np.expm1(y))))
    else:
        ly = log_mean_exp(y)
    log_j = theta * mean + ly
    r = np.exp(y - ly)
    se = float(np.std(r) / (math.sqrt(n) * abs(theta)))
    return CostEstimate(math.exp(log_j) if log_j < 709 else math.inf, mean + ly / theta, mean, var,
                        se, n, log_j, float(theta))


def estimate_cost(coeffs: CoefficientSet, control: ControlLaw, params: LqParams, grid: TimeGrid,
                  n_paths: int, seed: int, *, tilt: Tilt | None = None, threads: int = 1,
                  substeps: int = 1) -> CostEstimate:
    """Monte Carlo ``J^theta = E exp(theta Psi_T)`` under ``control`` with a fresh ensemble.

    Blown-up paths are excluded from the statistics; a full blow-up raises a
    :class:`BlowUpError` whose ``partial`` is the estimate over the paths that
    were still finite at the last common node, or ``None``.
    """
    try:
        ens = simulate_state(coeffs, control, params.x0, grid, n_paths, seed, tilt=tilt,
                             threads=threads, substeps=substeps)
    except BlowUpError as exc:
        raise BlowUpError(f"cost estimate failed: {exc}", tau=exc.tau, t=exc.t,
                          last_finite=exc.last_finite, partial=None) from exc
    return cost_from_samples(path_costs(coeffs, ens), params.theta)


@dataclass(frozen=True)
class ExpansionReport:
    thetas: tuple
    estimates: tuple
    gaps: np.ndarray
    ratios: np.ndarray


def expansion_check(coeffs: CoefficientSet, control: ControlLaw, params: LqParams, grid: TimeGrid,
                    n_paths: int, seed: int, theta_list, *, tilt: Tilt | None = None,
                    threads: int = 1) -> ExpansionReport:
    """Gap ``|Psi_theta - E Psi_T - theta var(Psi_T) / 2|`` per theta on one set of samples.

    The ensemble is simulated once, so every theta sees the same paths.
    ``ratios[j] = gaps[j] / gaps[j + 1]``.
    """
    thetas = tuple(float(th) for th in theta_list)
    if not thetas or any(th == 0 for th in thetas):
        raise InvalidArgumentError("theta_list must be non-empty and free of zeros")
    ens = simulate_state(coeffs, control, params.x0, grid, n_paths, seed, tilt=tilt, threads=threads)
    psi = path_costs(coeffs, ens)
    est = tuple(cost_from_samples(psi, th) for th in thetas)
    gaps = np.array([abs(e.psi_theta - e.mean_psi_T - 0.5 * th * e.var_psi_T)
                     for e, th in zip(est, thetas)])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = gaps[:-1] / gaps[1:]
    return ExpansionReport(thetas, est, gaps, ratios)


# -- maximum principle ----------------------------------------------------


@dataclass(frozen=True)
class VariationalReport:
    """Variational-inequality sweep.

    ``lhs_values[j, k]`` is the maximum over the sampled paths of the
    left-hand side at control ``control_grid[j]`` and node ``time_nodes[k]``.
    ``violating_fraction`` counts (path, node, control) triples above
    ``tolerance``.
    """

    control_grid: np.ndarray
    time_nodes: np.ndarray
    lhs_values: np.ndarray
    max_violation: float
    violating_fraction: float
    tolerance: float
    n_paths_checked: int
    sampling: str = ""


def _sample(adjoint: AdjointPanel, ensemble: Ensemble, panel: MartingalePanel):
    live = np.flatnonzero(np.all(np.isfinite(ensemble.states), axis=1))[:VI_PATH_CAP]
    if live.size == 0:
        raise InvalidArgumentError("no finite paths to check")
    x = ensemble.states[live]
    return (live, x, ensemble.controls[live], adjoint.p[live], adjoint.q_paths[live],
            panel.ell[live])


def _check_consistent(adjoint, ensemble, panel):
    if not (adjoint.grid == ensemble.grid == panel.grid) or adjoint.p.shape != ensemble.states.shape:
        raise InvalidArgumentError("adjoint panel, ensemble and martingale panel do not match")


def check_variational_inequality(coeffs: CoefficientSet, adjoint: AdjointPanel, ensemble: Ensemble,
                                 panel: MartingalePanel, theta: float, control_grid,
                                 tolerance: float = 1e-8) -> VariationalReport:
    """Evaluate ``H^theta(u) - H^theta(u_bar) + (P_bar - theta p^2) (delta sigma)^2 / 2``.

    Every node and the first 1000 finite paths are sampled.
    """
    grid_u = np.asarray(control_grid, dtype=np.float64).ravel()
    if grid_u.size == 0:
        raise InvalidArgumentError("control grid is empty")
    _check_consistent(adjoint, ensemble, panel)
    live, x, ubar, p, q, ell = _sample(adjoint, ensemble, panel)
    t = ensemble.grid.nodes
    m = ensemble.empirical_mean.values[None, :]
    P = adjoint.P_bar.values[None, :]
    h_bar = rs_hamiltonian(coeffs, t, x, m, ubar, p, q, ell, theta)
    s_bar = np.broadcast_to(coeffs.sigma(t, x, m, ubar), x.shape)
    curv = 0.5 * (P - theta * p * p)
    lhs = np.empty((grid_u.size, t.size))
    n_bad = 0
    for j, u in enumerate(grid_u):
        uj = np.full_like(x, u)
        ds = np.broadcast_to(coeffs.sigma(t, x, m, uj), x.shape) - s_bar
        val = rs_hamiltonian(coeffs, t, x, m, uj, p, q, ell, theta) - h_bar + curv * ds * ds
        lhs[j] = np.max(val, axis=0)
        n_bad += int(np.count_nonzero(val > tolerance))
    total = grid_u.size * x.size
    return VariationalReport(
        grid_u, np.arange(t.size), lhs, float(np.max(lhs)), n_bad / total, float(tolerance),
        int(live.size), f"all {t.size} nodes, first {live.size} finite paths",
    )


@dataclass(frozen=True)
class ArgmaxReport:
    passed: bool
    worst_gap: float
    worst_path: int
    worst_node: int
    max_argmax_distance: float
    tolerance: float
    extra: dict = field(default_factory=dict)


def argmax_check(coeffs: CoefficientSet, adjoint: AdjointPanel, ensemble: Ensemble,
                 panel: MartingalePanel, theta: float, control_grid,
                 tolerance: float = 1e-8) -> ArgmaxReport:
    """Check that ``u_bar`` attains the grid maximum of ``u -> H^theta``.

    Passes when ``H^theta(u_bar) >= max_grid H^theta - tolerance`` at every
    sample. ``max_argmax_distance`` is the largest distance between ``u_bar``
    and the grid maximizer (ties toward the smallest control).
    """
    grid_u = np.sort(np.asarray(control_grid, dtype=np.float64).ravel())
    if grid_u.size == 0:
        raise InvalidArgumentError("control grid is empty")
    _check_consistent(adjoint, ensemble, panel)
    t = ensemble.grid.nodes
    live, x, ubar, p, q, ell = _sample(adjoint, ensemble, panel)
    m = ensemble.empirical_mean.values[None, :]
    lo = np.broadcast_to(coeffs.sigma(t, x, m, np.full_like(x, grid_u[0] - 1.0)), x.shape)
    hi = np.broadcast_to(coeffs.sigma(t, x, m, np.full_like(x, grid_u[-1] + 1.0)), x.shape)
    if not np.array_equal(lo, hi):
        raise InvalidArgumentError(
            "sigma depends on the control; use check_variational_inequality instead"
        )
    h_bar = rs_hamiltonian(coeffs, t, x, m, ubar, p, q, ell, theta)
    best = np.full(x.shape, -np.inf)
    best_u = np.zeros(x.shape)
    for u in grid_u:
        val = rs_hamiltonian(coeffs, t, x, m, np.full_like(x, u), p, q, ell, theta)
        better = val > best
        best = np.where(better, val, best)
        best_u = np.where(better, u, best_u)
    gap = best - h_bar
    i, k = np.unravel_index(int(np.argmax(gap)), gap.shape)
    dist = float(np.max(np.abs(best_u - ubar)))
    return ArgmaxReport(bool(gap[i, k] <= tolerance), float(gap[i, k]), int(live[i]), int(k),
                        dist, float(tolerance))
