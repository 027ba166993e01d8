"""Closed-form Riccati gains of the scalar LQ problem, an RK4 oracle and blow-up location.

Both gamma choices lead to a Bernoulli equation ``beta' + c beta - k beta^2 = 0``
with ``beta(T) = 1``. Writing ``tau = T - t``, its solution is ``1 / w(tau)``
with

    w(tau) = exp(-c tau) + k tau phi1(-c tau),   phi1(z) = (e^z - 1) / z,

which stays well defined at ``c = 0``:

* ``SIGMA_BETA`` (gamma = sigma beta): ``c = 2a``, ``k = b^2 - theta sigma^2``
* ``ONE`` (gamma = 1):                 ``c = 2a + theta sigma``, ``k = b^2``

The published closed form for gamma = 1 does not solve that ODE (it carries
an extra ``exp(theta sigma T)`` and the opposite sign on the ``b^2`` term).
It is kept verbatim as ``FormulaVariant.PAPER_PRINTED``; its denominator
``1 - b^2 exp(theta sigma T) tau phi1(c tau)`` vanishes in finite backward time.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, optimize

from .errors import BlowUpError, InvalidArgumentError
from .grid_rng import ScalarPath, TimeGrid
from .lq_model import LqParams

_TAYLOR_CUTOFF = 1e-5
_SCAN_POINTS = 10_000
_BISECT_XTOL = 1e-10


class GammaChoice(enum.Enum):
    SIGMA_BETA = "sigma_beta"
    ONE = "one"


class FormulaVariant(enum.Enum):
    DERIVED_ODE = "derived_ode"
    PAPER_PRINTED = "paper_printed"


def phi1(z):
    """``(e^z - 1) / z`` with the removable singularity at 0 filled in."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < _TAYLOR_CUTOFF
    safe = np.where(small, 1.0, z)
    out = np.where(small, 1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0, np.expm1(safe) / safe)
    return out if out.ndim else float(out)


def bernoulli_coefficients(params: LqParams, gamma_choice: GammaChoice) -> tuple[float, float]:
    """``(c, k)`` of ``beta' + c beta - k beta^2 = 0`` for the given gamma choice."""
    p = params
    if gamma_choice is GammaChoice.SIGMA_BETA:
        return 2.0 * p.a, p.b * p.b - p.theta * p.sigma * p.sigma
    if gamma_choice is GammaChoice.ONE:
        return 2.0 * p.a + p.theta * p.sigma, p.b * p.b
    raise InvalidArgumentError(f"unknown gamma choice {gamma_choice!r}")


def riccati_rhs(params: LqParams, gamma_choice: GammaChoice) -> Callable[[float, float], float]:
    """``beta'(t)`` as a function of ``(t, beta)`` for the ODE behind each closed form."""
    c, k = bernoulli_coefficients(params, gamma_choice)
    return lambda t, beta: -c * beta + k * beta * beta


def denominator(params: LqParams, gamma_choice: GammaChoice, variant: FormulaVariant, tau):
    """Sign-carrying denominator of the closed form at backward time ``tau``.

    The closed form is finite exactly where this is positive.
    """
    tau = np.asarray(tau, dtype=np.float64)
    c, k = bernoulli_coefficients(params, gamma_choice)
    if gamma_choice is GammaChoice.ONE and variant is FormulaVariant.PAPER_PRINTED:
        p = params
        return 1.0 - p.b * p.b * math.exp(p.theta * p.sigma * p.t_end) * tau * phi1(c * tau)
    return np.exp(-c * tau) + k * tau * phi1(-c * tau)


def closed_form_raw(params: LqParams, gamma_choice: GammaChoice, variant: FormulaVariant, t):
    """Closed-form beta without any blow-up guard (may be negative or infinite)."""
    tau = params.t_end - np.asarray(t, dtype=np.float64)
    d = denominator(params, gamma_choice, variant, tau)
    c, _ = bernoulli_coefficients(params, gamma_choice)
    with np.errstate(divide="ignore"):
        if gamma_choice is GammaChoice.ONE and variant is FormulaVariant.PAPER_PRINTED:
            out = np.exp(c * tau) / d
        else:
            out = 1.0 / d
    return out if np.ndim(out) else float(out)


def blow_up_time(params: LqParams, gamma_choice: GammaChoice,
                 variant: FormulaVariant = FormulaVariant.DERIVED_ODE) -> float | None:
    """Smallest backward time ``tau*`` in ``(0, T]`` where the denominator vanishes.

    A uniform scan brackets the first sign change; bisection then locates the
    root to ``1e-10``. Returns ``None`` when the denominator stays positive.
    """
    T = params.t_end
    taus = np.arange(_SCAN_POINTS + 1) * T / _SCAN_POINTS
    taus[-1] = T
    d = np.asarray(denominator(params, gamma_choice, variant, taus))
    bad = np.flatnonzero(~(d > 0))
    if bad.size == 0:
        return None
    j = int(bad[0])
    if d[j] == 0.0:
        return float(taus[j])

    def g(tau):
        return float(denominator(params, gamma_choice, variant, tau))

    return float(optimize.bisect(g, taus[j - 1], taus[j], xtol=_BISECT_XTOL))


def _check_times(params: LqParams, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    slack = 1e-12 * params.t_end
    if np.any(t < -slack) or np.any(t > params.t_end + slack):
        raise InvalidArgumentError(f"t must lie in [0, {params.t_end}]")
    return t


def _guarded(params, gamma_choice, variant, t):
    t = _check_times(params, t)
    d = np.asarray(denominator(params, gamma_choice, variant, params.t_end - t))
    bad = ~(d > 0)
    if np.any(bad):
        tau_star = blow_up_time(params, gamma_choice, variant)
        t_bad = float(np.max(np.atleast_1d(t)[np.atleast_1d(bad)]))
        raise BlowUpError(
            f"beta ({gamma_choice.value}, {variant.value}) is beyond its blow-up at "
            f"tau*={tau_star} (t*={None if tau_star is None else params.t_end - tau_star}); "
            f"evaluated at t={t_bad}",
            tau=tau_star,
            t=t_bad,
        )
    return closed_form_raw(params, gamma_choice, variant, t)


def beta_case1(params: LqParams, t):
    """Gain for gamma = sigma beta, from the risk-sensitive Riccati equation."""
    return _guarded(params, GammaChoice.SIGMA_BETA, FormulaVariant.DERIVED_ODE, t)


def beta_case2(params: LqParams, t, variant: FormulaVariant = FormulaVariant.DERIVED_ODE):
    """Gain for gamma = 1; ``PAPER_PRINTED`` evaluates the published formula verbatim."""
    return _guarded(params, GammaChoice.ONE, variant, t)


def alpha_meanfield(params: LqParams, beta: Callable, t: float) -> float:
    """``alpha(t) = exp(int_t^T (a - b^2 beta(s)) ds)`` by adaptive Gauss-Kronrod quadrature."""
    t = float(_check_times(params, t))
    if t == params.t_end:
        return 1.0
    a, b2 = params.a, params.b * params.b
    val, _ = integrate.quad(lambda s: a - b2 * float(beta(s)), t, params.t_end,
                            epsabs=0.0, epsrel=1e-10, limit=200)
    return math.exp(val)


def ode_oracle(rhs: Callable[[float, float], float], y_T: float, grid: TimeGrid) -> ScalarPath:
    """Classical RK4 integrated backward from ``t = T`` with terminal value ``y_T``."""
    n = grid.n_steps
    t = grid.nodes
    y = np.empty(n + 1)
    y[n] = y_T
    h = -grid.dt
    for k in range(n, 0, -1):
        tk, yk = t[k], y[k]
        k1 = rhs(tk, yk)
        k2 = rhs(tk + h / 2, yk + h / 2 * k1)
        k3 = rhs(tk + h / 2, yk + h / 2 * k2)
        k4 = rhs(tk + h, yk + h * k3)
        y[k - 1] = yk + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not math.isfinite(y[k - 1]) or abs(y[k - 1]) > 1e300:
            y[: k] = np.nan
            raise BlowUpError(
                f"RK4 solution left the finite range below t={tk}",
                t=float(tk), last_finite=k, partial=y.copy(),
            )
    return ScalarPath(grid, y)


@dataclass(frozen=True)
class RiccatiSolution:
    """Gains of one (gamma choice, formula variant) pair.

    ``blow_up_tau`` is the backward time ``T - t*`` of the singularity, if any.
    """

    params: LqParams
    gamma_choice: GammaChoice = GammaChoice.SIGMA_BETA
    variant: FormulaVariant = FormulaVariant.DERIVED_ODE
    blow_up_tau: float | None = None

    @property
    def blow_up_t(self) -> float | None:
        return None if self.blow_up_tau is None else self.params.t_end - self.blow_up_tau

    def beta(self, t):
        return _guarded(self.params, self.gamma_choice, self.variant, t)

    def beta_or_nan(self, t):
        """Like :meth:`beta` but NaN past the blow-up instead of raising."""
        t = _check_times(self.params, t)
        d = np.asarray(denominator(self.params, self.gamma_choice, self.variant, self.params.t_end - t))
        out = np.where(d > 0, closed_form_raw(self.params, self.gamma_choice, self.variant, t), np.nan)
        return out if out.ndim else float(out)

    def gamma(self, t):
        if self.gamma_choice is GammaChoice.SIGMA_BETA:
            return self.params.sigma * self.beta(t)
        t = np.asarray(t, dtype=np.float64)
        out = np.ones_like(t)
        return out if out.ndim else 1.0

    def gamma_or_nan(self, t):
        if self.gamma_choice is GammaChoice.SIGMA_BETA:
            return self.params.sigma * self.beta_or_nan(t)
        t = np.asarray(t, dtype=np.float64)
        out = np.ones_like(t)
        return out if out.ndim else 1.0

    def alpha(self, t):
        """Mean-field weight; identically 1 when ``mu = 0``."""
        t = np.asarray(t, dtype=np.float64)
        if self.params.mu == 0.0:
            out = np.ones_like(t)
        else:
            out = np.array([alpha_meanfield(self.params, self.beta, s) for s in np.atleast_1d(t)])
            out = out.reshape(t.shape)
        return out if out.ndim else float(out)

    def alpha_on_grid(self, grid: TimeGrid, force: bool = False) -> np.ndarray:
        """``alpha`` at every node, integrating node to node from ``T`` backward.

        With ``force`` the quadrature runs even when ``mu = 0``.
        """
        if self.params.mu == 0.0 and not force:
            return np.ones(grid.n_nodes)
        t = grid.nodes
        a, b2 = self.params.a, self.params.b * self.params.b
        logs = np.zeros(grid.n_nodes)
        for k in range(grid.n_steps - 1, -1, -1):
            piece, _ = integrate.quad(lambda s: a - b2 * float(self.beta(s)), t[k], t[k + 1],
                                      epsabs=0.0, epsrel=1e-10, limit=200)
            logs[k] = logs[k + 1] + piece
        return np.exp(logs)


def solve_riccati(params: LqParams, gamma_choice: GammaChoice = GammaChoice.SIGMA_BETA,
                  variant: FormulaVariant = FormulaVariant.DERIVED_ODE) -> RiccatiSolution:
    if gamma_choice is GammaChoice.SIGMA_BETA:
        variant = FormulaVariant.DERIVED_ODE
    return RiccatiSolution(params, gamma_choice, variant,
                           blow_up_time(params, gamma_choice, variant))
