import math
import time

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from rsmfc.errors import BlowUpError, InvalidArgumentError
from rsmfc.grid_rng import make_grid
from rsmfc.lq_model import LqParams
from rsmfc.riccati import (FormulaVariant, GammaChoice, alpha_meanfield, beta_case1, beta_case2,
                           blow_up_time, closed_form_raw, denominator, ode_oracle, phi1, riccati_rhs, solve_riccati)

from . import oracles

SB, ONE = GammaChoice.SIGMA_BETA, GammaChoice.ONE
DER, PRI = FormulaVariant.DERIVED_ODE, FormulaVariant.PAPER_PRINTED

params_st = st.builds(
    LqParams,
    a=st.floats(-1, 1), b=st.floats(-1.5, 1.5), sigma=st.floats(0, 1),
    theta=st.floats(-1, 1), t_end=st.floats(0.1, 2),
)


def test_frozen_values(stress):
    assert abs(beta_case1(stress, 0.0) - oracles.BETA_SIGMA_BETA_T0) < 1e-13
    assert abs(beta_case2(stress, 0.0) - oracles.BETA_ONE_DERIVED_T0) < 1e-13
    raw = closed_form_raw(stress, ONE, PRI, 0.0)
    assert abs(raw - oracles.BETA_ONE_PRINTED_T0) < 1e-12
    assert abs(beta_case1(LqParams(), 0.0) - oracles.BETA_REFERENCE_T0) < 1e-15
    ricc = solve_riccati(stress)
    assert abs(alpha_meanfield(stress, ricc.beta, 0.0) - oracles.ALPHA_SIGMA_BETA_T0) < 1e-10


def test_phi1_small_and_large():
    assert phi1(0.0) == 1.0
    assert abs(phi1(1e-7) - (math.expm1(1e-7) / 1e-7)) < 1e-15
    assert abs(phi1(2.0) - math.expm1(2.0) / 2.0) < 1e-15
    z = np.array([-1e-9, 0.0, 1e-3, -3.0])
    np.testing.assert_allclose(phi1(z), [1 - 5e-10, 1.0, math.expm1(1e-3) / 1e-3, math.expm1(-3) / -3],
                               rtol=1e-14)


@pytest.mark.parametrize("gc", [SB, ONE])
def test_closed_form_matches_rk4(stress, gc):
    grid = make_grid(1.0, 1000)
    t0 = time.perf_counter()
    ref = ode_oracle(riccati_rhs(stress, gc), 1.0, grid).values
    got = solve_riccati(stress, gc).beta(grid.nodes)
    assert np.max(np.abs(got - ref)) < 1e-8
    assert time.perf_counter() - t0 < 1.0


def test_printed_variant_mismatch_is_asserted(stress):
    ref = ode_oracle(riccati_rhs(stress, ONE), 1.0, make_grid(1.0, 1000)).values[0]
    # the printed formula has a pole inside [0, T] here: the guarded
    # evaluator refuses t = 0 and the raw value is far from the oracle
    with pytest.raises(BlowUpError):
        beta_case2(stress, 0.0, PRI)
    assert abs(closed_form_raw(stress, ONE, PRI, 0.0) - ref) > 1e-3
    assert abs(beta_case2(stress, 0.0, DER) - ref) < 1e-8


def test_sigma_beta_ignores_printed_variant(stress):
    assert solve_riccati(stress, SB, PRI).variant is DER


@settings(max_examples=60, deadline=None)
@given(params_st, st.sampled_from([SB, ONE]), st.floats(0.05, 0.95))
def test_terminal_value_and_ode_residual(p, gc, frac):
    ricc = solve_riccati(p, gc)
    assume(ricc.blow_up_tau is None)
    assert ricc.beta(p.t_end) == 1.0
    t, h = frac * p.t_end, 1e-4 * p.t_end
    deriv = (ricc.beta(t + h) - ricc.beta(t - h)) / (2 * h)
    rhs = riccati_rhs(p, gc)(t, ricc.beta(t))
    assert abs(deriv - rhs) < 1e-6 * max(1.0, abs(rhs))


@settings(max_examples=40, deadline=None)
@given(st.floats(-1, 1).filter(lambda a: abs(a) > 1e-3), st.floats(-2, 2), st.floats(0, 1),
       st.floats(0, 1))
def test_theta_zero_is_classical_lq(a, b, s, t):
    p = LqParams(a=a, b=b, sigma=s, theta=0.0)
    tau = 1.0 - t
    e = math.exp(-2 * a * tau)
    classical = 1.0 / (e + b * b * (1 - e) / (2 * a))
    assert abs(beta_case1(p, t) - classical) < 1e-10 * max(1.0, abs(classical))


def test_singular_limit_in_a():
    t = np.linspace(0, 1, 2001)
    zero = beta_case1(LqParams(a=0.0), t)
    tiny = beta_case1(LqParams(a=1e-9), t)
    assert np.max(np.abs(tiny - zero)) < 1e-7


@given(st.floats(-2, 2), st.floats(0, 1))
def test_alpha_without_control_channel(a, t):
    p = LqParams(a=a, b=0.0, mu=1.0)
    ricc = solve_riccati(p)
    assert abs(ricc.alpha(t) - math.exp(a * (1 - t))) < 1e-9 * math.exp(abs(a))


def test_alpha_on_grid_agrees_with_pointwise(stress):
    ricc = solve_riccati(stress.replace(mu=2.0))
    grid = make_grid(1.0, 10)
    np.testing.assert_allclose(ricc.alpha_on_grid(grid), ricc.alpha(grid.nodes), rtol=1e-9)
    assert np.all(solve_riccati(stress).alpha_on_grid(grid) == 1.0)
    assert abs(solve_riccati(stress).alpha_on_grid(grid, force=True)[0]
               - oracles.ALPHA_SIGMA_BETA_T0) < 1e-9


def test_printed_blow_up_time_at_reference_constants():
    p = LqParams(t_end=5.0)
    tau = blow_up_time(p, ONE, PRI)
    assert abs(tau - oracles.TAU_ONE_PRINTED_T5) < 1e-9
    assert blow_up_time(p, ONE, DER) is None
    assert blow_up_time(p, SB) is None


def test_case1_blow_up_time():
    p = LqParams(a=1.0, b=0.1, sigma=1.0, theta=50.0, t_end=10.0)
    tau = blow_up_time(p, SB)
    assert abs(tau - oracles.TAU_SIGMA_BETA_STRESS) < 1e-9
    with pytest.raises(BlowUpError) as info:
        beta_case1(p, 0.0)
    assert abs(info.value.tau - tau) < 1e-15
    assert info.value.t == 0.0
    # just before the singularity the gain is huge
    t_star = 10.0 - tau
    assert beta_case1(p, t_star + 1e-7) > 1e2


@settings(max_examples=50, deadline=None)
@given(params_st, st.sampled_from([(SB, DER), (ONE, DER), (ONE, PRI)]))
def test_blow_up_consistency(p, pair):
    gc, var = pair
    tau = blow_up_time(p, gc, var)
    ricc = solve_riccati(p, gc, var)
    if tau is None:
        assert np.all(np.isfinite(ricc.beta_or_nan(np.linspace(0, p.t_end, 101))))
        return
    assert 0 < tau <= p.t_end
    assert abs(denominator(p, gc, var, tau)) < 1e-8
    taus = np.linspace(0, tau, 50, endpoint=False)
    assert np.all(denominator(p, gc, var, taus) > 0)
    t_star = p.t_end - tau
    if t_star > 1e-6:
        with pytest.raises(BlowUpError):
            ricc.beta(t_star * 0.5)
        assert math.isnan(ricc.beta_or_nan(t_star * 0.5))


def test_rk4_reports_blow_up():
    grid = make_grid(2.0, 2000)
    with pytest.raises(BlowUpError) as info, np.errstate(over="ignore"):
        ode_oracle(lambda t, y: -y * y, 1.0, grid)  # y = 1 / (1 - (T - t))
    err = info.value
    assert 0.9 < err.t < 1.1
    part = err.partial
    assert np.all(np.isfinite(part[err.last_finite:])) and np.all(np.isnan(part[:err.last_finite]))


def test_time_outside_horizon(stress):
    with pytest.raises(InvalidArgumentError):
        beta_case1(stress, 1.5)
    with pytest.raises(InvalidArgumentError):
        beta_case1(stress, -0.1)
