import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsmfc.errors import EnsembleBlowUpError, EvaluationError, InvalidArgumentError
from rsmfc.grid_rng import make_grid
from rsmfc.lq_model import CoefficientSet, LqParams, lq_coefficients
from rsmfc.mfsde_sim import (Feedback, LinearFeedback, OpenLoop, Perturbed, empirical_mean_function,
                             log_mean_exp, lq_optimal_control, lq_tilt, path_costs, simulate_martingales,
                             simulate_state)
from rsmfc.riccati import FormulaVariant, GammaChoice, ode_oracle, solve_riccati


def _zero(t, x, y, u):
    return 0.0


def test_zero_dynamics():
    c = CoefficientSet(b=_zero, sigma=_zero, f=_zero, h=lambda x, y: 0.0)
    ens = simulate_state(c, OpenLoop(lambda t: 3.0), 1.5, make_grid(1.0, 20), 7, seed=1)
    assert np.all(ens.states == 1.5)
    assert np.all(ens.empirical_mean.values == 1.5)
    assert np.all(ens.controls == 3.0)
    assert ens.blow_up is None


def test_single_path_mean_is_the_path(stress):
    ricc = solve_riccati(stress)
    grid = make_grid(1.0, 50)
    ens = simulate_state(lq_coefficients(stress), lq_optimal_control(ricc, grid), 1.0, grid, 1, seed=4)
    assert np.array_equal(ens.empirical_mean.values, ens.states[0])
    assert np.array_equal(empirical_mean_function(ens).values, ens.empirical_mean.values)


def test_degenerate_ensemble():
    p = LqParams(a=0.3, sigma=0.0)
    grid = make_grid(1.0, 40)
    ens = simulate_state(lq_coefficients(p), OpenLoop(lambda t: math.sin(t)), 2.0, grid, 9, seed=0)
    assert np.all(ens.states == ens.states[0])
    assert np.array_equal(ens.empirical_mean.values, ens.states[3])


def test_mean_recompute_is_exact(stress):
    grid = make_grid(1.0, 100)
    ens = simulate_state(lq_coefficients(stress), Feedback(lambda t, x, m: -x + 0.1 * m), 1.0, grid,
                         1001, seed=8)
    direct = [np.sum(ens.states[:, k]) / 1001 for k in range(grid.n_nodes)]
    assert np.array_equal(empirical_mean_function(ens).values, np.array(direct))


def test_mean_ode_oracle():
    p = LqParams(a=0.0, b=1.0, sigma=0.3, theta=0.2)
    ricc = solve_riccati(p)
    grid = make_grid(1.0, 1000)
    M = 4000
    ens = simulate_state(lq_coefficients(p), lq_optimal_control(ricc, grid), 1.0, grid, M, seed=21)
    m_ode = ode_oracle(lambda t, m: -float(ricc.beta(t)) * m, 1.0, grid)
    # m' = -b^2 beta m integrated forward from m(0) = 1: rescale the backward solution
    ref = m_ode.values / m_ode.values[0]
    se = np.std(ens.states, axis=0) / math.sqrt(M)
    assert np.all(np.abs(ens.empirical_mean.values - ref) <= 4 * se + 1e-12)


def test_reference_closed_loop_stays_bounded(reference):
    ricc = solve_riccati(reference)
    grid = make_grid(1.0, 10_000)
    ens = simulate_state(lq_coefficients(reference), lq_optimal_control(ricc, grid), 1.0, grid, 200,
                         seed=3)
    assert np.all(np.isfinite(ens.states)) and np.max(np.abs(ens.states)) < 10


def test_printed_gain_explodes_at_long_horizon():
    p = LqParams(t_end=5.0)
    ricc = solve_riccati(p, GammaChoice.ONE, FormulaVariant.PAPER_PRINTED)
    grid = make_grid(5.0, 50_000)
    with pytest.raises(EnsembleBlowUpError) as info:
        simulate_state(lq_coefficients(p), lq_optimal_control(ricc, grid), 1.0, grid, 50, seed=5)
    ens = info.value.partial
    first, paths = ens.blow_up
    assert len(paths) == 50
    assert grid.node(first) <= ricc.blow_up_t + 1e-9
    assert np.all(np.isnan(ens.states[:, -1]))


def test_generic_blow_up_partial():
    c = lq_coefficients(LqParams(sigma=0.1))
    grid = make_grid(1.0, 100)
    with pytest.raises(EnsembleBlowUpError) as info:
        simulate_state(c, Feedback(lambda t, x, m: 100.0 * x), 1.0, grid, 4, seed=0)
    part = info.value.partial
    k = part.blow_index
    assert np.all(k > 0)
    for i in range(4):
        assert np.all(np.isfinite(part.states[i, :k[i]]))
        assert np.all(np.isnan(part.states[i, k[i]:]))
        assert part.path(i).blow_up_index == k[i]


def test_partial_blow_up_keeps_survivors():
    c = lq_coefficients(LqParams(sigma=1.0))
    grid = make_grid(1.0, 100)
    law = Feedback(lambda t, x, m: np.where(x > 1.2, 1e4 * x, 0.0))
    ens = simulate_state(c, law, 1.0, grid, 50, seed=2)
    first, paths = ens.blow_up
    assert 0 < len(paths) < 50
    live = np.setdiff1d(np.arange(50), paths)
    assert np.all(np.isfinite(ens.empirical_mean.values))
    k = grid.n_steps
    assert ens.empirical_mean.values[k] == np.sum(ens.states[live, k]) / live.size


def test_evaluation_error_propagates():
    def bad_b(t, x, y, u):
        raise EvaluationError("drift undefined")
    c = CoefficientSet(b=bad_b, sigma=_zero, f=_zero, h=lambda x, y: 0.0)
    with pytest.raises(EvaluationError):
        simulate_state(c, OpenLoop(lambda t: 0.0), 0.0, make_grid(1.0, 5), 2, seed=0)


def test_argument_checks(stress):
    c = lq_coefficients(stress)
    grid = make_grid(1.0, 10)
    law = OpenLoop(lambda t: 0.0)
    with pytest.raises(InvalidArgumentError):
        simulate_state(c, law, 1.0, grid, 0, seed=0)
    with pytest.raises(InvalidArgumentError):
        simulate_state(c, law, 1.0, grid, 3, seed=0, increments=np.zeros((3, 9)))
    with pytest.raises(InvalidArgumentError):
        simulate_state(c, law, 1.0, grid, 3, seed=0, record_every=3)
    with pytest.raises(InvalidArgumentError):
        simulate_state(c, LinearFeedback(np.ones(11), np.ones(11)), 1.0, grid, 3, seed=0)


def test_fast_and_generic_paths_agree(stress):
    p = stress.replace(mu=2.0)
    ricc = solve_riccati(p)
    grid = make_grid(1.0, 64)
    c = lq_coefficients(p)
    opt = lq_optimal_control(ricc, grid)
    tilt = lq_tilt(ricc, grid)
    fast = simulate_state(c, Perturbed(opt, 0.25), 1.0, grid, 300, seed=6, tilt=tilt)
    generic_c = CoefficientSet(b=c.b, sigma=c.sigma, f=c.f, h=c.h)  # no lq tag
    slow = simulate_state(generic_c, Perturbed(opt, 0.25), 1.0, grid, 300, seed=6, tilt=tilt)
    np.testing.assert_allclose(fast.states, slow.states, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(fast.log_tilt, slow.log_tilt, rtol=1e-12, atol=1e-12)


def test_perturbed_zero_is_identity(stress):
    ricc = solve_riccati(stress)
    grid = make_grid(1.0, 50)
    c = lq_coefficients(stress)
    opt = lq_optimal_control(ricc, grid)
    a = simulate_state(c, opt, 1.0, grid, 100, seed=1)
    b = simulate_state(c, Perturbed(opt, 0.0), 1.0, grid, 100, seed=1)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.controls, b.controls)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**63), st.sampled_from([1, 2, 3, 5]))
def test_thread_count_invisible(seed, threads):
    p = LqParams(a=0.5, b=1.0, sigma=0.3, theta=0.2)
    ricc = solve_riccati(p)
    grid = make_grid(1.0, 32)
    c = lq_coefficients(p)
    args = (c, lq_optimal_control(ricc, grid), 1.0, grid, 257)
    one = simulate_state(*args, seed=seed, tilt=lq_tilt(ricc, grid))
    many = simulate_state(*args, seed=seed, tilt=lq_tilt(ricc, grid), threads=threads)
    assert np.array_equal(one.states, many.states)
    assert np.array_equal(one.empirical_mean.values, many.empirical_mean.values)
    assert np.array_equal(one.log_tilt, many.log_tilt)


def test_record_every_subsamples(stress):
    ricc = solve_riccati(stress)
    grid = make_grid(1.0, 100)
    c = lq_coefficients(stress)
    full = simulate_state(c, lq_optimal_control(ricc, grid), 1.0, grid, 20, seed=9)
    thin = simulate_state(c, lq_optimal_control(ricc, grid), 1.0, grid, 20, seed=9, record_every=10)
    assert thin.grid.n_steps == 10 and thin.increments is None
    assert np.array_equal(thin.states, full.states[:, ::10])


def test_martingales_trivial_cases(stress):
    ricc = solve_riccati(stress)
    grid = make_grid(1.0, 50)
    c = lq_coefficients(stress)
    ens = simulate_state(c, lq_optimal_control(ricc, grid), 1.0, grid, 100, seed=2)
    flat = simulate_martingales(c, ens, ricc.gamma, 0.0)
    assert np.all(flat.l_theta == 1.0)
    assert np.all(flat.log_v == flat.log_v0)
    flat = simulate_martingales(c, ens, 0.0, 0.7)
    assert np.all(flat.l_theta == 1.0)
    panel = simulate_martingales(c, ens, ricc.gamma, stress.theta)
    assert np.all(panel.l_theta[:, 0] == 1.0)
    assert np.all(panel.l_theta > 0) and np.all(panel.v_theta > 0)
    psi = path_costs(c, ens)
    assert abs(panel.log_v0 - log_mean_exp(stress.theta * psi)) == 0.0


def test_martingales_match_kernel_tilt(stress):
    ricc = solve_riccati(stress)
    grid = make_grid(1.0, 50)
    c = lq_coefficients(stress)
    ens = simulate_state(c, lq_optimal_control(ricc, grid), 1.0, grid, 100, seed=2,
                         tilt=lq_tilt(ricc, grid))
    panel = simulate_martingales(c, ens, lq_tilt(ricc, grid).gamma, stress.theta)
    assert np.array_equal(panel.log_l, ens.log_tilt)


def test_martingales_reject_overflow(stress):
    grid = make_grid(1.0, 10)
    c = lq_coefficients(stress)
    ens = simulate_state(c, OpenLoop(lambda t: 0.0), 1.0, grid, 3, seed=0)
    with pytest.raises(EvaluationError):
        simulate_martingales(c, ens, 1e308, 1e10)
    with pytest.raises(InvalidArgumentError):
        simulate_martingales(c, ens, np.ones(5), 0.1)


def test_martingale_means(stress):
    ricc = solve_riccati(stress)
    grid = make_grid(1.0, 100)
    c = lq_coefficients(stress)
    M = 20_000
    ens = simulate_state(c, lq_optimal_control(ricc, grid), 1.0, grid, M, seed=13)
    panel = simulate_martingales(c, ens, ricc.gamma, stress.theta)
    L, v = panel.l_theta, panel.v_theta
    for k in (25, 50, 100):
        assert abs(L[:, k].mean() - 1) <= 3 * L[:, k].std() / math.sqrt(M)
        diff = v[:, k] - v[:, 0]
        assert abs(diff.mean()) <= 3 * diff.std() / math.sqrt(M)


def test_bounded_coefficient_martingale_bound():
    # b = 0, sigma = 1, f = 0, h = C sin x; the integrand ell comes from the exact
    # conditional expectation v(t, x) = E exp(theta C sin(x + sqrt(T - t) Z))
    C, theta, T = 2.0, 0.3, 1.0
    z, w = np.polynomial.hermite_e.hermegauss(60)
    w = w / w.sum()

    def ell(t, x):
        s = x[:, None] + math.sqrt(max(T - t, 0.0)) * z[None, :]
        e = np.exp(theta * C * np.sin(s))
        return (e * C * np.cos(s)) @ w / (e @ w)

    coeffs = CoefficientSet(b=_zero, sigma=lambda t, x, y, u: 1.0, f=_zero,
                            h=lambda x, y: C * np.sin(x))
    grid = make_grid(T, 200)
    ens = simulate_state(coeffs, OpenLoop(lambda t: 0.0), 0.0, grid, 2000, seed=17)
    panel = simulate_martingales(coeffs, ens, None, theta, ell=ell)
    lo, hi = math.exp(-(1 + T) * C * theta), math.exp((1 + T) * C * theta)
    assert np.all(panel.v_theta >= lo) and np.all(panel.v_theta <= hi)


def test_weak_order_of_the_mean():
    # antithetic increments cancel the noise in the particle mean exactly for a
    # linear closed loop, leaving only the time-discretization bias
    p = LqParams(a=0.5, b=1.0, sigma=0.3, theta=0.2)
    ricc = solve_riccati(p)
    c = lq_coefficients(p)
    fine = make_grid(1.0, 4096)
    m_exact = ode_oracle(lambda t, m: (0.5 - float(ricc.beta(t))) * m, 1.0, fine).values
    m_exact = 1.0 / m_exact[0]  # forward solution at T from m(0) = 1
    errs = []
    for n in (16, 32, 64):
        grid = make_grid(1.0, n)
        dB = np.sqrt(grid.dt) * np.random.default_rng(0).standard_normal((500, n))
        dB = np.vstack([dB, -dB])
        ens = simulate_state(c, lq_optimal_control(ricc, grid), 1.0, grid, 1000, seed=0, increments=dB)
        errs.append(abs(ens.empirical_mean.values[-1] - m_exact))
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    assert all(1.5 <= r <= 2.5 for r in ratios), ratios
