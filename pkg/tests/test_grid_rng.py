import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsmfc.errors import InvalidArgumentError
from rsmfc.grid_rng import (RngStream, ScalarPath, TimeGrid, brownian_increments,
                            gaussian_increment, make_grid, standard_normals)


def test_make_grid_basic():
    g = make_grid(1.0, 10)
    assert g.dt == 0.1
    assert g.node(10) == 1.0
    assert g.nodes[-1] == 1.0 and g.nodes[0] == 0.0


def test_make_grid_fine_steps():
    assert make_grid(1.0, 10**6).dt == 1e-6
    g = make_grid(5.0, 5 * 10**6)
    assert g.dt == 1e-6 and g.t_end == 5.0


@pytest.mark.parametrize("t_end, n", [(0.0, 10), (-1.0, 10), (1.0, 0), (1.0, -3), (math.inf, 5)])
def test_make_grid_rejects(t_end, n):
    with pytest.raises(InvalidArgumentError):
        make_grid(t_end, n)


@given(st.floats(1e-3, 1e3), st.integers(1, 5000))
def test_grid_nodes_exact_and_increasing(t_end, n):
    g = make_grid(t_end, n)
    t = g.nodes
    assert t[0] == 0.0 and t[-1] == t_end
    assert np.all(np.diff(t) > 0)
    k = n // 2
    assert t[k] == k * t_end / n == g.node(k)


def test_scalar_path_marker():
    g = make_grid(1.0, 4)
    with pytest.raises(InvalidArgumentError):
        ScalarPath(g, [0, 1, 2])
    with pytest.raises(InvalidArgumentError):
        ScalarPath(g, [0, 1, np.nan, 3, 4])
    p = ScalarPath.from_values(g, [0, 1, np.inf, 3, 4])
    assert p.blow_up_index == 2 and p.blew_up
    t, v = p.finite_part()
    assert list(v) == [0, 1] and list(t) == [0, 0.25]
    assert np.all(np.isnan(p.values[2:]))


def test_increment_deterministic():
    s = RngStream(123, 7)
    a = gaussian_increment(s, 42, 0.01)
    assert a == gaussian_increment(RngStream(123, 7), 42, 0.01)
    assert a != gaussian_increment(RngStream(123, 8), 42, 0.01)
    with pytest.raises(InvalidArgumentError):
        gaussian_increment(s, 0, 0.0)


def test_stream_matches_block():
    z = standard_normals(99, 5, 6)
    for i in range(5):
        for k in range(6):
            assert RngStream(99, i).standard_normal(k) == z[i, k]


def test_increment_moments():
    dt = 0.01
    z = standard_normals(2024, 1000, 1000)
    x = math.sqrt(dt) * z.ravel()
    assert abs(x.mean()) < 4 * math.sqrt(dt / x.size)
    assert abs(x.var() / dt - 1) < 0.01


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(1, 20), st.integers(1, 20), st.integers(0, 19))
def test_partitioning_does_not_change_draws(seed, n_paths, n_steps, split):
    full = standard_normals(seed, n_paths, n_steps)
    cut = min(split, n_paths)
    parts = np.vstack([standard_normals(seed, cut, n_steps),
                       standard_normals(seed, n_paths - cut, n_steps, path_offset=cut)])
    assert np.array_equal(full, parts)
    s = min(split, n_steps)
    cols = np.hstack([standard_normals(seed, n_paths, s),
                      standard_normals(seed, n_paths, n_steps - s, step_offset=s)])
    assert np.array_equal(full, cols)


def test_substeps_share_fine_path():
    fine = make_grid(1.0, 20)
    coarse = make_grid(1.0, 10)
    dbf = brownian_increments(5, 3, fine)
    dbc = brownian_increments(5, 3, coarse, substeps=2)
    assert np.allclose(dbc, dbf[:, 0::2] + dbf[:, 1::2], rtol=0, atol=1e-15)


def test_rng_stream_validation():
    with pytest.raises(InvalidArgumentError):
        RngStream(-1, 0)
    with pytest.raises(InvalidArgumentError):
        RngStream(2**64, 0)
