import numpy as np
import pytest

from rsmfc import _kernels_py
from rsmfc._backend import BACKEND, kernels

from .oracles import PHILOX_KAT

compiled = pytest.importorskip("rsmfc._kernels")


@pytest.mark.parametrize("counter, key, expected", PHILOX_KAT)
def test_philox_known_answers_python(counter, key, expected):
    out = _kernels_py.philox4x32(counter, key)
    assert tuple(int(v) for v in out) == expected


@pytest.mark.parametrize("counter, key, expected", PHILOX_KAT)
def test_philox_known_answers_compiled(counter, key, expected):
    assert tuple(compiled.philox4x32(counter, key)) == expected


def test_compiled_backend_selected():
    assert BACKEND == "cython" and kernels is compiled


def test_normals_agree_across_backends():
    a = compiled.normals(77, 3, 50, 11, 40)
    b = _kernels_py.normals(77, 3, 50, 11, 40)
    # libm and numpy transcendental functions may differ by an ulp
    np.testing.assert_allclose(a, b, rtol=4e-16, atol=4e-16)


def _loop_args(n_paths=200, n_steps=64, shift=True, inc=None, record_every=1, store=True):
    rng = np.random.default_rng(0)
    n = n_steps + 1
    return dict(
        x0=1.0, a=0.3, b=1.2, sigma=0.4, dt=1.0 / n_steps, n_steps=n_steps,
        gain=-rng.uniform(0.5, 1.5, n), shift=rng.normal(size=n) if shift else None,
        offset=np.full(n, 0.1), gamma=rng.uniform(0, 1, n), theta=0.3, seed=9, path0=0,
        n_paths=n_paths, substeps=2, increments=inc, record_every=record_every,
        threshold=1e10, store_increments=store,
    )


@pytest.mark.parametrize("record_every", [1, 4])
def test_closed_loop_agrees_across_backends(record_every):
    args = _loop_args(record_every=record_every, store=record_every == 1)
    a = compiled.lq_closed_loop(**args)
    b = _kernels_py.lq_closed_loop(**args)
    for x, y in zip(a, b):
        if x is None:
            assert y is None
            continue
        np.testing.assert_allclose(x, y, rtol=1e-13, atol=1e-13)


def test_closed_loop_thread_count_is_invisible():
    args = _loop_args(n_paths=513)
    ref = compiled.lq_closed_loop(**args, threads=1)
    for threads in (2, 3, 8):
        out = compiled.lq_closed_loop(**args, threads=threads)
        for x, y in zip(ref, out):
            assert np.array_equal(x, y)


def test_given_increments_are_used():
    inc = np.zeros((10, 64))
    args = _loop_args(n_paths=10, inc=inc, shift=False)
    args["sigma"] = 1.0
    args["gamma"] = None
    st_c, _, lt, dB, _ = compiled.lq_closed_loop(**args)
    st_p, *_ = _kernels_py.lq_closed_loop(**args)
    assert lt is None and np.array_equal(dB, inc)
    assert np.all(st_c == st_c[0]) and np.array_equal(st_c, st_p)


def test_blow_up_marks_nan():
    args = _loop_args(n_paths=5, shift=False)
    args["gain"] = np.full(65, 1e4)  # explosive feedback
    for mod in (compiled, _kernels_py):
        st, ct, lt, dB, blow = mod.lq_closed_loop(**args)
        assert np.all(blow > 0)
        for i, k in enumerate(blow):
            assert np.all(np.isfinite(st[i, :k])) and np.all(np.isnan(st[i, k:]))
        assert np.all(np.isfinite(dB))
