"""Pure numpy implementation of the hot kernels.

Same call signatures as the compiled ``_kernels`` extension. The operation
order inside each arithmetic expression mirrors the Cython source so that the
two backends agree to the last few ulps (transcendental functions come from
different libraries, so bit equality across backends is not promised).
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
_SHIFT11 = np.uint64(11)
_TWO_M53 = 2.0**-53
_TWO_PI = 6.283185307179586

# elements per normals block in the stepping loop
_BLOCK = 1 << 22


def philox4x32(counter, key):
    """Philox4x32-10 block function on uint64 arrays holding 32-bit words.

    ``counter`` is a 4-tuple of broadcastable arrays, ``key`` a pair of ints.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) for c in counter)
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for r in range(10):
        if r:
            k0 = (k0 + _W0) & 0xFFFFFFFF
            k1 = (k1 + _W1) & 0xFFFFFFFF
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _SHIFT32) ^ c1 ^ np.uint64(k0),
            p1 & _MASK32,
            (p0 >> _SHIFT32) ^ c3 ^ np.uint64(k1),
            p0 & _MASK32,
        )
    return c0, c1, c2, c3


def normals(seed, path0, n_paths, step0, n_steps, threads=1):
    """Standard normals ``z[i, k]`` for path ``path0 + i`` and step ``step0 + k``."""
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    paths = np.arange(n_paths, dtype=np.uint64) + np.uint64(path0)
    steps = np.arange(n_steps, dtype=np.uint64) + np.uint64(step0)
    w0, w1, w2, w3 = philox4x32(
        (
            (steps & _MASK32)[None, :],
            (steps >> _SHIFT32)[None, :],
            (paths & _MASK32)[:, None],
            (paths >> _SHIFT32)[:, None],
        ),
        (seed & 0xFFFFFFFF, seed >> 32),
    )
    v1 = ((w0 << _SHIFT32) | w1) >> _SHIFT11
    v2 = ((w2 << _SHIFT32) | w3) >> _SHIFT11
    u1 = (v1 + np.uint64(1)).astype(np.float64) * _TWO_M53
    u2 = v2.astype(np.float64) * _TWO_M53
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)
    return np.ascontiguousarray(np.broadcast_to(z, (n_paths, n_steps)))


def brownian_block(seed, path0, n_paths, step0, n_steps, substeps, sqrt_dtf, threads=1):
    """Increments over ``n_steps`` coarse steps, each the sum of ``substeps`` fine ones."""
    z = normals(seed, path0, n_paths, step0 * substeps, n_steps * substeps, threads)
    z = z.reshape(n_paths, n_steps, substeps)
    acc = z[:, :, 0].copy()
    for s in range(1, substeps):
        acc = acc + z[:, :, s]
    return sqrt_dtf * acc


def lq_closed_loop(
    x0,
    a,
    b,
    sigma,
    dt,
    n_steps,
    gain,
    shift,
    offset,
    gamma,
    theta,
    seed,
    path0,
    n_paths,
    substeps,
    increments,
    record_every,
    threshold,
    store_increments,
    threads=1,
):
    """Euler-Maruyama for ``dx = (a x + b u) dt + sigma dB`` under an affine feedback.

    The control at node k is ``gain[k] * x [+ shift[k] * exp(-log L)] [+ offset[k]]``
    and, when ``gamma`` is given, ``log L`` follows the exact log-Euler step of the
    exponential martingale driven by ``theta * gamma[k] * x``.

    Returns ``(states, controls, log_tilt, increments, blow)``; the first three are
    sampled every ``record_every`` nodes, ``blow[i]`` is the first node where path
    i left the finite region (``-1`` if never).
    """
    n_rec = n_steps // record_every + 1
    states = np.full((n_paths, n_rec), np.nan)
    controls = np.full((n_paths, n_rec), np.nan)
    log_tilt = np.full((n_paths, n_rec), np.nan) if gamma is not None else None
    dB_out = np.empty((n_paths, n_steps)) if store_increments else None
    blow = np.full(n_paths, -1, dtype=np.int64)
    sqrt_dtf = np.sqrt(dt / substeps)

    x = np.full(n_paths, float(x0))
    lg = np.zeros(n_paths)
    alive = np.ones(n_paths, dtype=bool)
    chunk = max(1, _BLOCK // max(1, n_paths * substeps))
    block = None
    block_start = 0
    for k in range(n_steps + 1):
        u = gain[k] * x
        if shift is not None:
            u = u + shift[k] * np.exp(-lg)
        if offset is not None:
            u = u + offset[k]
        if k % record_every == 0:
            r = k // record_every
            states[alive, r] = x[alive]
            controls[alive, r] = u[alive]
            if log_tilt is not None:
                log_tilt[alive, r] = lg[alive]
        if k == n_steps:
            break
        if increments is not None:
            dB = increments[:, k]
        else:
            if block is None or k - block_start >= block.shape[1]:
                block_start = k
                m = min(chunk, n_steps - k)
                block = brownian_block(seed, path0, n_paths, k, m, substeps, sqrt_dtf)
            dB = block[:, k - block_start]
        if dB_out is not None:
            dB_out[:, k] = dB
        if gamma is not None:
            ell = gamma[k] * x
            lg = lg + theta * ell * dB - 0.5 * theta * theta * ell * ell * dt
        x = x + (a * x + b * u) * dt + sigma * dB
        bad = alive & (~np.isfinite(x) | (np.abs(x) > threshold))
        if bad.any():
            blow[bad] = k + 1
            alive &= ~bad
            x[bad] = np.nan
            lg[bad] = np.nan
            if not alive.any() and not store_increments:
                break
    return states, controls, log_tilt, dB_out, blow
