# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: counter-based normals and the LQ closed-loop stepper.

Semantics are defined by ``_kernels_py``; keep the two files in step.
Paths are independent, so work is split over paths only and the output does
not depend on the number of threads.
"""

import numpy as np

from cython.parallel cimport prange
from libc.math cimport sqrt, log, cos, exp, fabs, isfinite, NAN
from libc.stdint cimport uint32_t, uint64_t, int64_t

BACKEND = "cython"

cdef uint32_t PH_M0 = 0xD2511F53
cdef uint32_t PH_M1 = 0xCD9E8D57
cdef uint32_t PH_W0 = 0x9E3779B9
cdef uint32_t PH_W1 = 0xBB67AE85
cdef double TWO_M53 = 1.1102230246251565e-16
cdef double TWO_PI = 6.283185307179586


cdef inline void _philox(uint32_t* c, uint32_t k0, uint32_t k1) noexcept nogil:
    cdef uint64_t p0, p1
    cdef uint32_t c0 = c[0], c1 = c[1], c2 = c[2], c3 = c[3]
    cdef int r
    for r in range(10):
        if r > 0:
            k0 = k0 + PH_W0
            k1 = k1 + PH_W1
        p0 = <uint64_t>PH_M0 * c0
        p1 = <uint64_t>PH_M1 * c2
        c0 = (<uint32_t>(p1 >> 32)) ^ c1 ^ k0
        c1 = <uint32_t>p1
        c2 = (<uint32_t>(p0 >> 32)) ^ c3 ^ k1
        c3 = <uint32_t>p0
    c[0] = c0
    c[1] = c1
    c[2] = c2
    c[3] = c3


cdef inline double _normal(uint64_t seed, uint64_t path, uint64_t step) noexcept nogil:
    cdef uint32_t c[4]
    cdef uint64_t v1, v2
    cdef double u1, u2
    c[0] = <uint32_t>step
    c[1] = <uint32_t>(step >> 32)
    c[2] = <uint32_t>path
    c[3] = <uint32_t>(path >> 32)
    _philox(c, <uint32_t>seed, <uint32_t>(seed >> 32))
    v1 = (((<uint64_t>c[0]) << 32) | c[1]) >> 11
    v2 = (((<uint64_t>c[2]) << 32) | c[3]) >> 11
    u1 = <double>(v1 + 1) * TWO_M53
    u2 = <double>v2 * TWO_M53
    return sqrt(-2.0 * log(u1)) * cos(TWO_PI * u2)


def philox4x32(counter, key):
    """Scalar Philox4x32-10 block (used by the known-answer tests)."""
    cdef uint32_t c[4]
    c[0] = counter[0]
    c[1] = counter[1]
    c[2] = counter[2]
    c[3] = counter[3]
    _philox(c, <uint32_t>key[0], <uint32_t>key[1])
    return c[0], c[1], c[2], c[3]


def normals(seed, path0, Py_ssize_t n_paths, step0, Py_ssize_t n_steps, int threads=1):
    cdef uint64_t s = <uint64_t>(int(seed) & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t p0 = <uint64_t>int(path0)
    cdef uint64_t k0 = <uint64_t>int(step0)
    out = np.empty((n_paths, n_steps), dtype=np.float64)
    cdef double[:, ::1] z = out
    cdef Py_ssize_t i, k
    for i in prange(n_paths, nogil=True, num_threads=max(1, threads), schedule="static"):
        for k in range(n_steps):
            z[i, k] = _normal(s, p0 + <uint64_t>i, k0 + <uint64_t>k)
    return out


def brownian_block(seed, path0, Py_ssize_t n_paths, step0, Py_ssize_t n_steps,
                   Py_ssize_t substeps, double sqrt_dtf, int threads=1):
    cdef uint64_t s = <uint64_t>(int(seed) & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t p0 = <uint64_t>int(path0)
    cdef uint64_t k0 = <uint64_t>int(step0)
    out = np.empty((n_paths, n_steps), dtype=np.float64)
    cdef double[:, ::1] dB = out
    cdef Py_ssize_t i, k, j
    cdef double acc
    for i in prange(n_paths, nogil=True, num_threads=max(1, threads), schedule="static"):
        for k in range(n_steps):
            acc = _normal(s, p0 + <uint64_t>i, (k0 + <uint64_t>k) * <uint64_t>substeps)
            for j in range(1, substeps):
                acc = acc + _normal(s, p0 + <uint64_t>i, (k0 + <uint64_t>k) * <uint64_t>substeps + <uint64_t>j)
            dB[i, k] = sqrt_dtf * acc
    return out


cdef void _one_path(
    Py_ssize_t i, double x0, double a, double b, double sigma, double dt,
    Py_ssize_t n_steps, const double[::1] gain, const double[::1] shift, bint has_shift,
    const double[::1] offset, bint has_offset, const double[::1] gamma, bint has_tilt,
    double theta, uint64_t seed, uint64_t path, Py_ssize_t substeps, double sqrt_dtf,
    const double[:, ::1] inc, bint has_inc, Py_ssize_t record_every, double threshold,
    double[:, ::1] states, double[:, ::1] controls, double[:, ::1] log_tilt,
    double[:, ::1] dB_out, bint store_inc, int64_t[::1] blow,
) noexcept nogil:
    cdef double x = x0
    cdef double lg = 0.0
    cdef double u, dB, ell, acc
    cdef Py_ssize_t k, j, r
    cdef bint dead = False
    for k in range(n_steps + 1):
        if not dead:
            u = gain[k] * x
            if has_shift:
                u = u + shift[k] * exp(-lg)
            if has_offset:
                u = u + offset[k]
            if k % record_every == 0:
                r = k // record_every
                states[i, r] = x
                controls[i, r] = u
                if has_tilt:
                    log_tilt[i, r] = lg
        if k == n_steps:
            break
        if dead and not store_inc:
            break
        if has_inc:
            dB = inc[i, k]
        else:
            acc = _normal(seed, path, <uint64_t>k * <uint64_t>substeps)
            for j in range(1, substeps):
                acc = acc + _normal(seed, path, <uint64_t>k * <uint64_t>substeps + <uint64_t>j)
            dB = sqrt_dtf * acc
        if store_inc:
            dB_out[i, k] = dB
        if dead:
            continue
        if has_tilt:
            ell = gamma[k] * x
            lg = lg + theta * ell * dB - 0.5 * theta * theta * ell * ell * dt
        x = x + (a * x + b * u) * dt + sigma * dB
        if not isfinite(x) or fabs(x) > threshold:
            blow[i] = k + 1
            dead = True


def lq_closed_loop(
    double x0, double a, double b, double sigma, double dt, Py_ssize_t n_steps,
    gain, shift, offset, gamma, double theta, seed, path0, Py_ssize_t n_paths,
    Py_ssize_t substeps, increments, Py_ssize_t record_every, double threshold,
    bint store_increments, int threads=1,
):
    cdef Py_ssize_t n_rec = n_steps // record_every + 1
    states_a = np.full((n_paths, n_rec), np.nan)
    controls_a = np.full((n_paths, n_rec), np.nan)
    cdef bint has_tilt = gamma is not None
    cdef bint has_shift = shift is not None
    cdef bint has_offset = offset is not None
    cdef bint has_inc = increments is not None
    log_tilt_a = np.full((n_paths, n_rec), np.nan) if has_tilt else None
    dB_a = np.empty((n_paths, n_steps)) if store_increments else None
    blow_a = np.full(n_paths, -1, dtype=np.int64)
    dummy1 = np.zeros(1)
    dummy2 = np.zeros((1, 1))

    cdef const double[::1] g = np.ascontiguousarray(gain, dtype=np.float64)
    cdef const double[::1] sh = np.ascontiguousarray(shift, dtype=np.float64) if has_shift else dummy1
    cdef const double[::1] off = np.ascontiguousarray(offset, dtype=np.float64) if has_offset else dummy1
    cdef const double[::1] gm = np.ascontiguousarray(gamma, dtype=np.float64) if has_tilt else dummy1
    cdef const double[:, ::1] inc = np.ascontiguousarray(increments, dtype=np.float64) if has_inc else dummy2
    cdef double[:, ::1] st = states_a
    cdef double[:, ::1] ct = controls_a
    cdef double[:, ::1] lt = log_tilt_a if has_tilt else np.zeros((1, 1))
    cdef double[:, ::1] dbo = dB_a if store_increments else np.zeros((1, 1))
    cdef int64_t[::1] bl = blow_a
    cdef uint64_t s = <uint64_t>(int(seed) & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t p0 = <uint64_t>int(path0)
    cdef double sqrt_dtf = sqrt(dt / substeps)
    cdef Py_ssize_t i

    for i in prange(n_paths, nogil=True, num_threads=max(1, threads), schedule="static"):
        _one_path(i, x0, a, b, sigma, dt, n_steps, g, sh, has_shift, off, has_offset,
                  gm, has_tilt, theta, s, p0 + <uint64_t>i, substeps, sqrt_dtf,
                  inc, has_inc, record_every, threshold, st, ct, lt, dbo,
                  store_increments, bl)
    return states_a, controls_a, log_tilt_a, dB_a, blow_a
