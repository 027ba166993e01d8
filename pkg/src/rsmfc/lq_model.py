"""Scalar mean-field coefficient sets and the linear-quadratic instance.

All evaluators take ``(t, x, y, u)`` (``h`` takes ``(x, y)``), where ``y`` is
the mean of the state, and must accept numpy arrays elementwise. Constant
partials may return Python scalars; callers broadcast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import EvaluationError, InvalidArgumentError

Fn4 = Callable[..., object]


def _zero4(t, x, y, u):
    return 0.0


def _zero2(x, y):
    return 0.0


@dataclass(frozen=True)
class LqParams:
    """Constants of ``dx = (a x + b u) dt + sigma dB``, cost ``u^2/2`` and ``x_T^2/2 + mu E[x_T]``."""

    a: float = 0.0
    b: float = 1.0
    sigma: float = 1e-2
    theta: float = 1e-5
    mu: float = 0.0
    x0: float = 1.0
    t_end: float = 1.0

    def __post_init__(self):
        for name in ("a", "b", "sigma", "theta", "mu", "x0", "t_end"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float, np.floating, np.integer)):
                raise InvalidArgumentError(f"{name} must be a real number, got {v!r}")
            if not math.isfinite(v):
                raise InvalidArgumentError(f"{name} must be finite, got {v!r}")
            object.__setattr__(self, name, float(v))
        if self.sigma < 0:
            raise InvalidArgumentError(f"sigma must be >= 0, got {self.sigma}")
        if self.t_end <= 0:
            raise InvalidArgumentError(f"t_end must be > 0, got {self.t_end}")

    def replace(self, **changes) -> "LqParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class CoefficientSet:
    """Drift ``b``, diffusion ``sigma``, running cost ``f`` and terminal cost ``h`` with partials.

    Subscripts name the differentiation variable (``x`` state, ``y`` state
    mean, ``u`` control). ``lq`` is set by :func:`lq_coefficients` and lets the
    simulator pick the compiled closed-loop kernel.
    """

    b: Fn4
    sigma: Fn4
    f: Fn4
    h: Callable
    b_x: Fn4 = _zero4
    b_y: Fn4 = _zero4
    b_xx: Fn4 = _zero4
    sigma_x: Fn4 = _zero4
    sigma_y: Fn4 = _zero4
    sigma_xx: Fn4 = _zero4
    f_x: Fn4 = _zero4
    f_y: Fn4 = _zero4
    f_u: Fn4 = _zero4
    f_xx: Fn4 = _zero4
    h_x: Callable = _zero2
    h_y: Callable = _zero2
    h_xx: Callable = _zero2
    lq: LqParams | None = field(default=None, compare=False)


def lq_coefficients(params: LqParams) -> CoefficientSet:
    a, b, s, mu = params.a, params.b, params.sigma, params.mu
    return CoefficientSet(
        b=lambda t, x, y, u: a * x + b * u,
        sigma=lambda t, x, y, u: s,
        f=lambda t, x, y, u: 0.5 * u * u,
        h=lambda x, y: 0.5 * x * x + mu * y,
        b_x=lambda t, x, y, u: a,
        f_u=lambda t, x, y, u: u,
        h_x=lambda x, y: x,
        h_y=lambda x, y: mu,
        h_xx=lambda x, y: 1.0,
        lq=params,
    )


# (partial name, parent name, variable index into (t, x, y, u)); second-order
# partials are differenced from the first-order evaluator.
_CHECKS = (
    ("b_x", "b", 1), ("b_y", "b", 2), ("sigma_x", "sigma", 1), ("sigma_y", "sigma", 2),
    ("f_x", "f", 1), ("f_y", "f", 2), ("f_u", "f", 3),
    ("b_xx", "b_x", 1), ("sigma_xx", "sigma_x", 1), ("f_xx", "f_x", 1),
    ("h_x", "h", 1), ("h_y", "h", 2), ("h_xx", "h_x", 1),
)


@dataclass(frozen=True)
class DerivativeReport:
    max_discrepancy: float
    per_partial: dict
    worst: str
    samples: int
    box: tuple = (-5.0, 5.0)


def _call(coeffs, name, point):
    fn = getattr(coeffs, name)
    args = point[1:3] if name.startswith("h") else point
    val = float(fn(*args))
    if not math.isfinite(val):
        raise EvaluationError(f"{name} is not finite at (t, x, y, u) = {tuple(point)}")
    return val


def check_derivatives(coeffs: CoefficientSet, samples: int, seed: int, eps: float = 1e-5) -> DerivativeReport:
    """Compare each declared partial with a central difference of its parent.

    Points are drawn uniformly from ``[-5, 5]^4`` in ``(t, x, y, u)``.
    """
    if samples < 1:
        raise InvalidArgumentError(f"samples must be >= 1, got {samples}")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-5.0, 5.0, size=(samples, 4))
    worst = {name: 0.0 for name, _, _ in _CHECKS}
    for p in pts:
        for name, parent, var in _CHECKS:
            hi, lo = p.copy(), p.copy()
            hi[var] += eps
            lo[var] -= eps
            fd = (_call(coeffs, parent, hi) - _call(coeffs, parent, lo)) / (2 * eps)
            worst[name] = max(worst[name], abs(_call(coeffs, name, p) - fd))
    name = max(worst, key=worst.get)
    return DerivativeReport(worst[name], worst, name, samples)
