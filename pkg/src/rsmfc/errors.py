"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class RsmfcError(Exception):
    """Base class for every error raised by the package."""


class InvalidArgumentError(RsmfcError, ValueError):
    pass


class EvaluationError(RsmfcError, ArithmeticError):
    """A coefficient or control evaluator returned a non-finite value or failed."""


class BlowUpError(RsmfcError, ArithmeticError):
    """Finite-time explosion of a Riccati solution, an ODE integration or a path.

    Attributes
    ----------
    tau : float or None
        Backward time ``T - t`` of the singularity, when known.
    t : float or None
        Forward time of the singularity or of the offending evaluation.
    last_finite : int or None
        Index of the last grid node holding a finite value.
    partial : object
        Whatever partial result was available (a ``ScalarPath``, an
        ``Ensemble`` or a ``CostEstimate``).
    """

    def __init__(self, message, *, tau=None, t=None, last_finite=None, partial=None):
        super().__init__(message)
        self.tau = tau
        self.t = t
        self.last_finite = last_finite
        self.partial = partial


class EnsembleBlowUpError(BlowUpError):
    """Every path of a particle ensemble crossed the blow-up threshold."""


class ConfigError(RsmfcError, ValueError):
    """Invalid experiment configuration; ``key`` and ``line`` locate the problem."""

    def __init__(self, message, *, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.key = key
        self.line = line
