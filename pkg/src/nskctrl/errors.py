"""Exception types shared across the package.

Every error carries the process exit code the command-line layer maps it to:
1 for configuration/validation problems, 2 for numerical failures.
"""

from __future__ import annotations


class NskError(Exception):
    """Base class for package errors."""

    exit_code: int = 2


class ValidationError(NskError):
    """An input violates a documented constraint."""

    exit_code = 1


class ParseError(NskError):
    """A scenario document is not valid strict JSON (syntax, duplicate keys)."""

    exit_code = 1


class H1Violation(NskError):
    """Positivity hypotheses on the coefficient functions fail at rho_star."""

    exit_code = 1


class RankMismatch(NskError):
    """A field's component count is incompatible with the requested operator."""

    exit_code = 1


class GridMismatch(NskError):
    """Two fields do not live on the same grid."""

    exit_code = 1


class ShapeMismatch(NskError):
    """Array shapes are inconsistent with the system layout."""

    exit_code = 1


class OutOfDomain(NskError):
    """A time argument lies outside the weight family's domain [0, T)."""

    exit_code = 1


class UnknownSystem(NskError):
    """Unrecognized system kind passed to the block assembler."""

    exit_code = 1


class InvalidZeta(NskError):
    """A diffusion coefficient with nonpositive real part was supplied."""

    exit_code = 1


class ConstructionFailure(NskError):
    """A weight-family ingredient could not be built on the given grid."""

    exit_code = 1


class NoConvergence(NskError):
    """Conjugate gradient hit its iteration cap above tolerance.

    Carries the residual history in ``residuals``.
    """

    def __init__(self, message: str, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals) if residuals is not None else []


class PicardDivergence(NskError):
    """Successive fixed-point iterates stopped contracting.

    Carries the measured contraction factors in ``factors``.
    """

    def __init__(self, message: str, factors=None):
        super().__init__(message)
        self.factors = list(factors) if factors is not None else []


class NeighborhoodExceeded(NskError):
    """The density deviation left the admissible neighborhood.

    Carries the offending max |rho_star * a| in ``max_deviation``.
    """

    def __init__(self, message: str, max_deviation: float = float("nan")):
        super().__init__(message)
        self.max_deviation = max_deviation


class StepRejected(NskError):
    """The nonlinear integrator produced a non-finite state."""


class BallExit(NskError):
    """A fixed-point iterate left the prescribed ball radius."""


class IterationStall(NskError):
    """An eigenvalue iteration hit its cap above the residual tolerance."""
