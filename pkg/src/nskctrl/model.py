"""Physical model description and coupling-structure classification.

The state variables are the relative density deviation ``a = rho/rho_star - 1``
and the velocity ``u``. Physical coefficients (pressure, capillarity, the two
viscosities) enter as polynomials in the offset ``rho - rho_star`` so that
evaluation and differentiation are exact.

Linearizing at the constant state ``(rho_star, 0)`` produces four constants:

    kappa_star = rho_star * kappa(rho_star)
    mu_star    = mu(rho_star) / rho_star
    nu_star    = nu(rho_star) / rho_star
    p_star     = P'(rho_star)

The adjoint potential subsystem is governed, mode by mode, by the 2x2 matrix

    tA = [[0, kappa_star], [-1, -(2*mu_star + nu_star)]]

whose eigenvalues are ``-zeta_plus`` and ``-zeta_minus``. The sign of the
discriminant ``(2*mu_star + nu_star)**2 - 4*kappa_star`` splits the analysis
into three regimes (two real rates, a complex conjugate pair, or a defective
double rate), and :func:`classify` returns the regime together with the
diagonalizing (or near-triangularizing) transform and the zeroth-order
coupling constants of the transformed system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import H1Violation, ValidationError

REGIME_REAL = "RealDistinct"
REGIME_COMPLEX = "ComplexPair"
REGIME_JORDAN = "Jordan"

#: Relative tolerance used to declare the discriminant zero (defective regime).
DEFAULT_CLASSIFY_TOL = 1e-9

# The zeroth-order coupling of the potential subsystem: a rank-one upshift.
_E = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)


@dataclass(frozen=True)
class CoefficientFunction:
    """Polynomial in the offset ``rho - rho_star``, exact arithmetic.

    ``coeffs[k]`` multiplies the k-th power of the offset. Arrays are kept as
    tuples so instances are hashable and immutable.
    """

    coeffs: tuple[float, ...]

    def __post_init__(self):
        if len(self.coeffs) == 0:
            raise ValidationError("CoefficientFunction needs at least one coefficient")
        cleaned = tuple(float(c) for c in self.coeffs)
        if not all(math.isfinite(c) for c in cleaned):
            raise ValidationError(f"non-finite polynomial coefficients: {cleaned}")
        object.__setattr__(self, "coeffs", cleaned)

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def value_at_offset(self, delta):
        """Evaluate at offset ``delta = rho - rho_star`` (scalar or array)."""
        acc = np.zeros_like(np.asarray(delta, dtype=float)) + self.coeffs[-1]
        for c in reversed(self.coeffs[:-1]):
            acc = acc * delta + c
        return acc if np.ndim(delta) else float(acc)

    def derivative(self) -> "CoefficientFunction":
        if self.degree == 0:
            return CoefficientFunction((0.0,))
        return CoefficientFunction(tuple((k + 1) * c for k, c in enumerate(self.coeffs[1:])))

    def rescaled_argument(self, scale: float) -> "CoefficientFunction":
        """Coefficients of ``p(scale * t)`` as a polynomial in ``t``."""
        return CoefficientFunction(tuple(c * scale**k for k, c in enumerate(self.coeffs)))

    def padded_to_degree(self, degree: int) -> "CoefficientFunction":
        if self.degree >= degree:
            return self
        return CoefficientFunction(self.coeffs + (0.0,) * (degree - self.degree))

    @classmethod
    def constant(cls, value: float) -> "CoefficientFunction":
        return cls((float(value),))

    @classmethod
    def from_polynomial_in_rho(cls, rho_coeffs, rho_star: float) -> "CoefficientFunction":
        """Recenter a polynomial given in powers of rho at rho_star.

        Exact binomial expansion: sum_k c_k rho^k with rho = rho_star + delta.
        """
        rho_coeffs = [float(c) for c in rho_coeffs]
        n = len(rho_coeffs)
        out = [0.0] * n
        for k, c in enumerate(rho_coeffs):
            for j in range(k + 1):
                out[j] += c * math.comb(k, j) * rho_star ** (k - j)
        return cls(tuple(out))


@dataclass(frozen=True)
class ModelParams:
    """Reference density, coefficient functions, and the admissible band.

    ``eta`` is the half-width of the density neighborhood ``|rho - rho_star|
    <= eta`` inside which the polynomial coefficient laws are trusted; it must
    keep the density positive, hence ``0 < eta < rho_star``.

    Coefficient arrays are padded on construction so that third derivatives of
    ``P`` and ``kappa`` and second derivatives of ``mu`` and ``nu`` always
    exist as polynomial objects (the smoothness the downstream compositions
    rely on is then structural).
    """

    rho_star: float
    P: CoefficientFunction
    kappa: CoefficientFunction
    mu: CoefficientFunction
    nu: CoefficientFunction
    eta: float

    def __post_init__(self):
        if not (math.isfinite(self.rho_star) and self.rho_star > 0):
            raise ValidationError(f"rho_star must be positive, got {self.rho_star}")
        if not (0 < self.eta < self.rho_star):
            raise ValidationError(f"eta must lie in (0, rho_star), got {self.eta}")
        object.__setattr__(self, "P", self.P.padded_to_degree(3))
        object.__setattr__(self, "kappa", self.kappa.padded_to_degree(3))
        object.__setattr__(self, "mu", self.mu.padded_to_degree(2))
        object.__setattr__(self, "nu", self.nu.padded_to_degree(2))
        kap = self.kappa.value_at_offset(0.0)
        muv = self.mu.value_at_offset(0.0)
        damping = 2 * muv + self.nu.value_at_offset(0.0)
        if kap <= 0 or muv <= 0 or damping <= 0:
            raise H1Violation(
                "positivity hypotheses fail at rho_star: "
                f"kappa={kap}, mu={muv}, 2*mu+nu={damping}"
            )


@dataclass(frozen=True)
class DerivedConstants:
    """Linearization constants at the reference state."""

    kappa_star: float
    mu_star: float
    nu_star: float
    p_star: float

    def __post_init__(self):
        for name in ("kappa_star", "mu_star", "nu_star", "p_star"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} is not finite")

    @property
    def damping(self) -> float:
        """The effective viscous damping 2*mu_star + nu_star."""
        return 2 * self.mu_star + self.nu_star

    @property
    def coupling_matrix(self) -> np.ndarray:
        """The 2x2 matrix tA governing the adjoint potential subsystem."""
        return np.array(
            [[0.0, self.kappa_star], [-1.0, -self.damping]], dtype=complex
        )


def derive_constants(params: ModelParams) -> DerivedConstants:
    """Evaluate the linearization constants, re-checking positivity.

    Raises H1Violation if kappa, mu, or 2*mu + nu is nonpositive at the
    reference density (ModelParams construction normally catches this first).
    """
    kap = params.kappa.value_at_offset(0.0)
    muv = params.mu.value_at_offset(0.0)
    nuv = params.nu.value_at_offset(0.0)
    if kap <= 0 or muv <= 0 or 2 * muv + nuv <= 0:
        raise H1Violation(
            f"positivity hypotheses fail at rho_star: kappa={kap}, mu={muv}, "
            f"2*mu+nu={2 * muv + nuv}"
        )
    return DerivedConstants(
        kappa_star=params.rho_star * kap,
        mu_star=muv / params.rho_star,
        nu_star=nuv / params.rho_star,
        p_star=params.P.derivative().value_at_offset(0.0),
    )


@dataclass(frozen=True)
class StructureClassification:
    """Regime, rates, transform, and coupling constants of the pair system.

    ``transform`` has rows that are left eigenvectors of tA (rows ``(1,
    zeta_plus)`` and ``(1, zeta_minus)``) in the diagonalizable regimes, and
    is the unit lower-triangular matrix ``[[1, 0], [1/zeta, 1]]`` in the
    defective regime. ``transform_inverse`` is its exact inverse.

    ``couplings`` holds the four closed-form coupling constants of the
    transformed system as conventionally printed. These closed forms are not
    reproducible by conjugating the rank-one zeroth-order term (any similarity
    image of it is nilpotent, while the printed values have nonzero trace in
    general), so the classification also carries ``induced_couplings``: the
    actual zeroth-order matrix ``p_star * transform @ E @ transform_inverse``
    of the transformed system, which is what the assembled pair dynamics use.
    ``coupling_defect`` is the max entrywise distance between the two.
    """

    regime: str
    D: complex
    zeta_plus: complex
    zeta_minus: complex
    transform: np.ndarray
    transform_inverse: np.ndarray
    couplings: tuple[complex, complex, complex, complex]
    induced_couplings: np.ndarray
    coupling_defect: float
    discriminant: float
    near_degenerate: bool = field(default=False)

    @property
    def is_diagonalizable(self) -> bool:
        return self.regime != REGIME_JORDAN


def _branch_sqrt(x: float) -> complex:
    """Square root with the convention sqrt(x) = i*sqrt(-x) for x < 0."""
    if x >= 0:
        return complex(math.sqrt(x))
    return complex(0.0, math.sqrt(-x))


def classify(dc: DerivedConstants, tol: float = DEFAULT_CLASSIFY_TOL) -> StructureClassification:
    """Classify the coupling matrix tA and build the pair transform.

    The discriminant ``damping**2 - 4*kappa_star`` is compared against
    ``tol * max(1, damping**2)``; within that band the regime is the defective
    one. Diagonalizable cases closer than 1e3 * tol to the band are flagged
    ``near_degenerate`` (the eigenvector matrix is then poorly conditioned).
    """
    if dc.kappa_star <= 0 or dc.mu_star <= 0 or dc.damping <= 0:
        raise H1Violation(
            f"classification needs positive constants: kappa_star={dc.kappa_star}, "
            f"mu_star={dc.mu_star}, damping={dc.damping}"
        )
    if tol <= 0:
        raise ValidationError(f"classification tolerance must be positive, got {tol}")
    tau = dc.damping
    disc = tau * tau - 4.0 * dc.kappa_star
    scale = max(1.0, tau * tau)
    near_degenerate = False
    if abs(disc) <= tol * scale:
        regime = REGIME_JORDAN
        D = complex(0.0)
        zeta = tau / 2.0
        zeta_plus = zeta_minus = complex(zeta)
        transform = np.array([[1.0, 0.0], [1.0 / zeta, 1.0]], dtype=complex)
        transform_inverse = np.array([[1.0, 0.0], [-1.0 / zeta, 1.0]], dtype=complex)
    else:
        regime = REGIME_REAL if disc > 0 else REGIME_COMPLEX
        near_degenerate = abs(disc) <= 1e3 * tol * scale
        D = _branch_sqrt(disc)
        zeta_plus = (tau - D) / 2.0
        zeta_minus = (tau + D) / 2.0
        transform = np.array([[1.0, zeta_plus], [1.0, zeta_minus]], dtype=complex)
        # det = zeta_minus - zeta_plus = D, nonzero off the defective band.
        transform_inverse = np.array(
            [[zeta_minus, -zeta_plus], [-1.0, 1.0]], dtype=complex
        ) / D

    induced = dc.p_star * transform @ _E @ transform_inverse
    printed = _printed_couplings(regime, zeta_plus, zeta_minus, dc)
    printed_matrix = np.array(
        [[printed[0], printed[1]], [printed[2], printed[3]]], dtype=complex
    )
    defect = float(np.max(np.abs(printed_matrix - induced)))
    return StructureClassification(
        regime=regime,
        D=D,
        zeta_plus=zeta_plus,
        zeta_minus=zeta_minus,
        transform=transform,
        transform_inverse=transform_inverse,
        couplings=printed,
        induced_couplings=induced,
        coupling_defect=defect,
        discriminant=disc,
        near_degenerate=near_degenerate,
    )


def _printed_couplings(regime, zeta_plus, zeta_minus, dc: DerivedConstants):
    p = dc.p_star
    if regime == REGIME_JORDAN:
        zeta = (zeta_plus + zeta_minus).real / 2.0
        return (
            complex(-p / zeta),
            complex(p),
            complex(-p / zeta),
            complex(p / zeta),
        )
    total = zeta_plus + zeta_minus
    a1 = zeta_plus * zeta_minus * p / (total * dc.kappa_star)
    a2 = zeta_minus**2 * p / (total * dc.kappa_star)
    a3 = zeta_plus * p / total
    return (a1, a2, a3, -a3)


def coupling_coefficients(
    cls: StructureClassification, dc: DerivedConstants
) -> tuple[complex, complex, complex, complex]:
    """The four closed-form coupling constants of the transformed system.

    Diagonalizable regimes return the alpha family (note the antisymmetry of
    the last two); the defective regime returns the beta family evaluated at
    zeta = damping / 2. These are the conventional closed forms; see the class
    docstring of StructureClassification for how they relate to the matrix the
    dynamics actually use.
    """
    return _printed_couplings(cls.regime, cls.zeta_plus, cls.zeta_minus, dc)
