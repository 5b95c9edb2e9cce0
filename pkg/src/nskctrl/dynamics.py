"""Exact-in-time per-mode integrators for the linear subsystems.

Every system kind is stored as the FORWARD plant: one small complex matrix per
wavevector. Backward propagation always integrates the conjugate-transpose
blocks from terminal data (the dual problem in reversed time), so the pair
kinds are assembled as the conjugate transpose of the backward generator they
are meant to realize.

Conventions shared with the spectral module: wavevector components entering
odd-order couplings are zeroed at the unpaired highest mode so real fields
stay real; |k|^2 keeps it. The homogeneous part of each step is an exact
matrix exponential; sources and controls are folded in with the second-order
exponential-trapezoid rule

    X_{j+1} = P X_j + (h/2) (P F_j + F_{j+1}),       P = exp(h A_k).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

from .errors import (
    GridMismatch,
    InvalidZeta,
    ShapeMismatch,
    UnknownSystem,
    ValidationError,
)
from .model import REGIME_JORDAN, DerivedConstants, StructureClassification, classify
from .spectral import SpectralField, TorusGrid, analyze

SYSTEM_KINDS = ("linearized_nsk", "adjoint_nsk", "sigma_q", "pair_diag", "pair_jordan", "heat")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform nodes t_j = j T / M on [0, T]."""

    T: float
    M: int

    def __post_init__(self):
        if self.T <= 0.0:
            raise ValidationError(f"horizon must be positive, got {self.T}")
        if self.M < 8:
            raise ValidationError(f"need at least 8 steps, got {self.M}")

    @property
    def h(self) -> float:
        return self.T / self.M

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.M + 1)

    @cached_property
    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.M + 1, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w

    @property
    def last_weighted_index(self) -> int:
        """Largest j with t_j <= T - h/2 (weighted quantities stop there)."""
        return self.M - 1


def _mode_vectors(grid: TorusGrid, zero_nyquist: bool = True) -> list[np.ndarray]:
    """Flattened per-mode wavevector components.

    Odd-order couplings take the zero-Nyquist variant (imaginary entries on
    the self-conjugate slot would break real fields); even-order products like
    k_i k_j keep the raw value.
    """
    comps = []
    for ax in range(grid.d):
        k = grid.axis_wavenumbers(ax).copy()
        if zero_nyquist:
            k[grid.N[ax] // 2] = 0.0
        shape = [1] * grid.d
        shape[ax] = grid.N[ax]
        comps.append(np.broadcast_to(k.reshape(shape), grid.N).ravel())
    return comps


def _nsk_blocks(dc: DerivedConstants, grid: TorusGrid) -> np.ndarray:
    kodd = _mode_vectors(grid)
    kraw = _mode_vectors(grid, zero_nyquist=False)
    ksq = grid.k_squared.ravel()
    d = grid.d
    m = 1 + d
    blocks = np.zeros((ksq.size, m, m), dtype=complex)
    grad_sym = dc.p_star + dc.kappa_star * ksq
    for i in range(d):
        blocks[:, 0, 1 + i] = -1j * kodd[i]
        blocks[:, 1 + i, 0] = -1j * kodd[i] * grad_sym
        for j in range(d):
            blocks[:, 1 + i, 1 + j] = -(dc.mu_star + dc.nu_star) * kraw[i] * kraw[j]
        blocks[:, 1 + i, 1 + i] -= dc.mu_star * ksq
    return blocks


def _sigma_q_generator(dc: DerivedConstants, ksq: np.ndarray) -> np.ndarray:
    blocks = np.zeros((ksq.size, 2, 2), dtype=complex)
    blocks[:, 0, 1] = dc.p_star + dc.kappa_star * ksq
    blocks[:, 1, 0] = -ksq
    blocks[:, 1, 1] = -dc.damping * ksq
    return blocks


def _pair_generator(dc: DerivedConstants, cls: StructureClassification,
                    ksq: np.ndarray) -> np.ndarray:
    # exact similarity image of the sigma/q generator, so transformed
    # trajectories satisfy this system to rounding, not just to tolerance
    lam = cls.transform @ dc.coupling_matrix @ cls.transform_inverse
    return ksq[:, None, None] * lam[None] + cls.induced_couplings[None]


@dataclass
class ModeBlockSystem:
    """Per-wavevector forward generator blocks plus a propagator cache."""

    grid: TorusGrid
    kind: str
    blocks: np.ndarray  # (nmodes, m, m) complex
    _propagators: dict = field(default_factory=dict, repr=False)

    @property
    def m(self) -> int:
        return self.blocks.shape[-1]

    @property
    def nmodes(self) -> int:
        return self.blocks.shape[0]

    def propagator(self, h: float, adjoint: bool = False) -> np.ndarray:
        """exp(h A_k) per mode (or exp(h A_k^H)); cached per step size."""
        key = (float(h), bool(adjoint))
        got = self._propagators.get(key)
        if got is not None:
            return got
        blocks = self.blocks.conj().swapaxes(-1, -2) if adjoint else self.blocks
        if self.m == 1:
            out = np.exp(h * blocks)
        else:
            out = np.empty_like(blocks)
            for i in range(self.nmodes):
                out[i] = scipy.linalg.expm(h * blocks[i])
        self._propagators[key] = out
        return out


def assemble_blocks(dc: DerivedConstants, grid: TorusGrid, system: str, *,
                    classification: StructureClassification | None = None,
                    zeta: complex | None = None) -> ModeBlockSystem:
    """Build the per-mode forward plant for one of the supported kinds.

    ``pair_diag``/``pair_jordan`` need the coupling classification (computed
    from ``dc`` when not supplied) and are the conjugate transposes of the
    transformed backward systems. ``heat`` needs a rate ``zeta`` with positive
    real part.
    """
    ksq = grid.k_squared.ravel()
    if system == "linearized_nsk":
        return ModeBlockSystem(grid, system, _nsk_blocks(dc, grid))
    if system == "adjoint_nsk":
        return ModeBlockSystem(grid, system, _nsk_blocks(dc, grid).conj().swapaxes(-1, -2))
    if system == "sigma_q":
        gen = _sigma_q_generator(dc, ksq)
        return ModeBlockSystem(grid, system, gen.conj().swapaxes(-1, -2))
    if system in ("pair_diag", "pair_jordan"):
        cls = classification if classification is not None else classify(dc)
        if system == "pair_diag" and cls.regime == REGIME_JORDAN:
            raise ValidationError("pair_diag needs a diagonalizable coupling classification")
        if system == "pair_jordan" and cls.regime != REGIME_JORDAN:
            raise ValidationError("pair_jordan needs the defective coupling classification")
        gen = _pair_generator(dc, cls, ksq)
        return ModeBlockSystem(grid, system, gen.conj().swapaxes(-1, -2))
    if system == "heat":
        if zeta is None:
            raise InvalidZeta("heat needs an explicit rate zeta")
        z = complex(zeta)
        if z.real <= 0.0:
            raise InvalidZeta(f"heat rate must have positive real part, got {z}")
        return ModeBlockSystem(grid, system, (-z * ksq)[:, None, None].astype(complex))
    raise UnknownSystem(f"unknown system kind {system!r}; expected one of {SYSTEM_KINDS}")


@dataclass
class Trajectory:
    """Node states in integration order.

    ``times[j]`` is the physical time of ``states[j]``: ascending for forward
    runs, descending (from T down to 0) for backward runs.
    """

    grid: TorusGrid
    kind: str
    direction: str
    times: np.ndarray
    states: np.ndarray  # (M+1, nmodes, m) complex

    @property
    def m(self) -> int:
        return self.states.shape[-1]

    def field(self, j: int) -> SpectralField:
        coeffs = self.states[j].T.reshape(self.m, *self.grid.N)
        return SpectralField(self.grid, coeffs.copy())

    def initial_field(self) -> SpectralField:
        return self.field(0)

    def terminal_field(self) -> SpectralField:
        return self.field(len(self.times) - 1)

    def norms(self) -> np.ndarray:
        return np.sqrt(np.sum(np.abs(self.states) ** 2, axis=(1, 2)))


def _forcing_series(sys: ModeBlockSystem, tg: TimeGrid, sources, controls, cutoff):
    """Fold sources (coefficients) and cutoff-masked controls (grid values)."""
    nodes = tg.M + 1
    shape = (nodes, sys.m, *sys.grid.N)
    total = None
    if sources is not None:
        src = np.asarray(sources)
        if src.shape != shape:
            raise ShapeMismatch(f"sources must have shape {shape}, got {src.shape}")
        total = src.astype(complex)
    if controls is not None:
        ctl = np.asarray(controls)  # complex allowed (pair systems)
        if ctl.shape != shape:
            raise ShapeMismatch(f"controls must have shape {shape}, got {ctl.shape}")
        if cutoff is not None:
            mask = np.asarray(cutoff, dtype=float)
            if mask.shape != sys.grid.N:
                raise ShapeMismatch(f"cutoff must have shape {sys.grid.N}, got {mask.shape}")
            ctl = ctl * mask
        injected = analyze(ctl, sys.grid)
        total = injected if total is None else total + injected
    if total is None:
        return None
    return total.reshape(nodes, sys.m, -1).swapaxes(-1, -2)  # (nodes, nmodes, m)


def propagate(sys: ModeBlockSystem, state0: SpectralField, tg: TimeGrid, *,
              direction: str = "forward", sources=None, controls=None,
              cutoff=None) -> Trajectory:
    """March the per-mode blocks over the time grid.

    ``direction="backward"`` integrates the conjugate-transpose blocks from
    terminal data. Sources and controls are indexed in integration order
    (entry 0 belongs to the starting end of the run, so a backward caller
    hands them reversed in physical time).
    """
    if direction not in ("forward", "backward"):
        raise ValidationError(f"direction must be forward or backward, got {direction!r}")
    if state0.grid != sys.grid:
        raise GridMismatch("state grid does not match the assembled blocks")
    if state0.ncomp != sys.m:
        raise ShapeMismatch(f"state has {state0.ncomp} components, blocks need {sys.m}")
    prop = sys.propagator(tg.h, adjoint=direction == "backward")
    forcing = _forcing_series(sys, tg, sources, controls, cutoff)
    states = np.empty((tg.M + 1, sys.nmodes, sys.m), dtype=complex)
    x = state0.coeffs.reshape(sys.m, -1).T.astype(complex)
    states[0] = x
    half_h = 0.5 * tg.h
    for j in range(tg.M):
        x = np.einsum("kij,kj->ki", prop, x)
        if forcing is not None:
            x = x + half_h * (np.einsum("kij,kj->ki", prop, forcing[j]) + forcing[j + 1])
        states[j + 1] = x
    times = tg.nodes if direction == "forward" else tg.T - tg.nodes
    return Trajectory(sys.grid, sys.kind, direction, times, states)


@dataclass(frozen=True)
class DecayReport:
    """Per-mode spectrum of the forward blocks."""

    kind: str
    ksq: np.ndarray
    eigenvalues: np.ndarray  # (nmodes, m)
    abscissa: np.ndarray  # max real part per mode
    top_frequency: np.ndarray  # max |imag part| per mode
    eigenvector_condition: np.ndarray

    @property
    def oscillatory(self) -> np.ndarray:
        return self.top_frequency > 1e-12 * np.maximum(1.0, np.abs(self.abscissa))

    @property
    def defective(self) -> np.ndarray:
        return self.eigenvector_condition > 1e8


def decay_report(sys: ModeBlockSystem) -> DecayReport:
    eigvals, eigvecs = np.linalg.eig(sys.blocks)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        cond = np.linalg.cond(eigvecs)
    return DecayReport(
        kind=sys.kind,
        ksq=sys.grid.k_squared.ravel().copy(),
        eigenvalues=eigvals,
        abscissa=eigvals.real.max(axis=-1),
        top_frequency=np.abs(eigvals.imag).max(axis=-1),
        eigenvector_condition=cond,
    )
