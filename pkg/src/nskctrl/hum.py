"""Penalized null-control synthesis on the interior-controlled linear plants.

The controllability Gramian is assembled from the same propagation code that
replays the controlled trajectory: an adjoint run from weighted terminal data,
a cutoff-masked read-off, and a forward run from zero. With the trapezoid
forcing rule both paths reduce to the identical weighted sum of propagator
powers, so the multiplier found by conjugate gradients reproduces its terminal
state on replay to rounding.

Two cost geometries are supported. ``plain`` weighs the control uniformly in
time; ``carleman`` weighs the squared control by the normalized envelope

    rho(t) = exp(1.5 * s * (theta(t) - 1)),

which blows up at both ends of the horizon and equals one on the plateau of
``theta``. Controls then shut down smoothly near t = 0 and t = T. The final
node always gets zero weight in carleman mode (theta diverges there).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ModeBlockSystem, TimeGrid, Trajectory, assemble_blocks, propagate
from .errors import (
    GridMismatch,
    NoConvergence,
    PicardDivergence,
    ShapeMismatch,
    ValidationError,
)
from .model import REGIME_JORDAN, DerivedConstants, StructureClassification
from .spectral import SpectralField, TorusGrid, synthesize
from .weights import ControlRegion, WeightSet, theta

WEIGHT_MODES = ("plain", "carleman")
TERMINAL_WEIGHTS = ("l2", "dual")

# squared-control envelope exponent per unit of s (theta - 1); twice the 3/4
# factor that scales the weight in the observability estimates
COST_ENVELOPE_RATE = 1.5
_FLUSH = -700.0


def _state_of(fld: SpectralField) -> np.ndarray:
    """Field coefficients as a per-mode stack (nmodes, ncomp)."""
    return fld.coeffs.reshape(fld.ncomp, -1).T.copy()


def _field_of(grid: TorusGrid, state: np.ndarray) -> SpectralField:
    m = state.shape[-1]
    return SpectralField(grid, state.T.reshape(m, *grid.N).copy())


def _terminal_weight_array(system: ModeBlockSystem, mode: str) -> np.ndarray:
    ksq = system.grid.k_squared.ravel()
    w = np.ones((system.nmodes, system.m))
    if mode == "dual":
        # negative-order product space: density slot two orders down,
        # velocity slots one
        w[:, 0] = (1.0 + ksq) ** -2.0
        w[:, 1:] = ((1.0 + ksq) ** -1.0)[:, None]
    return w


def _inverse_envelope(tg: TimeGrid, mode: str, weights: WeightSet | None) -> np.ndarray:
    """Per-node 1/rho; all ones in plain mode, zero at the final node otherwise."""
    inv = np.ones(tg.M + 1)
    if mode != "carleman":
        return inv
    tp = weights.theta_params
    for j, t in enumerate(tg.nodes):
        if t >= tp.T:
            inv[j] = 0.0
            continue
        lg = -COST_ENVELOPE_RATE * weights.s * (theta(float(t), tp) - 1.0)
        inv[j] = math.exp(lg) if lg > _FLUSH else 0.0
    return inv


@dataclass
class HumProblem:
    """One penalized null-control problem for a linear mode-block plant.

    ``cutoff`` holds grid values of the spatial control window; the synthesized
    control carries one factor of it and the plant applies the second, so the
    quadratic form pairs adjoint states against ``cutoff**2``. ``epsilon`` is
    the penalization strength: the achieved terminal state is exactly
    ``-epsilon`` times the multiplier, up to the conjugate-gradient residual.
    """

    system: ModeBlockSystem
    cutoff: np.ndarray
    tg: TimeGrid
    epsilon: float
    cg_tol: float = 1e-8
    cg_max_iters: int = 500
    terminal_weight: str = "l2"
    weight_mode: str = "plain"
    weights: WeightSet | None = None
    _precond: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.cutoff = np.asarray(self.cutoff, dtype=float)
        if self.cutoff.shape != self.system.grid.N:
            raise ShapeMismatch(
                f"cutoff must have shape {self.system.grid.N}, got {self.cutoff.shape}")
        if not np.any(self.cutoff):
            raise ValidationError("cutoff vanishes identically; nothing can be controlled")
        if self.epsilon <= 0.0:
            raise ValidationError(f"penalization must be positive, got {self.epsilon}")
        if self.terminal_weight not in TERMINAL_WEIGHTS:
            raise ValidationError(
                f"terminal weight must be one of {TERMINAL_WEIGHTS}, got {self.terminal_weight!r}")
        if self.terminal_weight == "dual" and self.system.m != 1 + self.system.grid.d:
            raise ValidationError("dual terminal weight applies to the full density/velocity stack")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValidationError(
                f"weight mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}")
        if self.weight_mode == "carleman":
            if self.weights is None:
                raise ValidationError("carleman mode needs a WeightSet")
            if self.weights.grid != self.system.grid:
                raise GridMismatch("weight set lives on a different grid")
            if abs(self.weights.T - self.tg.T) > 1e-12 * self.tg.T:
                raise ValidationError(
                    f"weight horizon {self.weights.T} does not match time grid {self.tg.T}")
        self.terminal_weights = _terminal_weight_array(self.system, self.terminal_weight)
        self.inverse_envelope = _inverse_envelope(self.tg, self.weight_mode, self.weights)


def _w_dot(p: HumProblem, a: np.ndarray, b: np.ndarray) -> float:
    """Terminal inner product; real by symmetry of the weights."""
    return float(np.real(np.sum(p.terminal_weights * a * np.conj(b))))


def _adjoint_window_states(p: HumProblem, z: np.ndarray) -> np.ndarray:
    """Grid values of the adjoint run from weighted data, forward node order."""
    grid = p.system.grid
    bwd = propagate(p.system, _field_of(grid, p.terminal_weights * z), p.tg,
                    direction="backward")
    coeffs = bwd.states[::-1].swapaxes(1, 2).reshape(p.tg.M + 1, p.system.m, *grid.N)
    return synthesize(coeffs, grid)


def _controls_of(p: HumProblem, z: np.ndarray):
    """Control series for a multiplier, with its cost and plain norm.

    Cost is the envelope-weighted squared size rho * |v|^2 evaluated as
    (1/rho) * |cutoff * Y|^2, which stays finite at the terminal node where
    rho diverges and v vanishes.
    """
    grid = p.system.grid
    masked = p.cutoff * _adjoint_window_states(p, z)  # (M+1, m, *N)
    space_axes = tuple(range(1, 2 + grid.d))
    sq = np.sum(np.abs(masked) ** 2, axis=space_axes) / grid.npoints
    inv = p.inverse_envelope
    v = inv.reshape(-1, *([1] * (1 + grid.d))) * masked
    w = p.tg.trapezoid_weights
    cost = float(np.sum(w * inv * sq))
    vsq = np.sum(np.abs(v) ** 2, axis=space_axes) / grid.npoints
    norm = math.sqrt(float(np.sum(w * vsq)))
    return v, cost, norm


def _apply_gramian(p: HumProblem, z: np.ndarray) -> np.ndarray:
    grid = p.system.grid
    masked = p.cutoff * _adjoint_window_states(p, z)
    v = p.inverse_envelope.reshape(-1, *([1] * (1 + grid.d))) * masked
    fwd = propagate(p.system, SpectralField.zero(grid, p.system.m), p.tg,
                    controls=v, cutoff=p.cutoff)
    return fwd.states[-1]


def gramian_apply(p: HumProblem, data: SpectralField) -> SpectralField:
    """Apply the penalization-free control Gramian to terminal adjoint data."""
    if data.grid != p.system.grid:
        raise GridMismatch("data grid does not match the plant")
    if data.ncomp != p.system.m:
        raise ShapeMismatch(f"data has {data.ncomp} components, plant has {p.system.m}")
    return _field_of(p.system.grid, _apply_gramian(p, _state_of(data)))


def _preconditioner(p: HumProblem) -> np.ndarray:
    """Per-mode inverse of the full-window surrogate c * D_k W_k + eps I.

    D_k is the closed-form Gramian of the plant with the cutoff replaced by
    its mean square c: the same propagator-power sum, one small matrix per
    mode. Inverting it mode by mode captures the stiffness spread across
    wavevectors; the spatial localization is left to the Krylov iteration.
    """
    if p._precond is not None:
        return p._precond
    m = p.system.m
    prop = p.system.propagator(p.tg.h)
    w = p.tg.trapezoid_weights * p.inverse_envelope
    q = np.broadcast_to(np.eye(m, dtype=complex), prop.shape).copy()
    d = np.zeros_like(q)
    for j in range(p.tg.M, -1, -1):
        if w[j] != 0.0:
            d += w[j] * (q @ q.conj().swapaxes(-1, -2))
        if j > 0:
            q = prop @ q
    cbar = float(np.mean(p.cutoff ** 2))
    a = cbar * (d * p.terminal_weights[:, None, :]) + p.epsilon * np.eye(m)[None]
    p._precond = np.linalg.inv(a)
    return p._precond


def _pcg(p: HumProblem, b: np.ndarray):
    """Preconditioned conjugate gradients for (Gramian + eps) z = b.

    Both the operator and the preconditioner are self-adjoint and positive in
    the terminal inner product, so the standard recurrence applies verbatim
    with that product in place of the Euclidean one.
    """
    kmat = _preconditioner(p)
    bnorm = math.sqrt(_w_dot(p, b, b))
    z = np.zeros_like(b)
    r = b.copy()
    y = np.einsum("kij,kj->ki", kmat, r)
    delta = _w_dot(p, r, y)
    d = y
    residuals: list[float] = []
    for it in range(1, p.cg_max_iters + 1):
        q = _apply_gramian(p, d) + p.epsilon * d
        dq = _w_dot(p, d, q)
        if dq <= 0.0:
            raise NoConvergence("curvature lost; the Gramian is not acting positive", residuals)
        alpha = delta / dq
        z = z + alpha * d
        r = r - alpha * q
        res = math.sqrt(max(_w_dot(p, r, r), 0.0)) / bnorm
        residuals.append(res)
        if res <= p.cg_tol:
            return z, it, residuals
        y = np.einsum("kij,kj->ki", kmat, r)
        delta_new = _w_dot(p, r, y)
        d = y + (delta_new / delta) * d
        delta = delta_new
    raise NoConvergence(
        f"no residual below {p.cg_tol} within {p.cg_max_iters} iterations", residuals)


@dataclass
class ControlledTrajectory:
    """A solved control problem: trajectory, control series and diagnostics.

    ``controls[j]`` holds grid values at node j and already carries one cutoff
    factor, so it vanishes exactly wherever the cutoff does; the plant applies
    the second factor on injection. ``multiplier`` is the conjugate-gradient
    solution; the terminal state equals ``-epsilon * multiplier`` up to the
    final residual.
    """

    trajectory: Trajectory
    controls: np.ndarray  # (M+1, m, *N) grid values
    multiplier: np.ndarray  # (nmodes, m)
    terminal_norm: float
    control_norm: float
    control_cost: float
    cg_iterations: int
    residuals: list[float] = field(default_factory=list)
    picard_factors: list[float] = field(default_factory=list)
    picard_iterations: int = 0

    @property
    def initial_norm(self) -> float:
        return float(np.linalg.norm(self.trajectory.states[0]))

    def terminal_field(self) -> SpectralField:
        return self.trajectory.terminal_field()


def solve_null_control(p: HumProblem, initial: SpectralField,
                       sources=None) -> ControlledTrajectory:
    """Drive the plant from ``initial`` toward zero at the final time.

    ``sources`` (optional) are coefficient values (M+1, m, *N) of an external
    forcing, included in both the free evolution and the controlled replay.
    Raises NoConvergence, carrying the residual history, if the conjugate
    gradients stall above ``cg_tol``.
    """
    if initial.grid != p.system.grid:
        raise GridMismatch("initial data grid does not match the plant")
    if initial.ncomp != p.system.m:
        raise ShapeMismatch(
            f"initial data has {initial.ncomp} components, plant has {p.system.m}")
    free = propagate(p.system, initial, p.tg, sources=sources)
    b = -free.states[-1]
    if not np.any(b):
        shape = (p.tg.M + 1, p.system.m, *p.system.grid.N)
        return ControlledTrajectory(
            trajectory=free,
            controls=np.zeros(shape, dtype=complex),
            multiplier=np.zeros_like(b),
            terminal_norm=0.0,
            control_norm=0.0,
            control_cost=0.0,
            cg_iterations=0,
        )
    z, iters, residuals = _pcg(p, b)
    v, cost, cnorm = _controls_of(p, z)
    traj = propagate(p.system, initial, p.tg, sources=sources,
                     controls=v, cutoff=p.cutoff)
    return ControlledTrajectory(
        trajectory=traj,
        controls=v,
        multiplier=z,
        terminal_norm=float(np.linalg.norm(traj.states[-1])),
        control_norm=cnorm,
        control_cost=cost,
        cg_iterations=iters,
        residuals=residuals,
    )


def _pair_log_metric(states: np.ndarray, tg: TimeGrid, grid: TorusGrid,
                     mode: str, weights: WeightSet | None) -> float:
    """Log of the time-integrated third-order-weighted size of a pair stack.

    Plain mode integrates over every node; carleman mode adds the envelope
    rho and therefore stops at the last weighted node, where the envelope is
    still finite. Returned in the log domain because the envelope values
    overflow doubles long before the metric ratios stop being meaningful.
    """
    hw = (1.0 + grid.k_squared.ravel()) ** 3
    sq = np.sum(np.abs(states) ** 2 * hw[None, :, None], axis=(1, 2))
    w = tg.trapezoid_weights
    if mode != "carleman":
        total = float(np.sum(w * sq))
        return -math.inf if total == 0.0 else 0.5 * math.log(total)
    tp = weights.theta_params
    terms = []
    for j in range(tg.last_weighted_index + 1):
        if sq[j] == 0.0:
            continue
        lg_rho = COST_ENVELOPE_RATE * weights.s * (theta(float(tg.nodes[j]), tp) - 1.0)
        terms.append(math.log(w[j]) + lg_rho + math.log(sq[j]))
    if not terms:
        return -math.inf
    return 0.5 * float(np.logaddexp.reduce(np.array(terms)))


def cascaded_pair_control(classification: StructureClassification,
                          dc: DerivedConstants,
                          region: ControlRegion,
                          tg: TimeGrid,
                          initial: SpectralField,
                          sources=None, *,
                          epsilon: float = 1e-8,
                          cg_tol: float = 1e-8,
                          cg_max_iters: int = 600,
                          picard_tol: float = 1e-6,
                          max_picard: int = 30,
                          weight_mode: str = "plain",
                          weights: WeightSet | None = None) -> ControlledTrajectory:
    """Null-control the transformed pair by freezing its couplings.

    Each sweep treats the coupling terms (and any external sources) as known
    forcing built from the previous iterate and solves two scalar dissipative
    null-control problems with the same inner cutoff, one per component with
    its conjugated rate. Successive iterates are compared in the metric of
    ``_pair_log_metric``; the per-sweep ratios are reported as contraction
    factors. Raises PicardDivergence, carrying the factor history, when the
    ratios stop contracting or the sweep budget runs out.

    After convergence the coupled plant is replayed once with the found
    controls, so the reported trajectory and terminal norm come from the full
    pair system rather than the frozen-coupling one.
    """
    grid = initial.grid
    if initial.ncomp != 2:
        raise ShapeMismatch(f"pair data needs two components, got {initial.ncomp}")
    region.validate_on(grid)
    kind = "pair_jordan" if classification.regime == REGIME_JORDAN else "pair_diag"
    plant = assemble_blocks(dc, grid, kind, classification=classification)
    chi0 = region.chi0_on(grid)
    rates = (np.conj(classification.zeta_plus), np.conj(classification.zeta_minus))
    problems = [
        HumProblem(assemble_blocks(dc, grid, "heat", zeta=rates[c]),
                   chi0, tg, epsilon, cg_tol=cg_tol, cg_max_iters=cg_max_iters,
                   weight_mode=weight_mode, weights=weights)
        for c in range(2)
    ]
    # frozen couplings: everything the scalar heat stages do not carry, i.e.
    # the zero-order induced matrix plus, in the defective regime, the
    # second-order off-diagonal term. The zero-order part is a similarity
    # image of a traceless rank-one matrix, hence nilpotent, so the frozen
    # fixed-point map annihilates its large-scale feedback in two sweeps.
    ksq = grid.k_squared.ravel()
    frozen = plant.blocks.copy()
    for c in range(2):
        frozen[:, c, c] += rates[c] * ksq
    nodes = tg.M + 1
    ext = None
    ext_states = None
    if sources is not None:
        ext = np.asarray(sources)
        if ext.shape != (nodes, 2, *grid.N):
            raise ShapeMismatch(
                f"sources must have shape {(nodes, 2, *grid.N)}, got {ext.shape}")
        ext_states = ext.reshape(nodes, 2, -1).swapaxes(-1, -2)
    components = [SpectralField(grid, initial.coeffs[c:c + 1].copy()) for c in range(2)]

    prev = np.zeros((nodes, plant.nmodes, 2), dtype=complex)
    prev_logd = None
    factors: list[float] = []
    results = None
    total_cg = 0
    sweeps = 0
    converged = False
    for sweeps in range(1, max_picard + 1):
        # both stages read the previous sweep only; resolving one coupling
        # with the fresh partner trajectory looks like an optimization but
        # breaks the nilpotency of the zero-order feedback loop
        results = []
        for c in range(2):
            source = (frozen[None, :, c, 0] * prev[:, :, 0]
                      + frozen[None, :, c, 1] * prev[:, :, 1])
            if ext_states is not None:
                source = source + ext_states[:, :, c]
            series = np.ascontiguousarray(source).reshape(nodes, 1, *grid.N)
            res = solve_null_control(problems[c], components[c], sources=series)
            results.append(res)
        total_cg += sum(res.cg_iterations for res in results)
        new = np.stack([res.trajectory.states[:, :, 0] for res in results], axis=-1)
        logd = _pair_log_metric(new - prev, tg, grid, weight_mode, weights)
        ref = _pair_log_metric(new, tg, grid, weight_mode, weights)
        if prev_logd is not None and math.isfinite(logd) and math.isfinite(prev_logd):
            factors.append(math.exp(logd - prev_logd))
        prev = new
        prev_logd = logd
        if logd == -math.inf or (math.isfinite(ref) and logd <= math.log(picard_tol) + ref):
            converged = True
            break
        # flat factors near the inner-solver noise floor are convergence in
        # disguise; call it divergence only while the distance is still large
        still_large = math.isfinite(ref) and logd > math.log(1e-2) + ref
        if still_large and len(factors) >= 2 and factors[-1] >= 1.0 and factors[-2] >= 1.0:
            raise PicardDivergence(
                "successive frozen-coupling sweeps stopped contracting", factors)
    if not converged:
        raise PicardDivergence(
            f"no contraction below {picard_tol} within {max_picard} sweeps", factors)

    v = np.concatenate([res.controls for res in results], axis=1)
    final = propagate(plant, initial, tg, sources=ext, controls=v, cutoff=chi0)
    return ControlledTrajectory(
        trajectory=final,
        controls=v,
        multiplier=np.concatenate([res.multiplier for res in results], axis=1),
        terminal_norm=float(np.linalg.norm(final.states[-1])),
        control_norm=math.sqrt(sum(res.control_norm ** 2 for res in results)),
        control_cost=sum(res.control_cost for res in results),
        cg_iterations=total_cg,
        residuals=list(results[0].residuals) + list(results[1].residuals),
        picard_factors=factors,
        picard_iterations=sweeps,
    )
