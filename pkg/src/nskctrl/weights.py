"""Weight machinery for observability estimates.

Three ingredients, all immutable after construction:

* a smooth spatial profile ``psi`` with values pinned to [6, 7] whose gradient
  only vanishes inside the inner control box (built as the spectral
  antiderivative of a compactly supported bump),
* nested smooth cutoffs chi0 <= chi supported in the control region,
* a temporal envelope ``theta`` that starts at 2, rests at 1, then blows up
  like 1/(T - t), glued with a quintic C^2 bridge.

Everything that can overflow (the power term with exponent m = s*lambda^2 *
e^(2*lambda), the exponential weight e^(-s*phi)) is handled in log domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConstructionFailure, OutOfDomain, RankMismatch, ValidationError
from .spectral import SpectralField, TorusGrid, differentiate, evaluate_at

PSI_LO = 6.05
PSI_HI = 6.95
_FLUSH = -700.0  # exp() of anything below this is flushed to zero


def smoothstep(t):
    """C-infinity monotone ramp: 0 for t <= 0, 1 for t >= 1."""
    arr = np.asarray(t, dtype=float)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    out = np.zeros_like(arr)
    out[arr >= 1.0] = 1.0
    mid = (arr > 0.0) & (arr < 1.0)
    if mid.any():
        a = np.exp(-1.0 / arr[mid])
        b = np.exp(-1.0 / (1.0 - arr[mid]))
        out[mid] = a / (a + b)
    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class Box:
    """Axis-aligned open box; scalars are promoted to 1-d."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if len(lo) != len(hi):
            raise ValidationError(f"box corners disagree in dimension: {lo} vs {hi}")
        if any(b <= a for a, b in zip(lo, hi)):
            raise ValidationError(f"box needs positive width on every axis: {lo}, {hi}")

    @property
    def d(self) -> int:
        return len(self.lo)

    def width(self, axis: int) -> float:
        return self.hi[axis] - self.lo[axis]

    def center(self, axis: int) -> float:
        return 0.5 * (self.lo[axis] + self.hi[axis])

    def shifted(self, delta) -> "Box":
        delta = np.atleast_1d(np.asarray(delta, dtype=float))
        return Box(tuple(a + dx for a, dx in zip(self.lo, delta)),
                   tuple(b + dx for b, dx in zip(self.hi, delta)))

    def contains(self, points) -> np.ndarray:
        """Open-box membership for stacked coordinates of shape (d, ...)."""
        pts = _stacked(points, self.d)
        inside = np.ones(pts.shape[1:], dtype=bool)
        for j in range(self.d):
            inside &= (pts[j] > self.lo[j]) & (pts[j] < self.hi[j])
        return inside


def _stacked(points, d: int) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if d == 1 and (pts.ndim == 0 or pts.shape[0] != 1):
        pts = pts[None]
    if pts.shape[0] != d:
        raise RankMismatch(f"expected {d} stacked coordinate arrays, got shape {pts.shape}")
    return pts


def _box_cutoff(points, inner: Box, outer: Box, inset: float) -> np.ndarray:
    """Smooth plateau: 1 on ``inner``, 0 outside ``outer`` shrunk by ``inset``."""
    pts = _stacked(points, inner.d)
    value = np.ones(pts.shape[1:], dtype=float)
    for j in range(inner.d):
        a = outer.lo[j] + inset * (inner.lo[j] - outer.lo[j])
        b = inner.lo[j]
        c = inner.hi[j]
        e = outer.hi[j] - inset * (outer.hi[j] - inner.hi[j])
        x = pts[j]
        value = value * smoothstep((x - a) / (b - a)) * smoothstep((e - x) / (e - c))
    return value


@dataclass(frozen=True)
class ControlRegion:
    """Strictly nested open boxes omega0 < omega1 < omega on one period.

    ``chi0`` is 1 on omega0 and supported strictly inside omega1; ``chi`` is 1
    on omega1 and supported strictly inside omega. Both are smooth, valued in
    [0, 1], and evaluable at arbitrary points (coordinates are taken as given,
    so callers keep them inside one period).
    """

    omega0: Box
    omega1: Box
    omega: Box
    ramp_inset: float = 0.25

    def __post_init__(self):
        if not (self.omega0.d == self.omega1.d == self.omega.d):
            raise ValidationError("nested boxes must share one dimension")
        _require_nested(self.omega0, self.omega1, "omega0", "omega1")
        _require_nested(self.omega1, self.omega, "omega1", "omega")
        if not 0.0 < self.ramp_inset < 0.5:
            raise ValidationError(f"ramp inset must sit in (0, 0.5), got {self.ramp_inset}")

    @classmethod
    def from_widths(cls, center, inner, middle, outer) -> "ControlRegion":
        """Concentric boxes around ``center`` with the given per-axis widths."""
        ctr = np.atleast_1d(np.asarray(center, dtype=float))

        def box(widths):
            w = np.broadcast_to(np.atleast_1d(np.asarray(widths, dtype=float)), ctr.shape)
            return Box(tuple(ctr - w / 2), tuple(ctr + w / 2))

        return cls(box(inner), box(middle), box(outer))

    @property
    def d(self) -> int:
        return self.omega0.d

    def chi0(self, points) -> np.ndarray:
        return _box_cutoff(points, self.omega0, self.omega1, self.ramp_inset)

    def chi(self, points) -> np.ndarray:
        return _box_cutoff(points, self.omega1, self.omega, self.ramp_inset)

    def chi0_on(self, grid: TorusGrid) -> np.ndarray:
        return self.chi0(np.stack(grid.meshgrid()))

    def chi_on(self, grid: TorusGrid) -> np.ndarray:
        return self.chi(np.stack(grid.meshgrid()))

    def validate_on(self, grid: TorusGrid) -> None:
        if self.d != grid.d:
            raise ValidationError(f"region is {self.d}-dimensional, grid is {grid.d}-dimensional")
        for j in range(self.d):
            if self.omega.lo[j] < 0.0 or self.omega.hi[j] > grid.L[j]:
                raise ValidationError(
                    f"axis {j}: control box [{self.omega.lo[j]}, {self.omega.hi[j]}] must lie "
                    f"inside one period [0, {grid.L[j]}] (wrap-around boxes are not supported)")


def _require_nested(inner: Box, outer: Box, iname: str, oname: str) -> None:
    for j in range(inner.d):
        if not (outer.lo[j] < inner.lo[j] and inner.hi[j] < outer.hi[j]):
            raise ValidationError(
                f"{iname} must nest strictly inside {oname} with positive margin on axis {j}: "
                f"[{inner.lo[j]}, {inner.hi[j]}] vs [{outer.lo[j]}, {outer.hi[j]}]")


# ---------------------------------------------------------------------------
# Spatial profile.


def _axis_profile(grid: TorusGrid, axis: int, box: Box) -> np.ndarray:
    """Zero-mean periodic profile whose derivative is a bump minus its mean.

    The derivative equals the (small, positive) bump mean in magnitude at
    every grid node outside the bump support, so the only critical points sit
    inside the box. Built by dividing the bump's coefficients by i*k.
    """
    n = grid.N[axis]
    h = grid.h[axis]
    width = box.width(axis)
    need = 6.0 * h
    if width < need:
        raise ConstructionFailure(
            f"axis {axis}: inner box spans {width:.4g} but the grid step {h:.4g} only resolves "
            f"profiles above {need:.4g}; enlarge the box or refine the grid")
    u = (grid.axis_points(axis) - box.center(axis)) / (0.45 * width)
    g = np.zeros(n)
    core = np.abs(u) < 1.0
    g[core] = np.exp(-1.0 / (1.0 - u[core] ** 2))
    ghat = np.fft.fft(g - g.mean()) / n
    k = grid.axis_wavenumbers(axis).copy()
    k[n // 2] = 0.0
    phat = np.zeros(n, dtype=complex)
    nz = k != 0.0
    phat[nz] = ghat[nz] / (1j * k[nz])
    return (np.fft.ifft(phat) * n).real


def build_psi(grid: TorusGrid, region: ControlRegion) -> tuple[SpectralField, float]:
    """Smooth profile with range in [6, 7] and no critical point off omega0.

    Returns the field and the verified gradient floor: the smallest |grad psi|
    over all grid nodes outside the inner box.
    """
    region.validate_on(grid)
    box = region.omega0
    profiles = [_axis_profile(grid, j, box) for j in range(grid.d)]
    total = np.zeros(grid.N)
    for j, p in enumerate(profiles):
        shape = [1] * grid.d
        shape[j] = grid.N[j]
        total = total + p.reshape(shape)
    lo = sum(float(p.min()) for p in profiles)
    hi = sum(float(p.max()) for p in profiles)
    if hi - lo <= 0.0:
        raise ConstructionFailure("spatial profile degenerated to a constant")
    psi = SpectralField.from_grid_values(grid, PSI_LO + (PSI_HI - PSI_LO) * (total - lo) / (hi - lo))

    vals = psi.grid_values()[0]
    if vals.min() < 6.0 or vals.max() > 7.0:
        raise ConstructionFailure(
            f"profile range [{vals.min():.6f}, {vals.max():.6f}] escaped [6, 7]")
    grad = differentiate(psi, "grad").grid_values()
    gnorm = np.sqrt(np.sum(grad**2, axis=0))
    outside = ~box.contains(np.stack(grid.meshgrid()))
    margin = float(gnorm[outside].min())
    if margin <= 0.0:
        raise ConstructionFailure("profile gradient vanishes outside the inner box")
    return psi, margin


# ---------------------------------------------------------------------------
# Temporal envelope.


@dataclass(frozen=True)
class ThetaParams:
    """Frozen description of the temporal envelope on [0, T).

    Piecewise: 1 + (1 - t/T0)^m on [0, T0], the constant 1 up to
    ``bridge_start``, a monotone quintic bridge up to T - T1, then 1/(T - t).
    ``bridge_coeffs`` are the polynomial coefficients in the normalized bridge
    variable, lowest degree first.
    """

    T: float
    T0: float
    T1: float
    m: float
    bridge_start: float
    bridge_coeffs: tuple[float, ...]

    @property
    def bridge_end(self) -> float:
        return self.T - self.T1

    @property
    def bridge_width(self) -> float:
        return self.bridge_end - self.bridge_start


def _bridge_coeffs(T1: float, width: float) -> tuple[float, ...]:
    """Quintic matching (1, 0, 0) on the left and 1/(T-t) data on the right."""
    rows = np.array([
        [1, 0, 0, 0, 0, 0],     # p(0)
        [0, 1, 0, 0, 0, 0],     # p'(0)
        [0, 0, 2, 0, 0, 0],     # p''(0)
        [1, 1, 1, 1, 1, 1],     # p(1)
        [0, 1, 2, 3, 4, 5],     # p'(1)
        [0, 0, 2, 6, 12, 20],   # p''(1)
    ], dtype=float)
    data = np.array([1.0, 0.0, 0.0, 1.0 / T1, width / T1**2, 2.0 * width**2 / T1**3])
    return tuple(np.linalg.solve(rows, data))


def _bridge_is_monotone(coeffs: tuple[float, ...]) -> bool:
    c = np.asarray(coeffs)
    dc = c[1:] * np.arange(1, len(c))
    s = np.linspace(0.0, 1.0, 2001)
    return bool(np.polynomial.polynomial.polyval(s, dc).min() >= -1e-12 * abs(c).max())


def make_theta_params(T: float, T0: float, T1: float, m: float) -> ThetaParams:
    if T0 <= 0.0 or T1 <= 0.0:
        raise ValidationError(f"envelope windows must be positive, got T0={T0}, T1={T1}")
    if T1 > 0.25:
        raise ValidationError(f"final window T1 must not exceed 1/4, got {T1}")
    if T0 + 2.0 * T1 >= T:
        raise ValidationError(f"need T0 + 2*T1 < T, got {T0} + 2*{T1} vs {T}")
    if m < 2.0:
        raise ValidationError(f"envelope exponent must be at least 2, got {m}")
    # Full-width bridge first; if the sampled derivative ever dips, re-knot
    # once at half width (the constant piece extends underneath it).
    for start in (T - 2.0 * T1, T - 1.5 * T1):
        width = (T - T1) - start
        coeffs = _bridge_coeffs(T1, width)
        if _bridge_is_monotone(coeffs):
            return ThetaParams(float(T), float(T0), float(T1), float(m), float(start), coeffs)
    raise ConstructionFailure("could not knot a monotone bridge; shrink T1")


def _check_domain(t: float, p: ThetaParams) -> None:
    if not 0.0 <= t < p.T:
        raise OutOfDomain(f"time {t} outside [0, {p.T})")


def theta(t: float, p: ThetaParams) -> float:
    _check_domain(t, p)
    if t < p.T0:
        lg = p.m * math.log1p(-t / p.T0)
        return 1.0 + (math.exp(lg) if lg > _FLUSH else 0.0)
    if t <= p.bridge_start:
        return 1.0
    if t < p.bridge_end:
        u = (t - p.bridge_start) / p.bridge_width
        return float(np.polynomial.polynomial.polyval(u, p.bridge_coeffs))
    if t == p.bridge_end:
        return 1.0 / p.T1  # T - t would lose a bit to cancellation here
    return 1.0 / (p.T - t)


def theta_derivative(t: float, p: ThetaParams) -> float:
    _check_domain(t, p)
    if t < p.T0:
        lg = (p.m - 1.0) * math.log1p(-t / p.T0)
        return -(p.m / p.T0) * math.exp(lg) if lg > _FLUSH else 0.0
    if t <= p.bridge_start:
        return 0.0
    if t < p.bridge_end:
        u = (t - p.bridge_start) / p.bridge_width
        c = np.asarray(p.bridge_coeffs)
        dc = c[1:] * np.arange(1, len(c))
        return float(np.polynomial.polynomial.polyval(u, dc)) / p.bridge_width
    if t == p.bridge_end:
        return 1.0 / p.T1**2
    return 1.0 / (p.T - t) ** 2


def log_theta(t: float, p: ThetaParams) -> float:
    """log(theta(t)), stable arbitrarily close to the right endpoint."""
    _check_domain(t, p)
    if t >= p.bridge_end:
        return -math.log(p.T - t)
    return math.log(theta(t, p))


# ---------------------------------------------------------------------------
# Assembled weight set.


class WeightValues(NamedTuple):
    phi: np.ndarray | float
    phi_cap: float
    xi: np.ndarray | float
    log_weight: np.ndarray | float


@dataclass(frozen=True)
class WeightSet:
    """Immutable bundle of spatial profile, cutoffs and temporal envelope.

    ``s`` and ``lam`` are the large observability parameters (both >= 1); the
    envelope exponent is tied to them by m = s * lam^2 * e^(2 lam).
    """

    grid: TorusGrid
    region: ControlRegion
    psi: SpectralField
    theta_params: ThetaParams
    s: float
    lam: float
    gradient_margin: float

    @property
    def T(self) -> float:
        return self.theta_params.T


def make_weight_set(grid: TorusGrid, region: ControlRegion, T: float, s: float, lam: float,
                    T0: float | None = None, T1: float | None = None) -> WeightSet:
    if s < 1.0 or lam < 1.0:
        raise ValidationError(f"weight parameters must satisfy s >= 1 and lambda >= 1, got {s}, {lam}")
    if T <= 0.0:
        raise ValidationError(f"horizon must be positive, got {T}")
    if T1 is None:
        T1 = min(0.25, T / 8.0)
    if T0 is None:
        T0 = T / 4.0
    m = s * lam**2 * math.exp(2.0 * lam)
    params = make_theta_params(T, T0, T1, m)
    psi, margin = build_psi(grid, region)
    return WeightSet(grid, region, psi, params, float(s), float(lam), margin)


def _psi_values(ws: WeightSet, x) -> np.ndarray | float:
    if x is None:
        return ws.psi.grid_values()[0]
    vals = evaluate_at(ws.psi, x)[0]
    return float(vals) if vals.ndim == 0 else vals


def evaluate_weights(ws: WeightSet, t: float, x=None) -> WeightValues:
    """Pointwise weights at time t: (phi, Phi, xi, -s*phi).

    ``x`` is a stacked coordinate array, or None for all grid nodes. The
    exponential weight is only ever reported through its logarithm -s*phi.
    Identity worth remembering: phi_cap - phi = xi.
    """
    th = theta(t, ws.theta_params)
    cap_rate = ws.lam * math.exp(12.0 * ws.lam)
    psi_vals = _psi_values(ws, x)
    xi = th * np.exp(ws.lam * psi_vals)
    phi = th * cap_rate - xi
    return WeightValues(phi, th * cap_rate, xi, -ws.s * phi)


def phi_time_derivative(ws: WeightSet, t: float, x=None) -> np.ndarray | float:
    """d/dt of the weight exponent; negative at t = 0 by construction."""
    dth = theta_derivative(t, ws.theta_params)
    psi_vals = _psi_values(ws, x)
    return dth * (ws.lam * math.exp(12.0 * ws.lam) - np.exp(ws.lam * psi_vals))
