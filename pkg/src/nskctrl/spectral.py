"""Periodic grids, Fourier fields, exact operators, dealiased products.

Normalization (used everywhere in the package): the forward transform divides
by the number of grid points, so coefficients are the amplitudes of the
trigonometric interpolant and Parseval reads

    mean over grid of |f|^2  =  sum over modes of |fhat|^2.

Sobolev norms reuse that convention, which keeps all constants independent of
the resolution.

Derivative multipliers are exact (i*k, i*k dot, -|k|^2). The unpaired highest
mode (index -N/2 on an even grid) is zeroed in odd-order derivatives so real
fields stay real; the even-order Laplacian keeps it. Band-limited fields never
see the difference.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import GridMismatch, RankMismatch, ValidationError


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic grid on a d-dimensional torus.

    ``L`` holds the period per axis and ``N`` the (even) number of points per
    axis. Wavevector components are 2*pi*n/L for n in [-N/2, N/2).
    """

    L: tuple[float, ...]
    N: tuple[int, ...]

    def __post_init__(self):
        L = tuple(float(v) for v in (self.L if hasattr(self.L, "__len__") else (self.L,)))
        N = tuple(int(v) for v in (self.N if hasattr(self.N, "__len__") else (self.N,)))
        if len(L) != len(N) or not 1 <= len(N) <= 3:
            raise ValidationError(f"grid needs matching per-axis L and N in 1..3 dims, got {L}, {N}")
        if any(v <= 0 for v in L):
            raise ValidationError(f"period lengths must be positive, got {L}")
        if any(n < 8 or n % 2 for n in N):
            raise ValidationError(f"modes per axis must be even and >= 8, got {N}")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "N", N)

    @classmethod
    def regular(cls, d: int, L: float, N: int) -> "TorusGrid":
        return cls((float(L),) * d, (int(N),) * d)

    @property
    def d(self) -> int:
        return len(self.N)

    @property
    def h(self) -> tuple[float, ...]:
        return tuple(l / n for l, n in zip(self.L, self.N))

    @property
    def npoints(self) -> int:
        return int(np.prod(self.N))

    def axis_points(self, axis: int) -> np.ndarray:
        return np.arange(self.N[axis]) * self.h[axis]

    def meshgrid(self) -> list[np.ndarray]:
        """Coordinate arrays, each of shape N, indexed 'ij'."""
        return list(np.meshgrid(*(self.axis_points(ax) for ax in range(self.d)), indexing="ij"))

    def axis_wavenumbers(self, axis: int) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.N[axis], d=self.h[axis])

    @cached_property
    def k_components(self) -> tuple[np.ndarray, ...]:
        """Per-axis wavenumber arrays broadcast to the full mode shape."""
        comps = []
        for ax in range(self.d):
            shape = [1] * self.d
            shape[ax] = self.N[ax]
            comps.append(self.axis_wavenumbers(ax).reshape(shape))
        return tuple(comps)

    @cached_property
    def k_squared(self) -> np.ndarray:
        out = np.zeros(self.N)
        for comp in self.k_components:
            out = out + comp**2
        return out

    @cached_property
    def derivative_multipliers(self) -> tuple[np.ndarray, ...]:
        """i*k per axis with the unpaired highest mode zeroed."""
        outs = []
        for ax in range(self.d):
            k = self.axis_wavenumbers(ax).copy()
            k[self.N[ax] // 2] = 0.0
            shape = [1] * self.d
            shape[ax] = self.N[ax]
            outs.append(1j * k.reshape(shape))
        return tuple(outs)


def analyze(values: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Grid values (..., *N) -> amplitude coefficients (..., *N)."""
    axes = tuple(range(values.ndim - grid.d, values.ndim))
    return np.fft.fftn(values, axes=axes) / grid.npoints


def synthesize(coeffs: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Amplitude coefficients (..., *N) -> grid values (..., *N), complex."""
    axes = tuple(range(coeffs.ndim - grid.d, coeffs.ndim))
    return np.fft.ifftn(coeffs, axes=axes) * grid.npoints


def hermitian_project(coeffs: np.ndarray, d: int) -> np.ndarray:
    """Project onto the subspace representing real fields.

    Averages c(k) with conj(c(-k)); the map n -> -n mod N is flip+roll on
    each of the trailing d axes.
    """
    axes = tuple(range(coeffs.ndim - d, coeffs.ndim))
    mirrored = coeffs
    for ax in axes:
        mirrored = np.roll(np.flip(mirrored, axis=ax), 1, axis=ax)
    return 0.5 * (coeffs + np.conj(mirrored))


@dataclass
class SpectralField:
    """Fourier coefficients of a (component-stacked) field on a torus grid.

    ``coeffs`` has shape (ncomp, *N) complex. Scalars have ncomp == 1 and
    vector fields ncomp == grid.d; other component counts are allowed for
    stacked states and snapshot I/O but rejected by rank-specific operators.
    """

    grid: TorusGrid
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape[-self.grid.d :] != self.grid.N:
            raise ValidationError(
                f"coefficient shape {c.shape} does not end with grid shape {self.grid.N}"
            )
        if c.ndim == self.grid.d:
            c = c[np.newaxis]
        if c.ndim != self.grid.d + 1:
            raise ValidationError(f"expected (ncomp, *N) coefficients, got shape {c.shape}")
        self.coeffs = c

    @property
    def ncomp(self) -> int:
        return self.coeffs.shape[0]

    @property
    def is_scalar(self) -> bool:
        return self.ncomp == 1

    @property
    def is_vector(self) -> bool:
        return self.ncomp == self.grid.d

    @classmethod
    def from_grid_values(cls, grid: TorusGrid, values) -> "SpectralField":
        values = np.asarray(values)
        if values.ndim == grid.d:
            values = values[np.newaxis]
        return cls(grid, analyze(values.astype(complex), grid))

    @classmethod
    def zero(cls, grid: TorusGrid, ncomp: int = 1) -> "SpectralField":
        return cls(grid, np.zeros((ncomp, *grid.N), dtype=complex))

    def grid_values(self, real: bool = True) -> np.ndarray:
        vals = synthesize(self.coeffs, self.grid)
        return vals.real if real else vals

    def hermitianized(self) -> "SpectralField":
        return SpectralField(self.grid, hermitian_project(self.coeffs, self.grid.d))

    def copy(self) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs.copy())

    def __add__(self, other: "SpectralField") -> "SpectralField":
        _same_grid(self, other)
        return SpectralField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        _same_grid(self, other)
        return SpectralField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, scalar) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs * scalar)

    __rmul__ = __mul__


def _same_grid(f: SpectralField, g: SpectralField) -> None:
    if f.grid != g.grid:
        raise GridMismatch(f"fields live on different grids: {f.grid} vs {g.grid}")


def differentiate(f: SpectralField, op: str) -> SpectralField:
    """Apply an exact spectral operator: 'grad', 'div', or 'laplacian'."""
    g = f.grid
    if op == "grad":
        if not f.is_scalar:
            raise RankMismatch(f"grad needs a scalar field, got {f.ncomp} components")
        out = np.empty((g.d, *g.N), dtype=complex)
        for ax, mult in enumerate(g.derivative_multipliers):
            out[ax] = mult * f.coeffs[0]
        return SpectralField(g, out)
    if op == "div":
        if not f.is_vector:
            raise RankMismatch(f"div needs a {g.d}-component field, got {f.ncomp}")
        out = np.zeros((1, *g.N), dtype=complex)
        for ax, mult in enumerate(g.derivative_multipliers):
            out[0] += mult * f.coeffs[ax]
        return SpectralField(g, out)
    if op == "laplacian":
        return SpectralField(g, -g.k_squared * f.coeffs)
    raise RankMismatch(f"unknown operator {op!r}; expected grad, div, or laplacian")


def sobolev_norm(f: SpectralField, sigma: float) -> float:
    """(sum over modes of (1+|k|^2)^sigma |fhat|^2)^(1/2), components summed.

    sigma = 0 is the mean-square norm; negative sigma gives the dual-scale
    diagnostics.
    """
    weight = (1.0 + f.grid.k_squared) ** sigma
    return float(np.sqrt(np.sum(weight * np.abs(f.coeffs) ** 2)))


def l2_norm(coeffs: np.ndarray) -> float:
    """Mean-square norm straight from stacked coefficients."""
    return float(np.linalg.norm(coeffs.ravel()))


def evaluate_at(f: SpectralField, points) -> np.ndarray:
    """Evaluate the trigonometric interpolant at arbitrary points.

    ``points`` is a stacked coordinate array of shape (d, ...); a bare array
    is accepted for d = 1. Returns real values of shape (ncomp, ...). Cost is
    O(npoints) per evaluation point, intended for diagnostics and small
    quadratures, not bulk resampling.
    """
    pts = np.asarray(points, dtype=float)
    if f.grid.d == 1 and (pts.ndim == 0 or pts.shape[0] != 1):
        pts = pts[None]
    if pts.shape[0] != f.grid.d:
        raise RankMismatch(f"expected {f.grid.d} stacked coordinates, got shape {pts.shape}")
    tail = pts.shape[1:]
    flat = pts.reshape(f.grid.d, -1)
    kmat = np.stack([comp.ravel() for comp in np.broadcast_arrays(*f.grid.k_components)])
    phase = np.exp(1j * flat.T @ kmat)  # (npts, nmodes)
    vals = phase @ f.coeffs.reshape(f.ncomp, -1).T  # (npts, ncomp)
    return vals.T.real.reshape((f.ncomp, *tail))


# ---------------------------------------------------------------------------
# Dealiasing by 3/2 zero padding.


def padded_shape(N: tuple[int, ...]) -> tuple[int, ...]:
    """Smallest even sizes >= 3N/2 per axis."""
    return tuple(int(np.ceil(0.75 * n)) * 2 for n in N)


def _pad_axis(c: np.ndarray, ax: int, n_to: int) -> np.ndarray:
    """Zero-pad one fft-ordered axis from n to n_to, splitting the unpaired mode."""
    n = c.shape[ax]
    half = n // 2
    shape = list(c.shape)
    shape[ax] = n_to
    out = np.zeros(shape, dtype=c.dtype)
    src = np.moveaxis(c, ax, 0)
    dst = np.moveaxis(out, ax, 0)
    dst[:half] = src[:half]
    dst[n_to - (half - 1) :] = src[half + 1 :]
    # The coefficient at frequency -n/2 represents cos-type content shared by
    # frequencies +-n/2 on the finer grid; split it to keep real fields real.
    dst[half] = 0.5 * src[half]
    dst[n_to - half] = 0.5 * src[half]
    return out


def _truncate_axis(c: np.ndarray, ax: int, n_to: int) -> np.ndarray:
    """Inverse of _pad_axis: keep modes |n| <= n_to/2, folding +-n_to/2."""
    shape = list(c.shape)
    shape[ax] = n_to
    half = n_to // 2
    src = np.moveaxis(c, ax, 0)
    out = np.zeros(shape, dtype=c.dtype)
    dst = np.moveaxis(out, ax, 0)
    dst[:half] = src[:half]
    dst[half + 1 :] = src[c.shape[ax] - (half - 1) :]
    dst[half] = src[half] + src[c.shape[ax] - half]
    return out


def pad_coeffs(coeffs: np.ndarray, grid: TorusGrid) -> np.ndarray:
    out = coeffs
    target = padded_shape(grid.N)
    for i in range(grid.d):
        ax = out.ndim - grid.d + i
        out = _pad_axis(out, ax, target[i])
    return out


def truncate_coeffs(coeffs: np.ndarray, grid: TorusGrid) -> np.ndarray:
    out = coeffs
    for i in range(grid.d):
        ax = out.ndim - grid.d + i
        out = _truncate_axis(out, ax, grid.N[i])
    return out


def padded_values(coeffs: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Exact samples of the interpolant on the 3/2-refined grid."""
    padded = pad_coeffs(coeffs, grid)
    axes = tuple(range(padded.ndim - grid.d, padded.ndim))
    return np.fft.ifftn(padded, axes=axes) * np.prod(padded.shape[-grid.d :])


def analyze_padded(values: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Analyze fine-grid values and truncate back to the working band."""
    axes = tuple(range(values.ndim - grid.d, values.ndim))
    coeffs = np.fft.fftn(values, axes=axes) / np.prod(values.shape[-grid.d :])
    return truncate_coeffs(coeffs, grid)


def dealiased_product(f: SpectralField, g: SpectralField) -> SpectralField:
    """Pointwise product without quadratic aliasing.

    Component rules: scalar*scalar, scalar*vector (either order), or
    componentwise for equal component counts. Contractions (dot products) are
    built by callers from the componentwise form.
    """
    _same_grid(f, g)
    a, b = f.coeffs, g.coeffs
    if a.shape[0] == 1 and b.shape[0] > 1:
        a = np.broadcast_to(a, b.shape)
    elif b.shape[0] == 1 and a.shape[0] > 1:
        b = np.broadcast_to(b, a.shape)
    elif a.shape[0] != b.shape[0]:
        raise RankMismatch(f"cannot multiply {f.ncomp}-comp by {g.ncomp}-comp field")
    va = padded_values(a, f.grid)
    vb = padded_values(b, f.grid)
    out = analyze_padded(va * vb, f.grid)
    return SpectralField(f.grid, hermitian_project(out, f.grid.d))
