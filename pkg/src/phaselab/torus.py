"""Fields and spectral calculus on the flat torus.

The computational domain is the unit-period torus [0, 1)^n carrying the
normalized Lebesgue measure, discretized by N equispaced nodes per axis.
Quadrature of a nodal field is the plain arithmetic mean, so the constant
field 1 integrates to exactly 1.

Differential operators act through the FFT: the Laplacian is the
multiplier -4*pi^2*|k|^2 and each partial derivative is 2*pi*i*k_j (with
the Nyquist mode zeroed in first derivatives, the usual convention for odd
operators on even grids).  Nonlinear products are expected to be dealiased
with the 2/3 rule before they feed back into spectral solves; see
:func:`dealias_mask` and the solver in :mod:`phaselab.dynamics`.

Fields are immutable value objects; every operator here is a pure
function, so fields and grids may be shared freely across worker
processes.  All array routines accept leading batch axes (the trailing
``n`` axes are the spatial ones), which is how ensemble integration stays
vectorized.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import BinaryIO, Sequence

import numpy as np

SDF_MAGIC = b"SDF1"


def _first_bad_node(values: np.ndarray) -> tuple:
    bad = np.argwhere(~np.isfinite(values))
    return tuple(int(i) for i in bad[0])


def _require_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what} contains a non-finite value at node {_first_bad_node(values)}")


@dataclass(frozen=True)
class TorusGrid:
    """Equispaced grid on [0,1)^n with cached spectral multipliers.

    N must be even and at least 8 (powers of two are the intended use).
    h*N = 1 holds exactly since h is defined as 1/N.
    """

    n: int = 2
    N: int = 64

    def __post_init__(self):
        if self.n < 1 or self.n > 3:
            raise ValueError(f"spatial dimension n={self.n} unsupported (need 1 <= n <= 3)")
        if self.N < 8 or self.N % 2 != 0:
            raise ValueError(f"grid needs N >= 8 and even, got N={self.N}")

    @property
    def h(self) -> float:
        return 1.0 / self.N

    @property
    def shape(self) -> tuple:
        return (self.N,) * self.n

    @property
    def num_nodes(self) -> int:
        return self.N ** self.n

    @cached_property
    def axes_coords(self) -> tuple:
        x = np.arange(self.N) / self.N
        return tuple(np.meshgrid(*([x] * self.n), indexing="ij"))

    @cached_property
    def _spatial_axes(self) -> tuple:
        return tuple(range(-self.n, 0))

    @cached_property
    def wavenumbers(self) -> tuple:
        """Integer wavenumber arrays broadcast to the rfftn output layout."""
        ks = []
        full = np.fft.fftfreq(self.N) * self.N
        half = np.fft.rfftfreq(self.N) * self.N
        for axis in range(self.n):
            k = half if axis == self.n - 1 else full
            shape = [1] * self.n
            shape[axis] = k.size
            ks.append(k.reshape(shape))
        return tuple(ks)

    @cached_property
    def k_squared(self) -> np.ndarray:
        out = np.zeros(self.spectral_shape)
        for k in self.wavenumbers:
            out = out + k * k
        return out

    @property
    def spectral_shape(self) -> tuple:
        return (self.N,) * (self.n - 1) + (self.N // 2 + 1,)

    @cached_property
    def laplacian_multiplier(self) -> np.ndarray:
        return -4.0 * np.pi**2 * self.k_squared

    @cached_property
    def gradient_multipliers(self) -> tuple:
        """2*pi*i*k per axis, Nyquist zeroed (odd-derivative convention)."""
        mults = []
        for k in self.wavenumbers:
            k = k.copy()
            k[np.abs(k) == self.N // 2] = 0.0
            mults.append(2j * np.pi * k)
        return tuple(mults)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """2/3-rule mask: True where every |k_j| <= N/3."""
        keep = np.ones(self.spectral_shape, dtype=bool)
        cut = self.N // 3
        for k in self.wavenumbers:
            keep = keep & (np.abs(k) <= cut)
        return keep

    # ---- raw array transforms (leading batch axes allowed) ----

    def rfft(self, values: np.ndarray) -> np.ndarray:
        return np.fft.rfftn(values, axes=self._spatial_axes)

    def irfft(self, coeffs: np.ndarray) -> np.ndarray:
        return np.fft.irfftn(coeffs, s=self.shape, axes=self._spatial_axes)

    def lap_arr(self, values: np.ndarray) -> np.ndarray:
        return self.irfft(self.laplacian_multiplier * self.rfft(values))

    def grad_arr(self, values: np.ndarray) -> np.ndarray:
        """Gradient; component axis is inserted before the spatial axes."""
        vh = self.rfft(values)
        return np.stack([self.irfft(m * vh) for m in self.gradient_multipliers], axis=-self.n - 1)

    def dealias_arr(self, values: np.ndarray) -> np.ndarray:
        return self.irfft(self.rfft(values) * self.dealias_mask)

    def mean_arr(self, values: np.ndarray) -> np.ndarray:
        return values.mean(axis=self._spatial_axes)

    def solve_helmholtz_arr(self, rhs: np.ndarray, a: float | np.ndarray) -> np.ndarray:
        """Apply (I - a*Laplacian)^-1 spectrally.  ``a`` may broadcast over batch axes."""
        denom = 1.0 + a * (4.0 * np.pi**2) * self.k_squared
        return self.irfft(self.rfft(rhs) / denom)


@dataclass(frozen=True)
class ScalarField:
    grid: TorusGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise ValueError(f"scalar field shape {v.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, grid: TorusGrid, fn) -> "ScalarField":
        return cls(grid, fn(*grid.axes_coords))

    @classmethod
    def constant(cls, grid: TorusGrid, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(value)))


@dataclass(frozen=True)
class VectorField:
    """d real components on a shared grid.

    Holds both spatial vectors (d = n, e.g. gradients) and multi-component
    concentration states (d = number of tracked species).
    """

    grid: TorusGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != self.grid.n + 1 or v.shape[1:] != self.grid.shape or v.shape[0] < 1:
            raise ValueError(f"vector field shape {v.shape} invalid for grid {self.grid.shape}")
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_components(cls, components: Sequence[ScalarField]) -> "VectorField":
        grid = components[0].grid
        return cls(grid, np.stack([c.values for c in components]))

    def component(self, i: int) -> ScalarField:
        return ScalarField(self.grid, self.values[i])


class SpectralCoeffs:
    """Full (unreduced) Fourier coefficients of a real field.

    Indexed by integer wavevectors in [-N/2, N/2)^n via :meth:`coeff`.
    Coefficients are normalized so that coeff(0) equals the field mean.
    """

    def __init__(self, grid: TorusGrid, raw: np.ndarray):
        self.grid = grid
        self.raw = raw  # numpy fftn layout, unnormalized

    @classmethod
    def from_field(cls, f: ScalarField) -> "SpectralCoeffs":
        return cls(f.grid, np.fft.fftn(f.values))

    def to_field(self) -> ScalarField:
        return ScalarField(self.grid, np.fft.ifftn(self.raw).real)

    def coeff(self, k: Sequence[int]) -> complex:
        idx = tuple(int(ki) % self.grid.N for ki in k)
        return complex(self.raw[idx]) / self.grid.num_nodes

    @property
    def mean(self) -> float:
        return self.coeff((0,) * self.grid.n).real

    def hermitian_defect(self) -> float:
        """Max |c_k - conj(c_-k)| relative to the largest coefficient.

        Zero (up to roundoff) exactly when the field is real.
        """
        flipped = self.raw.copy()
        for ax in range(self.grid.n):
            flipped = np.flip(np.roll(flipped, -1, axis=ax), axis=ax)
        scale = max(float(np.max(np.abs(self.raw))), 1e-300)
        return float(np.max(np.abs(self.raw - np.conj(flipped)))) / scale

    def parseval_gap(self, f: ScalarField) -> float:
        """|mean(f^2) - sum |c_k|^2| (normalized Parseval identity)."""
        nodal = float(np.mean(f.values**2))
        spectral = float(np.sum(np.abs(self.raw) ** 2)) / self.grid.num_nodes**2
        return abs(nodal - spectral)


# ---- operators on field objects ----


def laplacian(f: ScalarField) -> ScalarField:
    _require_finite(f.values, "laplacian input")
    return ScalarField(f.grid, f.grid.lap_arr(f.values))


def gradient(f: ScalarField) -> VectorField:
    _require_finite(f.values, "gradient input")
    return VectorField(f.grid, f.grid.grad_arr(f.values))


def mean_integral(f: ScalarField) -> float:
    """Integral against the normalized Lebesgue measure (arithmetic mean)."""
    return float(np.mean(f.values))


def dealias(f: ScalarField) -> ScalarField:
    return ScalarField(f.grid, f.grid.dealias_arr(f.values))


def resample(f: ScalarField, N2: int) -> ScalarField:
    """Spectral resampling to an N2-per-axis grid (zero padding / truncation)."""
    grid2 = TorusGrid(f.grid.n, N2)
    raw = np.fft.fftn(f.values)
    out = np.zeros(grid2.shape, dtype=complex)
    N1 = f.grid.N
    m = min(N1, N2) // 2
    sl_src = tuple(np.r_[0:m, N1 - m : N1] for _ in range(f.grid.n))
    sl_dst = tuple(np.r_[0:m, N2 - m : N2] for _ in range(f.grid.n))
    out[np.ix_(*sl_dst)] = raw[np.ix_(*sl_src)]
    vals = np.fft.ifftn(out).real * (N2**f.grid.n) / (N1**f.grid.n)
    return ScalarField(grid2, vals)


def cap_magnitude_arr(vec: np.ndarray, tau: float, n: int) -> np.ndarray:
    """Radial cap of a stacked vector array; component axis is -(n+1)."""
    mag = np.sqrt(np.sum(vec * vec, axis=-n - 1, keepdims=True))
    scale = np.where(mag > tau, tau / np.maximum(mag, 1e-300), 1.0)
    return vec * scale


def grad_cap(v: VectorField, tau: float) -> VectorField:
    """Nodewise radial truncation at magnitude tau; directions are kept."""
    if not (tau > 0):
        raise ValueError(f"gradient cap needs tau > 0, got {tau}")
    if v.d != v.grid.n:
        raise ValueError(f"grad_cap expects a spatial vector field (d={v.grid.n}), got d={v.d}")
    return VectorField(v.grid, cap_magnitude_arr(v.values, tau, v.grid.n))


def weighted_derivative_residual(
    phi: ScalarField, u: ScalarField, g: VectorField, v: ScalarField
) -> float:
    """Defect of the phi-weighted integration-by-parts identity.

    For a candidate weighted derivative g of u, returns
    sum_i |int(phi g_i v) + int(d_i phi u v) + int(phi u d_i v)|,
    which vanishes (up to discretization) exactly when g is the
    phi-weighted weak gradient of u against the test function v.
    """
    grid = phi.grid
    if g.grid is not grid and g.grid != grid:
        raise ValueError("weighted_derivative_residual: fields live on different grids")
    if g.d != grid.n:
        raise ValueError(f"candidate derivative needs d={grid.n} components, got {g.d}")
    dphi = grid.grad_arr(phi.values)
    dv = grid.grad_arr(v.values)
    total = 0.0
    for i in range(grid.n):
        term = np.mean(
            phi.values * g.values[i] * v.values
            + dphi[i] * u.values * v.values
            + phi.values * u.values * dv[i]
        )
        total += abs(float(term))
    return total


# ---- SDF1 snapshot format ----
# magic "SDF1", then n, N, d as uint32 LE, then d*N^n float64 LE values in
# row-major axis order.


def write_sdf(fh: BinaryIO, values: np.ndarray, grid: TorusGrid) -> None:
    vals = np.asarray(values, dtype="<f8")
    if vals.shape == grid.shape:
        vals = vals[None]
    d = vals.shape[0]
    if vals.shape[1:] != grid.shape:
        raise ValueError(f"cannot serialize shape {vals.shape} on grid {grid.shape}")
    fh.write(SDF_MAGIC)
    fh.write(struct.pack("<III", grid.n, grid.N, d))
    fh.write(np.ascontiguousarray(vals).tobytes())


def read_sdf(fh: BinaryIO) -> tuple:
    """Returns (grid, values) with values shaped (d, N, ..., N)."""
    magic = fh.read(4)
    if magic != SDF_MAGIC:
        raise ValueError(f"bad field snapshot magic {magic!r}")
    n, N, d = struct.unpack("<III", fh.read(12))
    grid = TorusGrid(n, N)
    count = d * grid.num_nodes
    data = np.frombuffer(fh.read(count * 8), dtype="<f8", count=count)
    return grid, data.reshape((d,) + grid.shape).copy()


def field_to_bytes(values: np.ndarray, grid: TorusGrid) -> bytes:
    import io

    buf = io.BytesIO()
    write_sdf(buf, values, grid)
    return buf.getvalue()
