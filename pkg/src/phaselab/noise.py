"""Spatially colored Wiener forcing with trace-class covariance.

The covariance is diagonal in the real trigonometric basis of the torus:
the constant mode plus, for every wavevector k in a canonical half-space,
the pair sqrt(2)cos(2 pi k.x), sqrt(2)sin(2 pi k.x).  Both members of a
pair carry the Bessel-potential eigenvalue

    lambda_k = (1 + 4 pi^2 |k|^2)^(-s),

truncated at |k|_inf <= k_max.  The smoothness bookkeeping is the discrete
Hilbert-Schmidt sum Sum lambda_k (1 + 4 pi^2 |k|^2)^r, which converges for
s > r + n/2; specs violating that are rejected up front.

Increments are synthesized through one inverse FFT from independent
standard Gaussians, one per basis function, so fields are real by
construction (the FFT path is an algebraic rewrite of the cos/sin sum and
is checked against the direct summation in the tests).

Randomness is counter-based: each (seed, path, step) owns a fresh Philox
block, so increments are bit-reproducible regardless of the order paths or
steps are evaluated in.  One sampler serves one Monte Carlo path; samplers
share nothing mutable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from typing import BinaryIO

import numpy as np

from .torus import TorusGrid, read_sdf, write_sdf

SDL_MAGIC = b"SDL1"


@dataclass(frozen=True)
class NoiseSpec:
    """Covariance and stream parameters for the Q-Wiener forcing.

    r is the Sobolev index the theory needs (r > n/2 - 1), s the spectral
    decay exponent, k_max the wavevector cutoff, d the component count.
    Components are independent and identically colored in this version;
    any mixing between components belongs to the model amplitude.
    """

    r: float = 0.1
    s: float = 2.0
    k_max: int = 8
    d: int = 1
    seed: int = 0

    def validate(self, n: int) -> None:
        if self.k_max < 0:
            raise ValueError(f"k_max must be >= 0, got {self.k_max}")
        if self.d < 1:
            raise ValueError(f"noise needs d >= 1 components, got {self.d}")
        if not self.s > self.r + n / 2:
            raise ValueError(
                f"Hilbert-Schmidt condition violated: need s > r + n/2, "
                f"got s={self.s}, r={self.r}, n={n}"
            )


def _half_space(n: int, k_max: int) -> np.ndarray:
    """Wavevectors with |k|_inf <= k_max, one representative per +-k pair."""
    if k_max == 0:
        return np.zeros((0, n), dtype=int)
    rng = np.arange(-k_max, k_max + 1)
    grids = np.meshgrid(*([rng] * n), indexing="ij")
    ks = np.stack([g.ravel() for g in grids], axis=-1)
    keep = np.zeros(len(ks), dtype=bool)
    for i, k in enumerate(ks):
        for comp in k[::-1]:  # last axis decides first (matches rfft layout)
            if comp > 0:
                keep[i] = True
                break
            if comp < 0:
                break
    return ks[keep]


def bessel_weight(k_sq: np.ndarray | float, expo: float) -> np.ndarray:
    return (1.0 + 4.0 * np.pi**2 * np.asarray(k_sq, dtype=float)) ** expo


def spectrum_sums(r: float, s: float, k_max: int, n: int) -> tuple:
    """(trace, hs_sum) of the lambda table, without validity gating.

    Exposed separately so divergence of the Hilbert-Schmidt sum can be
    demonstrated for parameter choices the sampler itself refuses.
    """
    ks = _half_space(n, k_max)
    ksq = (ks**2).sum(axis=1) if len(ks) else np.zeros(0)
    lam = bessel_weight(ksq, -s)
    trace = 1.0 + 2.0 * lam.sum()
    hs = 1.0 + 2.0 * (lam * bessel_weight(ksq, r)).sum()
    return float(trace), float(hs)


class NoiseSpectrum:
    """Frozen lambda table bound to a grid, plus FFT scatter indices."""

    def __init__(self, spec: NoiseSpec, grid: TorusGrid):
        spec.validate(grid.n)
        if spec.k_max > grid.N // 3:
            raise ValueError(
                f"noise cutoff k_max={spec.k_max} exceeds the dealiased band N/3={grid.N // 3}"
            )
        self.spec = spec
        self.grid = grid
        self.kvecs = _half_space(grid.n, spec.k_max)
        ksq = (self.kvecs**2).sum(axis=1) if len(self.kvecs) else np.zeros(0)
        self.lam0 = 1.0
        self.lams = bessel_weight(ksq, -spec.s)
        self.trace = float(self.lam0 + 2.0 * self.lams.sum())
        self.hs_sum = float(self.lam0 + 2.0 * (self.lams * bessel_weight(ksq, spec.r)).sum())
        self.n_modes = 1 + 2 * len(self.kvecs)  # constant + cos/sin per pair

    @cached_property
    def _scatter(self):
        """Flat rfft-layout indices for each half-space k and, where the
        stored plane also holds -k (k_last = 0), the conjugate slots."""
        grid = self.grid
        shape = grid.spectral_shape
        idx, conj_idx, needs_conj = [], [], []
        for k in self.kvecs:
            pos = tuple(int(ki) % grid.N for ki in k[:-1]) + (int(k[-1]),)
            idx.append(np.ravel_multi_index(pos, shape))
            if k[-1] == 0 and grid.n > 1:
                neg = tuple(int(-ki) % grid.N for ki in k[:-1]) + (0,)
                conj_idx.append(np.ravel_multi_index(neg, shape))
                needs_conj.append(True)
            else:
                conj_idx.append(0)
                needs_conj.append(False)
        zero = np.ravel_multi_index((0,) * grid.n, shape)
        return (
            int(zero),
            np.asarray(idx, dtype=np.intp),
            np.asarray(conj_idx, dtype=np.intp),
            np.asarray(needs_conj, dtype=bool),
        )

    def synthesize(self, xi: np.ndarray, dt: float) -> np.ndarray:
        """Increment field(s) from a Gaussian table.

        xi has shape (..., n_modes) ordered [xi_0, xi_cos..., xi_sin...];
        the result has shape (...,) + grid.shape and equals
        sum_k sqrt(lambda_k dt) xi_k e_k(x) with the real basis e_k.
        """
        grid = self.grid
        zero, idx, conj_idx, needs_conj = self._scatter
        m = len(self.kvecs)
        lead = xi.shape[:-1]
        scale = grid.num_nodes
        spec = np.zeros(lead + (int(np.prod(grid.spectral_shape)),), dtype=complex)
        spec[..., zero] = scale * np.sqrt(self.lam0 * dt) * xi[..., 0]
        if m:
            amp = scale * np.sqrt(self.lams * dt / 2.0)
            vals = amp * (xi[..., 1 : 1 + m] - 1j * xi[..., 1 + m :])
            spec[..., idx] = vals
            if needs_conj.any():
                spec[..., conj_idx[needs_conj]] = np.conj(vals[..., needs_conj])
        return grid.irfft(spec.reshape(lead + grid.spectral_shape))

    def synthesize_direct(self, xi: np.ndarray, dt: float) -> np.ndarray:
        """Reference cos/sin summation; slow, used to pin the FFT path."""
        grid = self.grid
        out = np.full(grid.shape, np.sqrt(self.lam0 * dt) * xi[..., 0])
        coords = grid.axes_coords
        for j, k in enumerate(self.kvecs):
            phase = 2.0 * np.pi * sum(k[a] * coords[a] for a in range(grid.n))
            root = np.sqrt(self.lams[j] * dt)
            out = out + root * np.sqrt(2.0) * (
                xi[..., 1 + j] * np.cos(phase) + xi[..., 1 + len(self.kvecs) + j] * np.sin(phase)
            )
        return out

    def basis_projections(self, values: np.ndarray) -> np.ndarray:
        """<values, e_k> for every basis function, ordered like xi tables."""
        grid = self.grid
        vh = grid.rfft(values).reshape(values.shape[: -grid.n] + (-1,)) / grid.num_nodes
        zero, idx, _, _ = self._scatter
        out = np.empty(values.shape[: -grid.n] + (self.n_modes,))
        out[..., 0] = vh[..., zero].real
        if len(self.kvecs):
            picked = vh[..., idx]
            out[..., 1 : 1 + len(self.kvecs)] = np.sqrt(2.0) * picked.real
            out[..., 1 + len(self.kvecs) :] = -np.sqrt(2.0) * picked.imag
        return out

    @property
    def lambdas(self) -> np.ndarray:
        """Eigenvalue per basis function, ordered like xi tables."""
        return np.concatenate([[self.lam0], self.lams, self.lams])

    def quadratic_form(self, values: np.ndarray) -> np.ndarray:
        """||sqrt(Q) v||^2 = sum_k lambda_k <v, e_k>^2, batched over leading axes."""
        proj = self.basis_projections(values)
        return np.sum(self.lambdas * proj**2, axis=-1)


def build_spectrum(spec: NoiseSpec, grid: TorusGrid) -> NoiseSpectrum:
    return NoiseSpectrum(spec, grid)


def _path_key(seed: int, path_index: int) -> np.ndarray:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**63 - 1), spawn_key=(int(path_index),))
    return ss.generate_state(2, np.uint64)


class NoiseSampler:
    """Increment source for one Monte Carlo path.

    Gaussian tables are keyed by (seed, path, fine step) through a Philox
    counter block, never by generator state carried across steps.  With
    refinement m > 1 every solver step of size dt is the sum of m fine
    increments of size dt/m, so runs at nested step sizes driven by the
    same (seed, path) share one underlying Brownian path.
    """

    def __init__(
        self,
        spectrum: NoiseSpectrum,
        dt: float,
        seed: int | None = None,
        path_index: int = 0,
        refinement: int = 1,
    ):
        if not dt > 0:
            raise ValueError(f"noise increments need dt > 0, got {dt}")
        if refinement < 1:
            raise ValueError("refinement must be a positive integer")
        self.spectrum = spectrum
        self.dt = float(dt)
        self.seed = spectrum.spec.seed if seed is None else int(seed)
        self.path_index = int(path_index)
        self.refinement = int(refinement)
        self._key = _path_key(self.seed, self.path_index)

    def gaussian_table(self, fine_step: int) -> np.ndarray:
        """(d, n_modes) standard normals for one fine step."""
        bg = np.random.Philox(key=self._key, counter=[0, 0, 0, int(fine_step)])
        g = np.random.Generator(bg)
        return g.standard_normal((self.spectrum.spec.d, self.spectrum.n_modes))

    def summed_table(self, step: int) -> np.ndarray:
        """Gaussian table of the step-dt increment (fine draws pre-summed)."""
        m = self.refinement
        tab = self.gaussian_table(step * m)
        for j in range(1, m):
            tab = tab + self.gaussian_table(step * m + j)
        return tab / np.sqrt(m)

    def increment(self, step: int) -> np.ndarray:
        """Increment of the d-component forcing over [step*dt, (step+1)*dt)."""
        return self.spectrum.synthesize(self.summed_table(step), self.dt)


def sample_increment(
    spectrum: NoiseSpectrum, dt: float, rng_seed: int, step: int = 0, path_index: int = 0
) -> np.ndarray:
    """One-shot increment draw (see NoiseSampler for ensemble use)."""
    return NoiseSampler(spectrum, dt, seed=rng_seed, path_index=path_index).increment(step)


@dataclass
class NoiseLedger:
    """Replayable record of the increments a run consumed.

    The generative key (spec, seed, path, dt, refinement, step count) is
    the primary record; increments are rematerialized on demand and are
    bit-identical on every replay.  Materialized per-step fields can also
    be attached, which is what the SDL1 file carries.
    """

    spec: NoiseSpec
    grid: TorusGrid
    dt: float
    n_steps: int
    path_index: int = 0
    refinement: int = 1
    increments: np.ndarray | None = None

    def sampler(self) -> NoiseSampler:
        return NoiseSampler(
            build_spectrum(self.spec, self.grid),
            self.dt,
            path_index=self.path_index,
            refinement=self.refinement,
        )

    def materialize(self) -> np.ndarray:
        if self.increments is None:
            s = self.sampler()
            self.increments = np.stack([s.increment(i) for i in range(self.n_steps)])
        return self.increments

    def write(self, fh: BinaryIO) -> None:
        fh.write(SDL_MAGIC)
        fh.write(
            struct.pack(
                "<ddIIQ", self.spec.r, self.spec.s, self.spec.k_max, self.spec.d, self.spec.seed
            )
        )
        for inc in self.materialize():
            write_sdf(fh, inc, self.grid)

    @classmethod
    def read(cls, fh: BinaryIO, dt: float) -> "NoiseLedger":
        magic = fh.read(4)
        if magic != SDL_MAGIC:
            raise ValueError(f"bad ledger magic {magic!r}")
        r, s, k_max, d, seed = struct.unpack("<ddIIQ", fh.read(struct.calcsize("<ddIIQ")))
        spec = NoiseSpec(r=r, s=s, k_max=k_max, d=d, seed=seed)
        import io

        rest = io.BytesIO(fh.read())
        incs = []
        grid = None
        while rest.tell() < len(rest.getbuffer()):
            grid, vals = read_sdf(rest)
            incs.append(vals)
        if grid is None:
            raise ValueError("ledger holds no increments")
        return cls(spec, grid, dt, len(incs), increments=np.stack(incs))


def covariance_diagnostic(ledger: NoiseLedger) -> dict:
    """Empirical per-mode variances of the recorded increments vs lambda_k dt.

    Report-only: too few samples or a degenerate (all-zero) ledger are
    flagged rather than raised.
    """
    spectrum = build_spectrum(ledger.spec, ledger.grid)
    incs = ledger.materialize()
    m = len(incs)
    proj = spectrum.basis_projections(incs)  # (steps, d, n_modes)
    proj = proj.reshape(m, -1, spectrum.n_modes)
    emp_var = proj.var(axis=0, ddof=1) if m > 1 else np.zeros_like(proj[0])
    expected = spectrum.lambdas * ledger.dt
    rel_err = np.abs(emp_var - expected) / expected
    trace_est = float(emp_var.sum() / ledger.dt)
    degenerate = bool(np.all(incs == 0.0))
    return {
        "samples": m,
        "underpowered": m < 100,
        "degenerate": degenerate,
        "expected_variances": expected,
        "empirical_variances": emp_var,
        "max_rel_mode_error": float(rel_err.max()) if not degenerate else float("nan"),
        "trace_estimate": 0.0 if degenerate else trace_est,
        "trace": spectrum.trace * ledger.spec.d,
    }
