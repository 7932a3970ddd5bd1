"""Semi-implicit time integration of the coupled and uncoupled systems.

Scheme: IMEX Euler-Maruyama.  Laplacians are inverted spectrally (the
stiff linear part is implicit), while the reaction terms, the singular
advection grad(c).grad(phi)/(phi + eps) and the noise are explicit at the
step's left endpoint.  Nonlinear drift terms are dealiased with the 2/3
rule before re-entering spectral space; noise products are not (the
increment must stay exactly eta*b*dW for the quadratic-variation
bookkeeping).

The one-step updates satisfy, nodewise and to roundoff,

    phi' - phi = dt*(gamma*Lap(phi') + R_phi)
    c'   - c   = dt*(D*Lap(c') + S + F) + dM

with R_phi = dealias(g + Psi), S = dealias(singular term), F = dealias(f)
and dM = eta(c) b(phi, c) dW.  Diagnostics lean on this exact telescoping:
a Trajectory records snapshots plus the generative noise ledger, and
``Trajectory.replay`` re-runs the integration deterministically with
probes attached, handing every probe the per-step drift decomposition
(StepContext) without having to store per-step fields.

One trajectory is one worker; ensembles integrate as a batch (leading
path axis) with counter-keyed noise streams, so results do not depend on
how paths are grouped.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .models import EtaCutoff, ModelSpec
from .noise import NoiseLedger, NoiseSampler, NoiseSpec, NoiseSpectrum, build_spectrum
from .torus import ScalarField, TorusGrid, VectorField, cap_magnitude_arr, field_to_bytes

PHI_FLOOR = 1e-12
BOX_TOL = 1e-12
BLOWUP_FACTOR = 10.0


class SolverBlowupError(RuntimeError):
    def __init__(self, what: str, step: int, t: float, sup: float):
        super().__init__(f"{what} blew up at step {step} (t={t:.6g}): sup = {sup:.3g}")
        self.step, self.t, self.sup = step, t, sup


class SingularDivisionError(RuntimeError):
    pass


@dataclass(frozen=True)
class RegParams:
    """Regularization ladder: gradient cap tau, eps shift, weight power.

    tau = inf disables the cap.  eps = 0 with tau = inf is only legal when
    the run certifies a positive phi floor (set ``floor_certified`` after
    checking min phi >= 2*eps_target via the subsolution companion).
    """

    tau: float = np.inf
    eps: float = 1e-2
    alpha: float = 0.25
    eta: EtaCutoff | None = None
    eta_rel_margin: float = 0.1
    floor_certified: bool = False

    def __post_init__(self):
        if not (self.tau > 0):
            raise ValueError(f"gradient cap needs tau > 0, got {self.tau}")
        if self.eps < 0:
            raise ValueError("eps shift must be >= 0")
        if not (0.0 <= self.alpha < 0.5):
            raise ValueError("weight exponent alpha must lie in [0, 1/2)")
        if self.eps == 0.0 and np.isinf(self.tau) and not self.floor_certified:
            raise ValueError(
                "eps = 0 with tau = inf requires a certified positive phi floor"
            )

    def eta_for(self, model: ModelSpec) -> EtaCutoff:
        return self.eta if self.eta is not None else model.default_eta(self.eta_rel_margin)


@dataclass(frozen=True)
class SolverConfig:
    """Step size, horizon, diffusivities and run-mode switches.

    gamma / diffusivity / singular_coeff default to the model's values.
    ``noise_refinement`` m draws each increment as the sum of m finer
    draws at dt/m, so runs at nested step sizes share a Brownian path.
    """

    dt: float = 1e-4
    t_end: float = 0.5
    gamma: float | None = None
    diffusivity: np.ndarray | None = None
    singular_coeff: np.ndarray | None = None
    record_every: int = 50
    clip_c: bool = False
    evolve_phi: bool = True
    noise_refinement: int = 1
    singular_mode: str = "quotient"  # or "grad_log" (Cole-Hopf form)

    def __post_init__(self):
        if not (self.dt > 0 and self.t_end >= self.dt):
            raise ValueError(f"need dt > 0 and t_end >= dt, got dt={self.dt}, t_end={self.t_end}")
        if self.record_every < 1 or self.noise_refinement < 1:
            raise ValueError("record_every and noise_refinement must be >= 1")
        if self.singular_mode not in ("quotient", "grad_log"):
            raise ValueError(f"unknown singular_mode {self.singular_mode!r}")

    def n_steps(self) -> int:
        return max(1, int(round(self.t_end / self.dt)))

    def bind(self, model: ModelSpec) -> "SolverConfig":
        """Fill model-default coefficients; validates positivity."""
        gamma = self.gamma if self.gamma is not None else model.gamma
        D = self.diffusivity if self.diffusivity is not None else model.diffusivity
        D = np.broadcast_to(np.asarray(D, dtype=float), (model.d,)).copy()
        S = self.singular_coeff if self.singular_coeff is not None else model.singular_coeff
        S = np.broadcast_to(np.asarray(S if S is not None else D, dtype=float), (model.d,)).copy()
        if not (gamma > 0 and np.all(D > 0)):
            raise ValueError("gamma and diffusivities must be positive")
        return replace(self, gamma=float(gamma), diffusivity=D, singular_coeff=S)


# ---- prescribed phase-field paths for the uncoupled mode ----


class PhiPath:
    """Sequential provider of (phi_k, optionally grad phi_k, d/dt phi_k)."""

    def reset(self, grid: TorusGrid, dt: float) -> None:
        pass

    def value(self, k: int) -> np.ndarray:
        raise NotImplementedError

    def grad(self, k: int) -> np.ndarray | None:
        """Analytic spatial gradient (n, N, ..., N) or None for spectral."""
        return None


class FrozenPath(PhiPath):
    def __init__(self, phi0: ScalarField, grad: VectorField | None = None):
        self._vals = phi0.values
        self._grad = None if grad is None else grad.values

    def value(self, k: int) -> np.ndarray:
        return self._vals

    def grad(self, k: int) -> np.ndarray | None:
        return self._grad


class AnalyticPath(PhiPath):
    """Path given by callables of time; gradients optional but exact."""

    def __init__(self, phi_fn: Callable, grad_fn: Callable | None = None):
        self.phi_fn = phi_fn
        self.grad_fn = grad_fn
        self._grid = None
        self._dt = None

    def reset(self, grid, dt):
        self._grid, self._dt = grid, dt

    def value(self, k):
        return np.asarray(self.phi_fn(k * self._dt, self._grid))

    def grad(self, k):
        if self.grad_fn is None:
            return None
        return np.asarray(self.grad_fn(k * self._dt, self._grid))


class HeatFlowPath(PhiPath):
    """Discrete heat evolution of phi0 with the solver's own resolvent."""

    def __init__(self, phi0: ScalarField, diffusivity: float = 1.0):
        self.phi0 = phi0.values
        self.kappa = float(diffusivity)

    def reset(self, grid, dt):
        self._grid = grid
        self._denom = 1.0 + dt * self.kappa * 4.0 * np.pi**2 * grid.k_squared
        self._k = 0
        self._hat = grid.rfft(self.phi0)
        self._val = self.phi0

    def value(self, k):
        if k < self._k:
            raise ValueError("HeatFlowPath is forward-only; replay with a fresh path")
        while self._k < k:
            self._hat = self._hat / self._denom
            self._k += 1
            self._val = self._grid.irfft(self._hat)
        return self._val


# ---- the integration engine ----


class StepContext:
    """Per-step drift decomposition handed to probes during (re)play.

    Field shapes carry the batch axis: phi_* are (B, N..), c_* are
    (B, d, N..), grad_phi is (B, n, N..).  Lazy properties derive the
    implicit-side Laplacian fields from the cached spectral states, so
    probes only pay for what they touch.  The exact relations are

        dphi = dt*(gamma*lap_phi_new + react_phi)
        dc   = dt*(lap_c_new + sing + react_c) + dM
    """

    def __init__(self, engine, k, phi_old, phi_new, c_old, c_new, grad_phi, dM, b_eta,
                 trace_inc, drift_hats, phi_react_hat, phi_new_hat, c_new_hat, nl):
        self.engine = engine
        self.grid = engine.grid
        self.k = k
        self.t = k * engine.cfg.dt
        self.dt = engine.cfg.dt
        self.phi_old, self.phi_new = phi_old, phi_new
        self.c_old, self.c_new = c_old, c_new
        self.grad_phi = grad_phi
        self.dM = dM
        self.b_eta = b_eta
        self.trace_inc = trace_inc
        self.nl = nl
        self._drift_hats = drift_hats  # (sing_hat, react_hat), dealiased
        self._phi_react_hat = phi_react_hat
        self._phi_new_hat = phi_new_hat
        self._c_new_hat = c_new_hat
        self._cache = {}

    def _memo(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def dphi(self):
        return self.phi_new - self.phi_old

    @property
    def dc(self):
        return self.c_new - self.c_old

    @property
    def sing(self):
        return self._memo("sing", lambda: self.grid.irfft(self._drift_hats[0]))

    @property
    def react_c(self):
        return self._memo("react_c", lambda: self.grid.irfft(self._drift_hats[1]))

    @property
    def react_phi(self):
        if self._phi_react_hat is None:
            return np.zeros_like(self.phi_old)
        return self._memo("react_phi", lambda: self.grid.irfft(self._phi_react_hat))

    @property
    def lap_c_new(self):
        """D * Lap(c_new), the implicit-side diffusion drift."""
        def make():
            mult = self.engine.D.reshape((-1,) + (1,) * self.grid.n) * self.grid.laplacian_multiplier
            return self.grid.irfft(mult * self._c_new_hat)
        return self._memo("lap_c_new", make)

    @property
    def lap_phi_new(self):
        """gamma * Lap(phi_new)."""
        def make():
            if self._phi_new_hat is None:
                return self.engine.gamma * self.grid.lap_arr(self.phi_new)
            return self.engine.gamma * self.grid.irfft(
                self.grid.laplacian_multiplier * self._phi_new_hat
            )
        return self._memo("lap_phi_new", make)

    @property
    def drift_c(self):
        """Total c drift: the exact (dc - dM)/dt."""
        return self.lap_c_new + self.sing + self.react_c

    @property
    def grad_c(self):
        """Spatial gradient of c_old, (B, d, n, N..); shared across probes."""
        return self._memo("grad_c", lambda: self.grid.grad_arr(self.c_old))


class Probe:
    """Observer attached to an integration; see StepContext for the data."""

    def start(self, engine) -> None:
        pass

    def on_step(self, ctx: StepContext) -> None:
        pass

    def finish(self) -> None:
        pass


class _Engine:
    def __init__(self, model: ModelSpec, grid: TorusGrid, cfg: SolverConfig, reg: RegParams,
                 spectrum: NoiseSpectrum | None):
        cfg = cfg.bind(model)
        self.model, self.grid, self.cfg, self.reg = model, grid, cfg, reg
        self.spectrum = spectrum
        self.eta = reg.eta_for(model)
        self.gamma = cfg.gamma
        self.D = cfg.diffusivity
        self.S = cfg.singular_coeff
        k2 = 4.0 * np.pi**2 * grid.k_squared
        self.denom_phi = 1.0 + cfg.dt * self.gamma * k2
        self.denom_c = 1.0 + cfg.dt * self.D.reshape((-1,) + (1,) * grid.n) * k2
        self.mask = grid.dealias_mask
        self.n = grid.n
        if model.n_spatial != grid.n:
            raise ValueError(
                f"model broadcasting rank n_spatial={model.n_spatial} does not match grid n={grid.n}"
            )

    # -- single pieces, batched over the leading axis --

    def grad_phi(self, phi_hat, count_cap=None):
        g = np.stack([self.grid.irfft(m * phi_hat) for m in self.grid.gradient_multipliers],
                     axis=-self.n - 1)
        if np.isfinite(self.reg.tau):
            mag2 = np.sum(g * g, axis=-self.n - 1)
            capped = mag2 > self.reg.tau**2
            if count_cap is not None:
                count_cap.append(int(np.count_nonzero(capped)))
            g = cap_magnitude_arr(g, self.reg.tau, self.n)
        elif count_cap is not None:
            count_cap.append(0)
        return g

    def phi_rhs_hat(self, phi, c, grad_phi, nl):
        react = self.model.g(phi, c, nl) + self.model.psi(phi, c, grad_phi, nl)
        return self.grid.rfft(react) * self.mask

    def singular_field(self, phi, c_hat, grad_phi):
        """S * grad(c).grad^tau(phi) / (phi + eps), nodewise."""
        gc = np.stack([self.grid.irfft(m * c_hat) for m in self.grid.gradient_multipliers],
                      axis=-self.n - 1)  # (B, d, n, N..)
        if self.cfg.singular_mode == "grad_log":
            z = -np.log(np.maximum(phi, PHI_FLOOR))
            gz = np.stack([self.grid.irfft(m * self.grid.rfft(z))
                           for m in self.grid.gradient_multipliers], axis=-self.n - 1)
            dots = -np.sum(gc * np.expand_dims(gz, -self.n - 2), axis=-self.n - 1)
        else:
            denom = np.expand_dims(np.expand_dims(phi + self.reg.eps, -self.n - 1), -self.n - 1)
            dots = np.sum(gc * np.expand_dims(grad_phi, -self.n - 2) / denom, axis=-self.n - 1)
        return self.S.reshape((-1,) + (1,) * self.n) * dots

    def noise_terms(self, phi, c, nl, dW):
        """(dM, b_eta, trace increment); b_eta is (.., d, N..) for diagonal
        amplitudes, (.., d, d, N..) for matrix-valued ones."""
        spatial = tuple(range(-self.n, 0))
        if self.model.b_matrix_fn is not None:
            B = self.model.b_matrix_fn(self.model, phi, c, nl)
            b_eta = np.expand_dims(self.eta(c), -self.n - 1) * B  # rows cut off
            dM = np.sum(b_eta * np.expand_dims(dW, -self.n - 2), axis=-self.n - 1)
            trace_inc = self.spectrum.trace * np.sum(
                (b_eta**2).mean(axis=spatial), axis=(-2, -1)
            )
            return dM, b_eta, trace_inc
        diag = self.model.b_diag(phi, c, nl) * self.eta(c)
        dM = diag * dW
        trace_inc = self.spectrum.trace * np.sum((diag**2).mean(axis=spatial), axis=-1)
        return dM, diag, trace_inc


def _as_batch(arr: np.ndarray, want_ndim: int) -> np.ndarray:
    return arr[None] if arr.ndim == want_ndim else arr


def integrate(
    model: ModelSpec,
    grid: TorusGrid,
    cfg: SolverConfig,
    reg: RegParams,
    noise_spec: NoiseSpec | None,
    phi0: np.ndarray,
    c0: np.ndarray,
    *,
    phi_path: PhiPath | None = None,
    path_indices: Sequence[int] | None = None,
    probes: Sequence[Probe] = (),
    keep_snapshots: bool = True,
) -> dict:
    """Batched integration core.  phi0: (B, N..), c0: (B, d, N..).

    Returns a dict with snapshot stacks, per-step streams and final
    states.  Raises SolverBlowupError / SingularDivisionError on the
    documented abort conditions.
    """
    spectrum = build_spectrum(noise_spec, grid) if noise_spec is not None else None
    eng = _Engine(model, grid, cfg, reg, spectrum)
    dt = cfg.dt
    n_steps = cfg.n_steps()
    B = phi0.shape[0]
    if path_indices is None:
        path_indices = range(B)
    samplers = None
    if spectrum is not None:
        samplers = [
            NoiseSampler(spectrum, dt, path_index=p, refinement=cfg.noise_refinement)
            for p in path_indices
        ]

    uncoupled = phi_path is not None
    if uncoupled:
        phi_path.reset(grid, dt)
        if B != 1:
            raise ValueError("prescribed-path runs integrate one path per call")

    phi = phi0.astype(float).copy()
    c = c0.astype(float).copy()
    phi_hat = grid.rfft(phi)
    c_hat = grid.rfft(c)

    for pr in probes:
        pr.start(eng)

    lower = model._col(model.lower)
    upper = model._col(model.upper)
    spatial = tuple(range(-grid.n, 0))

    snap_t, snap_phi, snap_c = [], [], []
    streams = {
        "min_phi": [], "max_phi": [], "c_excursion": [], "b_sup": [],
        "cap_active": [], "clip_active": [], "trace_inc": [],
    }

    def record_snapshot(k):
        snap_t.append(k * dt)
        snap_phi.append(phi.copy())
        snap_c.append(c.copy())

    if keep_snapshots:
        record_snapshot(0)

    want_ctx = len(probes) > 0
    for k in range(n_steps):
        if eng.reg.eps == 0.0 and cfg.singular_mode == "quotient":
            if float(phi.min()) < PHI_FLOOR:
                raise SingularDivisionError(
                    f"uncertified singular division: min phi = {phi.min():.3g} < {PHI_FLOOR} "
                    f"at step {k} with eps = 0"
                )
        cap_counts = []
        grad_phi = eng.grad_phi(phi_hat, cap_counts)
        nl = model.nonlocals(phi, c)

        # phase field update
        phi_react_hat = None
        if uncoupled:
            phi_new = _as_batch(np.asarray(phi_path.value(k + 1), dtype=float), grid.n)
            phi_new_hat = None
            pg = phi_path.grad(k)
            if pg is not None:
                grad_phi = _as_batch(pg, grid.n + 1)
                if np.isfinite(reg.tau):
                    grad_phi = cap_magnitude_arr(grad_phi, reg.tau, grid.n)
        elif cfg.evolve_phi:
            phi_react_hat = eng.phi_rhs_hat(phi, c, grad_phi, nl)
            phi_new_hat = (phi_hat + dt * phi_react_hat) / eng.denom_phi
            phi_new = grid.irfft(phi_new_hat)
        else:
            phi_new, phi_new_hat = phi, phi_hat

        sup_phi = float(np.abs(phi_new).max())
        if sup_phi > BLOWUP_FACTOR * model.k_phi:
            raise SolverBlowupError("phase field", k, k * dt, sup_phi)

        # concentration update (drift at the step's left endpoint)
        sing = eng.singular_field(phi, c_hat, grad_phi)
        react = model.f(phi, c, nl)
        if want_ctx:
            pair_hat = grid.rfft(np.stack([sing, react], axis=1)) * eng.mask
            sing_hat, react_hat = pair_hat[:, 0], pair_hat[:, 1]
            drift_hat = sing_hat + react_hat
        else:
            sing_hat = react_hat = None
            drift_hat = grid.rfft(sing + react) * eng.mask

        if samplers is not None:
            xi = np.stack([s.summed_table(k) for s in samplers])
            dW = spectrum.synthesize(xi, dt)
            dM, b_eta, trace_inc = eng.noise_terms(phi, c, nl, dW)
        else:
            dM = np.zeros_like(c)
            b_eta = np.zeros_like(c)
            trace_inc = np.zeros(B)

        c_new_hat = (c_hat + dt * drift_hat + grid.rfft(dM)) / eng.denom_c
        c_new = grid.irfft(c_new_hat)

        sup_c = float(np.abs(c_new).max())
        box_scale = float(np.abs(model.upper).max() + np.abs(model.lower).max()) + 1.0
        if sup_c > BLOWUP_FACTOR * box_scale:
            raise SolverBlowupError("concentration", k, k * dt, sup_c)

        clip_count = 0
        if cfg.clip_c:
            clipped = np.clip(c_new, lower, upper)
            clip_count = int(np.count_nonzero(clipped != c_new))
            if clip_count:
                c_new = clipped
                c_new_hat = grid.rfft(c_new)

        if want_ctx:
            ctx = StepContext(
                eng, k, phi, phi_new, c, c_new, grad_phi, dM, b_eta, trace_inc,
                (sing_hat, react_hat), phi_react_hat, phi_new_hat, c_new_hat, nl,
            )
            for pr in probes:
                pr.on_step(ctx)

        excess = np.maximum(c_new - upper, 0.0).max(axis=spatial)
        excess = np.maximum(excess, np.maximum(lower - c_new, 0.0).max(axis=spatial))
        streams["min_phi"].append(phi_new.min(axis=spatial))
        streams["max_phi"].append(phi_new.max(axis=spatial))
        streams["c_excursion"].append(excess.max(axis=-1))
        streams["b_sup"].append(np.abs(b_eta).reshape(B, -1).max(axis=1))
        streams["cap_active"].append(cap_counts[0] if cap_counts else 0)
        streams["clip_active"].append(clip_count)
        streams["trace_inc"].append(trace_inc)

        phi, c = phi_new, c_new
        phi_hat = grid.rfft(phi) if phi_new_hat is None else phi_new_hat
        c_hat = c_new_hat
        if keep_snapshots and ((k + 1) % cfg.record_every == 0 or k + 1 == n_steps):
            record_snapshot(k + 1)

    for pr in probes:
        pr.finish()

    return {
        "times": np.asarray(snap_t),
        "phi_snapshots": np.stack(snap_phi) if snap_phi else None,
        "c_snapshots": np.stack(snap_c) if snap_c else None,
        "streams": {key: np.asarray(v) for key, v in streams.items()},
        "phi_final": phi,
        "c_final": c,
        "n_steps": n_steps,
    }


# ---- public single-step operations ----


def step_phi(phi: ScalarField, c: VectorField, model: ModelSpec, cfg: SolverConfig,
             reg: RegParams) -> ScalarField:
    """One semi-implicit step of the phase-field equation."""
    eng = _Engine(model, phi.grid, cfg, reg, None)
    p = phi.values[None]
    cv = c.values[None]
    phi_hat = phi.grid.rfft(p)
    grad_phi = eng.grad_phi(phi_hat)
    nl = model.nonlocals(p, cv)
    new_hat = (phi_hat + cfg.dt * eng.phi_rhs_hat(p, cv, grad_phi, nl)) / eng.denom_phi
    out = phi.grid.irfft(new_hat)[0]
    sup = float(np.abs(out).max())
    if sup > BLOWUP_FACTOR * model.k_phi:
        raise SolverBlowupError("phase field", 0, 0.0, sup)
    return ScalarField(phi.grid, out)


def step_c(phi: ScalarField, phi_prev: ScalarField, c: VectorField, model: ModelSpec,
           cfg: SolverConfig, reg: RegParams, dW: np.ndarray | None) -> VectorField:
    """One Euler-Maruyama step of the concentration equation.

    The singular quotient and all explicit terms are evaluated at
    phi_prev, the field at the step's start; phi (the updated field) only
    enters diagnostics built on top of this step.
    """
    grid = c.grid
    eng = _Engine(model, grid, cfg, reg, None)
    p = phi_prev.values[None]
    if reg.eps == 0.0 and cfg.singular_mode == "quotient" and float(p.min()) < PHI_FLOOR:
        raise SingularDivisionError(
            f"uncertified singular division: min phi = {p.min():.3g} with eps = 0"
        )
    cv = c.values[None]
    c_hat = grid.rfft(cv)
    grad_phi = eng.grad_phi(grid.rfft(p))
    nl = model.nonlocals(p, cv)
    drift = eng.singular_field(p, c_hat, grad_phi) + model.f(p, cv, nl)
    rhs = c_hat + cfg.dt * grid.rfft(drift) * eng.mask
    if dW is not None:
        dM = model.b_diag(p, cv, nl) * eng.eta(cv) * _as_batch(np.asarray(dW), grid.n + 1)
        rhs = rhs + grid.rfft(dM)
    out = grid.irfft(rhs / eng.denom_c)[0]
    sup = float(np.abs(out).max())
    if sup > BLOWUP_FACTOR * (float(np.abs(model.upper).max() + np.abs(model.lower).max()) + 1.0):
        raise SolverBlowupError("concentration", 0, 0.0, sup)
    return VectorField(grid, out)


# ---- trajectories ----


@dataclass
class Trajectory:
    """Snapshots plus everything needed to replay the run exactly."""

    grid: TorusGrid
    model: ModelSpec
    cfg: SolverConfig
    reg: RegParams
    noise_spec: NoiseSpec | None
    mode: str
    phi0: np.ndarray
    c0: np.ndarray
    times: np.ndarray
    phi_snapshots: np.ndarray
    c_snapshots: np.ndarray
    streams: dict
    n_steps: int
    path_index: int = 0
    phi_path_factory: Callable[[], PhiPath] | None = None

    @property
    def dt(self) -> float:
        return self.cfg.dt

    def ledger(self) -> NoiseLedger:
        if self.noise_spec is None:
            raise ValueError("run had no noise; no ledger to replay")
        return NoiseLedger(
            self.noise_spec, self.grid, self.cfg.dt, self.n_steps,
            path_index=self.path_index, refinement=self.cfg.noise_refinement,
        )

    def replay(self, probes: Sequence[Probe], keep_snapshots: bool = False) -> dict:
        """Deterministic re-integration with probes attached."""
        return integrate(
            self.model, self.grid, self.cfg, self.reg, self.noise_spec,
            self.phi0[None], self.c0[None],
            phi_path=self.phi_path_factory() if self.phi_path_factory else None,
            path_indices=[self.path_index],
            probes=probes,
            keep_snapshots=keep_snapshots,
        )

    def snapshot_bytes(self) -> bytes:
        out = b""
        for i in range(len(self.times)):
            out += field_to_bytes(self.phi_snapshots[i], self.grid)
            out += field_to_bytes(self.c_snapshots[i], self.grid)
        return out

    def state_hash(self) -> str:
        return hashlib.sha256(self.snapshot_bytes()).hexdigest()

    def phi_field(self, i: int) -> ScalarField:
        return ScalarField(self.grid, self.phi_snapshots[i])

    def c_field(self, i: int) -> VectorField:
        return VectorField(self.grid, self.c_snapshots[i])


def _validate_initial(model: ModelSpec, phi0: ScalarField, c0: VectorField,
                      require_nonzero: bool = True) -> None:
    p, cv = phi0.values, c0.values
    if p.min() < -BOX_TOL or p.max() > model.k_phi + BOX_TOL:
        raise ValueError(
            f"phi0 violates [0, {model.k_phi}]: range [{p.min():.3g}, {p.max():.3g}]"
        )
    lo, hi = model._col(model.lower), model._col(model.upper)
    if np.any(cv < lo - BOX_TOL) or np.any(cv > hi + BOX_TOL):
        raise ValueError("c0 violates the invariant box")
    if require_nonzero and float(np.abs(p).max()) == 0.0:
        raise ValueError("phi0 must not vanish identically")


def run_coupled(
    model: ModelSpec,
    cfg: SolverConfig,
    reg: RegParams,
    noise_spec: NoiseSpec | None,
    phi0: ScalarField,
    c0: VectorField,
    probes: Sequence[Probe] = (),
    path_index: int = 0,
) -> Trajectory:
    """Integrate the fully coupled system for one path."""
    if model.n_spatial == 1:
        import warnings

        warnings.warn(
            "n = 1 runs sit outside the supporting theory (stated for n >= 2); "
            "results are exploratory",
            stacklevel=2,
        )
    _validate_initial(model, phi0, c0)
    out = integrate(
        model, phi0.grid, cfg.bind(model), reg, noise_spec,
        phi0.values[None], c0.values[None],
        path_indices=[path_index], probes=probes,
    )
    return Trajectory(
        grid=phi0.grid, model=model, cfg=cfg.bind(model), reg=reg, noise_spec=noise_spec,
        mode="coupled", phi0=phi0.values.copy(), c0=c0.values.copy(),
        times=out["times"], phi_snapshots=out["phi_snapshots"][:, 0],
        c_snapshots=out["c_snapshots"][:, 0], streams=out["streams"],
        n_steps=out["n_steps"], path_index=path_index,
    )


def run_uncoupled(
    model: ModelSpec,
    cfg: SolverConfig,
    reg: RegParams,
    noise_spec: NoiseSpec | None,
    phi_path_factory: Callable[[], PhiPath],
    c0: VectorField,
    probes: Sequence[Probe] = (),
    path_index: int = 0,
) -> Trajectory:
    """Integrate the concentration equation against a prescribed path.

    ``phi_path_factory`` builds a fresh PhiPath per (re)play.  Paths whose
    fields touch zero require eps > 0; the engine enforces this nodewise.
    """
    path = phi_path_factory()
    path.reset(c0.grid, cfg.dt)
    probe_phi0 = np.asarray(path.value(0), dtype=float)
    phi0 = ScalarField(c0.grid, probe_phi0 if probe_phi0.ndim == c0.grid.n else probe_phi0[0])
    _validate_initial(model, phi0, c0, require_nonzero=False)
    if reg.eps == 0.0 and cfg.singular_mode == "quotient" and float(phi0.values.min()) < PHI_FLOOR:
        raise ValueError("prescribed path touches zero; eps > 0 is mandatory here")
    out = integrate(
        model, c0.grid, cfg.bind(model), reg, noise_spec,
        phi0.values[None], c0.values[None],
        phi_path=phi_path_factory(), path_indices=[path_index], probes=probes,
    )
    return Trajectory(
        grid=c0.grid, model=model, cfg=cfg.bind(model), reg=reg, noise_spec=noise_spec,
        mode="uncoupled", phi0=phi0.values.copy(), c0=c0.values.copy(),
        times=out["times"], phi_snapshots=out["phi_snapshots"][:, 0],
        c_snapshots=out["c_snapshots"][:, 0], streams=out["streams"],
        n_steps=out["n_steps"], path_index=path_index,
        phi_path_factory=phi_path_factory,
    )


# ---- positivity companion ----


def subsolution_floor(
    phi0: ScalarField, m1: float, m2: float, t: float, cfg: SolverConfig
) -> tuple:
    """Integrate du/dt = gamma*Lap(u) - m1*u - m2*|grad u| up to time t.

    Returns (u(t), min u(t)).  With u(0) = phi0 and m1, m2 the Lipschitz
    slopes of the reaction and gradient terms, u is a pointwise floor for
    the phase field of the corresponding run.
    """
    path = subsolution_path(phi0, m1, m2, cfg, horizon=t, record=(int(round(t / cfg.dt)),))
    u = path[int(round(t / cfg.dt))]
    fld = ScalarField(phi0.grid, u)
    return fld, float(u.min())


def subsolution_path(
    phi0: ScalarField, m1: float, m2: float, cfg: SolverConfig,
    horizon: float | None = None, record: Sequence[int] | None = None,
) -> dict:
    """Floor evolution sampled at the requested step indices.

    record = None records every cfg.record_every steps (plus the ends).
    Returns {step_index: nodal array}.
    """
    if m1 < 0 or m2 < 0:
        raise ValueError("Lipschitz slopes must be nonnegative")
    vals = phi0.values
    if vals.min() < -BOX_TOL:
        raise ValueError("subsolution needs nonnegative initial data")
    if float(np.abs(vals).max()) == 0.0:
        raise ValueError("subsolution needs phi0 not identically zero")
    grid = phi0.grid
    gamma = cfg.gamma if cfg.gamma is not None else 1.0
    T = cfg.t_end if horizon is None else horizon
    n_steps = max(1, int(round(T / cfg.dt)))
    if record is None:
        record_set = {k for k in range(0, n_steps + 1) if k % cfg.record_every == 0}
        record_set |= {n_steps}
    else:
        record_set = set(int(r) for r in record)
    denom = 1.0 + cfg.dt * gamma * 4.0 * np.pi**2 * grid.k_squared
    mask = grid.dealias_mask
    u = np.maximum(vals, 0.0)
    u_hat = grid.rfft(u)
    out = {}
    if 0 in record_set:
        out[0] = u.copy()
    for k in range(n_steps):
        g = np.stack([grid.irfft(m * u_hat) for m in grid.gradient_multipliers], axis=0)
        speed = np.sqrt(np.sum(g * g, axis=0))
        rhs = -m1 * u - m2 * speed
        u_hat = (u_hat + cfg.dt * grid.rfft(rhs) * mask) / denom
        u = grid.irfft(u_hat)
        if k + 1 in record_set:
            out[k + 1] = u.copy()
    return out
