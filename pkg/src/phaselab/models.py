"""Reaction terms, noise amplitudes, and the invariant box.

A model bundles the nonlinearities of the system: the phase-field reaction
g, the concentration reaction f (possibly steered by nonlocal means), the
gradient-coupled terms Psi_i(phi, c) * varphi_i(grad phi), and the
multiplicative noise amplitude b.  Solutions are meant to live in
phi in [0, K_phi] and c in the box K = prod [L_i, K_i]; the reaction sign
structure at the faces plus the noise cutoff eta (supported on K) are what
keep them there, and ``validate_invariance`` audits exactly that on
randomized states.

Evaluation functions take raw arrays with arbitrary leading batch axes.
phi has shape (..., N, N), c has shape (..., d, N, N) and nonlocal scalars
broadcast from shape (..., 1, 1).  A ModelSpec is immutable after
construction and safe to share across concurrent paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .torus import ScalarField, TorusGrid, VectorField


def smoothstep(t: np.ndarray) -> np.ndarray:
    """Cubic Hermite ramp 3t^2 - 2t^3 clamped to [0, 1]; max slope 3/2."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@dataclass(frozen=True)
class EtaCutoff:
    """C^1 plateau cutoff supported on the box, per component.

    eta_i is 1 on the margin-inset of [L_i, K_i], 0 outside, and joins the
    two through cubic Hermite ramps of width margin_i.  Each component is
    Lipschitz with constant 3/(2 margin_i).
    """

    lower: np.ndarray
    upper: np.ndarray
    margins: np.ndarray
    n_spatial: int = 2

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        mg = np.broadcast_to(np.asarray(self.margins, dtype=float), lo.shape).copy()
        if np.any(mg <= 0) or np.any(mg >= (hi - lo) / 2):
            raise ValueError("eta margin must lie in (0, (K_i - L_i)/2) per component")
        for name, v in (("lower", lo), ("upper", hi), ("margins", mg)):
            object.__setattr__(self, name, v)

    @classmethod
    def for_box(cls, lower, upper, rel_margin: float = 0.1, n_spatial: int = 2) -> "EtaCutoff":
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        return cls(lo, hi, rel_margin * (hi - lo), n_spatial)

    def _col(self, arr: np.ndarray) -> np.ndarray:
        return arr.reshape(arr.shape + (1,) * self.n_spatial)

    def __call__(self, c: np.ndarray) -> np.ndarray:
        """Componentwise cutoff of c with shape (..., d, N, ..., N)."""
        up = smoothstep((c - self._col(self.lower)) / self._col(self.margins))
        down = smoothstep((self._col(self.upper) - c) / self._col(self.margins))
        return up * down

    def lipschitz_bounds(self) -> np.ndarray:
        return 1.5 / self.margins


NonlocalFn = Callable[["ModelSpec", np.ndarray, np.ndarray], dict]
ReactionFn = Callable[["ModelSpec", np.ndarray, np.ndarray, dict], np.ndarray]
PsiTerm = tuple  # (prefactor: ReactionFn, vec_fn: Callable[[np.ndarray], np.ndarray])


@dataclass(frozen=True)
class ModelSpec:
    """Immutable reaction/noise structure plus the invariant box."""

    name: str
    d: int
    lower: np.ndarray
    upper: np.ndarray
    params: dict
    g_fn: ReactionFn
    f_fn: ReactionFn
    psi_terms: tuple = ()
    b_diag_fn: ReactionFn | None = None
    b_matrix_fn: ReactionFn | None = None
    nonlocal_fn: NonlocalFn | None = None
    k_phi: float = 1.0
    gamma: float = 1.0
    diffusivity: np.ndarray | None = None
    singular_coeff: np.ndarray | None = None
    constrain_state: Callable[[np.ndarray], np.ndarray] | None = None
    n_spatial: int = 2

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != (self.d,) or hi.shape != (self.d,):
            raise ValueError(f"box bounds must have shape ({self.d},)")
        if not np.all(lo < hi):
            raise ValueError(f"box needs L_i < K_i componentwise, got L={lo}, K={hi}")
        if not np.all(np.isfinite(list(self.params.values()))):
            raise ValueError("model parameters must be finite")
        D = self.diffusivity if self.diffusivity is not None else np.ones(self.d)
        D = np.broadcast_to(np.asarray(D, dtype=float), (self.d,)).copy()
        S = self.singular_coeff if self.singular_coeff is not None else D
        S = np.broadcast_to(np.asarray(S, dtype=float), (self.d,)).copy()
        if not (self.k_phi > 0 and np.all(D > 0) and self.gamma > 0):
            raise ValueError("need K_phi > 0, gamma > 0 and positive diffusivities")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "diffusivity", D)
        object.__setattr__(self, "singular_coeff", S)

    # -- shapes: phi (..., N, N); c (..., d, N, N) --

    def _col(self, arr: np.ndarray) -> np.ndarray:
        return np.asarray(arr).reshape((self.d,) + (1,) * self.n_spatial)

    def clip_phi(self, phi: np.ndarray) -> np.ndarray:
        return np.clip(phi, 0.0, self.k_phi)

    def clip_c(self, c: np.ndarray) -> np.ndarray:
        return np.clip(c, self._col(self.lower), self._col(self.upper))

    def nonlocals(self, phi: np.ndarray, c: np.ndarray) -> dict:
        if self.nonlocal_fn is None:
            return {}
        return self.nonlocal_fn(self, phi, c)

    def g(self, phi, c, nl) -> np.ndarray:
        return self.g_fn(self, phi, c, nl)

    def f(self, phi, c, nl) -> np.ndarray:
        return self.f_fn(self, phi, c, nl)

    def psi(self, phi, c, grad_phi, nl) -> np.ndarray:
        """Sum of Psi_i(phi, c) * varphi_i(grad phi); zero if no terms."""
        out = 0.0
        for pref, vec_fn in self.psi_terms:
            out = out + pref(self, phi, c, nl) * vec_fn(self, grad_phi)
        return out if isinstance(out, np.ndarray) else np.zeros_like(phi)

    def b_diag(self, phi, c, nl) -> np.ndarray:
        if self.b_diag_fn is None:
            raise ValueError(f"model {self.name} has no diagonal amplitude")
        return self.b_diag_fn(self, phi, c, nl)

    def default_eta(self, rel_margin: float = 0.1) -> EtaCutoff:
        return EtaCutoff.for_box(self.lower, self.upper, rel_margin, self.n_spatial)

    def _mean(self, arr: np.ndarray) -> np.ndarray:
        return arr.mean(axis=tuple(range(-self.n_spatial, 0)), keepdims=True)

    def sample_state(self, rng: np.random.Generator, grid: TorusGrid, pin=None) -> tuple:
        """Random (phi, c) nodal state in X_phi x X_c for the validators.

        pin=(i, value) fixes component i of c to a face value; models with
        an extra reachable-state constraint post-process through
        ``constrain_state`` (which must respect pins at face values).
        """
        phi = rng.uniform(0.0, self.k_phi, size=grid.shape)
        c = rng.uniform(
            self._col(self.lower), self._col(self.upper), size=(self.d,) + grid.shape
        )
        if self.constrain_state is not None:
            c = self.constrain_state(c, pin=None)
        if pin is not None:
            i, value = pin
            c[i] = value
            if self.constrain_state is not None:
                c = self.constrain_state(c, pin=pin)
        return phi, c


# ---- public field-typed operations ----


def _check_inputs(phi: ScalarField, c: VectorField, model: ModelSpec) -> None:
    if c.d != model.d:
        raise ValueError(f"model {model.name} expects d={model.d} components, got {c.d}")
    if not (np.all(np.isfinite(phi.values)) and np.all(np.isfinite(c.values))):
        raise ValueError("model evaluation rejects non-finite states")


def eval_g(model: ModelSpec, phi: ScalarField, c: VectorField) -> ScalarField:
    _check_inputs(phi, c, model)
    nl = model.nonlocals(phi.values, c.values)
    return ScalarField(phi.grid, model.g(phi.values, c.values, nl))


def eval_f(model: ModelSpec, phi: ScalarField, c: VectorField) -> VectorField:
    _check_inputs(phi, c, model)
    nl = model.nonlocals(phi.values, c.values)
    return VectorField(phi.grid, model.f(phi.values, c.values, nl))


def eval_psi(model: ModelSpec, phi: ScalarField, c: VectorField, grad_phi: VectorField) -> ScalarField:
    _check_inputs(phi, c, model)
    if grad_phi.d != phi.grid.n:
        raise ValueError("eval_psi expects the spatial gradient of phi")
    nl = model.nonlocals(phi.values, c.values)
    return ScalarField(phi.grid, model.psi(phi.values, c.values, grad_phi.values, nl))


def eval_b_eta(model: ModelSpec, eta: EtaCutoff, phi: ScalarField, c: VectorField) -> np.ndarray:
    """Cutoff noise amplitude as a (d, d, N, ..., N) matrix field.

    Rows are scaled by the componentwise cutoff (the diagonal product
    eta(c) applied from the left).
    """
    _check_inputs(phi, c, model)
    nl = model.nonlocals(phi.values, c.values)
    et = eta(c.values)
    d = model.d
    if model.b_matrix_fn is not None:
        B = model.b_matrix_fn(model, phi.values, c.values, nl)
        return np.expand_dims(et, -model.n_spatial - 1) * B
    out = np.zeros((d, d) + phi.grid.shape)
    diag = model.b_diag(phi.values, c.values, nl) * et
    for i in range(d):
        out[i, i] = diag[i]
    return out


def clip_to_K(c: VectorField, model: ModelSpec) -> VectorField:
    return VectorField(c.grid, model.clip_c(c.values))


def estimate_lipschitz(
    model: ModelSpec, grid: TorusGrid, samples: int = 32, seed: int = 0
) -> tuple:
    """Empirical (M1, M2): slope of g in phi and gradient-slope of Psi.

    Monte Carlo estimates over random admissible states, not certificates;
    they feed the subsolution companion in :mod:`phaselab.dynamics`.
    """
    rng = np.random.default_rng(seed)
    m1 = 0.0
    m2 = 0.0
    eps = 1e-5
    for _ in range(samples):
        phi, c = model.sample_state(rng, grid)
        nl = model.nonlocals(phi, c)
        phi2 = np.clip(phi + eps, 0.0, model.k_phi)
        dg = np.abs(model.g(phi2, c, nl) - model.g(phi, c, nl)) / np.maximum(phi2 - phi, 1e-300)
        m1 = max(m1, float(dg.max()))
        pref_sum = 0.0
        for pref, _vec in model.psi_terms:
            pref_sum = pref_sum + np.abs(pref(model, phi, c, nl))
        if model.psi_terms:
            m2 = max(m2, float(np.max(pref_sum)))
    return m1, m2


def validate_invariance(
    model: ModelSpec, samples: int = 100, seed: int = 0, grid: TorusGrid | None = None, tol: float = 1e-9
) -> dict:
    """Randomized audit of the face sign conditions and g-vanishing.

    Checks, on ``samples`` random states in X_phi x X_c,
      * f_i >= 0 where c_i sits at the lower face L_i,
      * f_i <= 0 where c_i sits at the upper face K_i,
      * g == 0 for phi identically 0 and identically K_phi,
      * sup |g(phi, c)| / max(phi, 1e-8) stays finite,
    and reports empirical Lipschitz estimates.  Report-only: violations are
    listed, nothing raises.
    """
    grid = grid or TorusGrid(2, 16)
    rng = np.random.default_rng(seed)
    violations = []
    g_over_phi = 0.0
    for idx in range(samples):
        for i in range(model.d):
            for face, name, sign in (
                (model.lower[i], "lower", +1.0),
                (model.upper[i], "upper", -1.0),
            ):
                phi, c = model.sample_state(rng, grid, pin=(i, face))
                nl = model.nonlocals(phi, c)
                fi = model.f(phi, c, nl)[i]
                worst = float((sign * fi).min())
                if worst < -tol:
                    violations.append(
                        {"sample": idx, "component": i, "face": name, "min_inward": worst}
                    )
        phi, c = model.sample_state(rng, grid)
        nl0 = model.nonlocals(np.zeros(grid.shape), c)
        nl1 = model.nonlocals(np.full(grid.shape, model.k_phi), c)
        g0 = float(np.abs(model.g(np.zeros(grid.shape), c, nl0)).max())
        g1 = float(np.abs(model.g(np.full(grid.shape, model.k_phi), c, nl1)).max())
        if g0 > tol or g1 > tol:
            violations.append({"sample": idx, "face": "phi", "g_at_0": g0, "g_at_kphi": g1})
        nl = model.nonlocals(phi, c)
        ratio = np.abs(model.g(phi, c, nl)) / np.maximum(phi, 1e-8)
        g_over_phi = max(g_over_phi, float(ratio.max()))
    m1, m2 = estimate_lipschitz(model, grid, samples=min(samples, 16), seed=seed + 1)
    return {
        "model": model.name,
        "samples": samples,
        "violations": violations,
        "n_violations": len(violations),
        "sup_g_over_phi": g_over_phi,
        "lipschitz_g_phi": m1,
        "lipschitz_psi_grad": m2,
    }


# ---- presets ----


def _comp(model, c: np.ndarray, i: int) -> np.ndarray:
    return np.take(c, i, axis=-(model.n_spatial + 1))


def _stack(model, comps) -> np.ndarray:
    return np.stack(comps, axis=-(model.n_spatial + 1))


def _expand(model, x: np.ndarray) -> np.ndarray:
    return np.expand_dims(x, axis=-(model.n_spatial + 1))


def _abs_nonlocals(model, phi, c, clip_delta=(0.05, 0.95)):
    phit = model.clip_phi(phi)
    ct = model.clip_c(c)
    p = model.params
    mean_phi = model._mean(phit)
    mean_phic = model._mean(phit * _comp(model, ct, 0))
    delta = p["delta0"] + p["M"] * (mean_phic - p["A1"])
    return {
        "mean_phi": mean_phi,
        "mean_phic": mean_phic,
        "delta": np.clip(delta, clip_delta[0], clip_delta[1]),
    }


def _cubic(x, root_mid, scale):
    return -scale * x * (x - 1.0) * (x - root_mid)


def _abs_g(model, phi, c, nl):
    return _cubic(phi, 0.5, model.params["K"])


def _abs_f(model, phi, c, nl):
    p = model.params
    x = _comp(model, c, 0)
    out = _cubic(x, nl["delta"], p["K_alpha"]) - p["rho"] * x
    return _expand(model, out)


def _abs_b(model, phi, c, nl):
    return _expand(model, phi * (1.0 - phi))


def _abs_psi_area(model, phi, c, nl):
    return model.params["beta"] * (nl["mean_phi"] - model.params["A0"]) * np.ones_like(phi)


def _abs_psi_chem(model, phi, c, nl):
    return model.params["alpha"] * _comp(model, model.clip_c(c), 0)


def _norm(model, vec):
    return np.sqrt(np.sum(vec * vec, axis=-(model.n_spatial + 1)))


def _make_abs(params: dict) -> ModelSpec:
    p = {
        "K": 1.0, "K_alpha": 1.0, "delta0": 0.5, "M": 0.5, "A0": 0.3, "A1": 0.1,
        "alpha": 0.5, "beta": 1.0, "gamma": 0.01, "D": 0.1, "rho": 0.2,
    }
    p.update(params)
    return ModelSpec(
        name="abs",
        d=1,
        lower=[0.0],
        upper=[1.0],
        params=p,
        g_fn=_abs_g,
        f_fn=_abs_f,
        psi_terms=((_abs_psi_area, _norm), (_abs_psi_chem, _norm)),
        b_diag_fn=_abs_b,
        nonlocal_fn=_abs_nonlocals,
        gamma=p["gamma"],
        diffusivity=[p["D"]],
    )


def _kb_g(model, phi, c, nl):
    z = _comp(model, model.clip_c(c), 0)
    return model.params["K"] * phi * (1.0 - phi) * (phi - z * z)


def _kb_f(model, phi, c, nl):
    out = -2.0 * model.params["G"] * (1.0 - model.clip_phi(phi)) * _comp(model, c, 0)
    return _expand(model, out)


def _kb_b(model, phi, c, nl):
    return np.ones_like(c)


def _make_kb(params: dict) -> ModelSpec:
    # population density phi and phenotype z; the logarithmic-derivative
    # coefficient (2) deliberately differs from the z-diffusivity (1).
    p = {"G": 1.0, "K": 1.0, "gamma": 1.0, "D": 1.0, "S": 2.0}
    p.update(params)
    return ModelSpec(
        name="kirkpatrick_barton",
        d=1,
        lower=[0.0],
        upper=[1.0],
        params=p,
        g_fn=_kb_g,
        f_fn=_kb_f,
        b_diag_fn=_kb_b,
        gamma=p["gamma"],
        diffusivity=[p["D"]],
        singular_coeff=[p["S"]],
    )


def _cr_f(model, phi, c, nl):
    p = model.params
    ct = model.clip_c(c)
    R, S = _comp(model, ct, 0), _comp(model, ct, 1)
    fR = (p["c2"] * S - p["c1"] * R) / p["tau_r"]
    hill = p["k_s"] * S**2 / (p["K_s"] ** 2 + S**2)
    fS = (hill + p["b_act"]) * (p["S1"] - S) - (p["d1"] + p["d2"] * R) * S
    return _stack(model, [fR, fS])


def _cr_g(model, phi, c, nl):
    return _cubic(phi, 0.5, model.params["K"])


def _cr_b(model, phi, c, nl):
    return np.ones_like(c)


def _cr_psi_act(model, phi, c, nl):
    p = model.params
    S = _comp(model, model.clip_c(c), 1)
    return p["alpha"] * S**3 / (S**3 + p["S2"] ** 3)


def _cr_psi_area(model, phi, c, nl):
    return -model.params["beta"] * (nl["mean_phi"] - model.params["A0"]) * np.ones_like(phi)


def _cr_nonlocals(model, phi, c):
    return {"mean_phi": model._mean(model.clip_phi(phi))}


def _make_cao_rappel(params: dict) -> ModelSpec:
    # membrane-slow approximation: d(phi R) ~ phi dR, no d/dt(log phi) term
    p = {
        "S1": 1.0, "S2": 0.5, "k_s": 1.0, "K_s": 0.5, "c1": 1.0, "c2": 1.0,
        "tau_r": 1.0, "d1": 0.5, "d2": 0.5, "b_act": 0.1, "D_R": 0.1, "D_S": 0.1,
        "K": 1.0, "alpha": 0.5, "beta": 1.0, "A0": 0.3, "gamma": 0.01,
    }
    p.update(params)
    if p["c2"] > p["c1"]:
        raise ValueError("cao_rappel box invariance needs c2 <= c1")
    return ModelSpec(
        name="cao_rappel",
        d=2,
        lower=[0.0, 0.0],
        upper=[p["S1"], p["S1"]],
        params=p,
        g_fn=_cr_g,
        f_fn=_cr_f,
        psi_terms=((_cr_psi_act, _norm), (_cr_psi_area, _norm)),
        b_diag_fn=_cr_b,
        nonlocal_fn=_cr_nonlocals,
        gamma=p["gamma"],
        diffusivity=[p["D_R"], p["D_S"]],
    )


def _torres_f(model, phi, c, nl):
    p = model.params
    ct = model.clip_c(c)
    u, v, F = (_comp(model, ct, i) for i in range(3))
    exchange_in = (p["b_t"] + p["gamma_t"] * u**2) * v
    exchange_out = (1.0 + p["s_t"] * F + u**2) * u
    fu = exchange_in - exchange_out
    fv = -exchange_in + exchange_out
    fF = p["eta_t"] * (p["p0"] + p["p1"] * u - F)
    return _stack(model, [fu, fv, fF])


def _torres_g(model, phi, c, nl):
    return _cubic(phi, 0.5, model.params["K"])


def _torres_b(model, phi, c, nl):
    return np.ones_like(c)


def _torres_psi_h(model, phi, c, nl):
    return model.params["alpha"] * _comp(model, model.clip_c(c), 0)


def _torres_psi_area(model, phi, c, nl):
    return -model.params["beta"] * (nl["mean_phi"] - model.params["A0"]) * np.ones_like(phi)


def _torres_nonlocals(model, phi, c):
    return {"mean_phi": model._mean(model.clip_phi(phi))}


def _torres_constrain(c: np.ndarray, pin=None) -> np.ndarray:
    """Project (u, v) onto the mass-compatible region u + v <= 1.

    The u/v exchange is conservative and all three diffusivities agree, so
    u + v obeys a maximum principle; the box faces are only reached from
    states with u + v <= 1, which is what the face audit samples.  A pinned
    u or v component is preserved and the partner reduced to fit.
    """
    out = c.copy()
    if pin is not None and pin[0] in (0, 1):
        held, other = pin[0], 1 - pin[0]
        out[other] = np.minimum(out[other], 1.0 - out[held])
        return out
    tot = out[0] + out[1]
    scale = np.where(tot > 1.0, 1.0 / np.maximum(tot, 1e-300), 1.0)
    out[0] *= scale
    out[1] *= scale
    return out


def _make_torres(params: dict) -> ModelSpec:
    p = {
        "b_t": 0.5, "gamma_t": 0.5, "s_t": 1.0, "eta_t": 1.0, "p0": 0.5, "p1": 0.5,
        "D": 1.0, "D_F": 1.0, "K": 1.0, "alpha": 0.5, "beta": 1.0, "A0": 0.3, "gamma": 0.01,
    }
    p.update(params)
    if abs(p["p0"] + p["p1"] - 1.0) > 1e-12:
        raise ValueError("torres preset requires p0 + p1 = 1")
    return ModelSpec(
        name="torres",
        d=3,
        lower=[0.0, 0.0, 0.0],
        upper=[1.0, 1.0, 1.0],
        params=p,
        g_fn=_torres_g,
        f_fn=_torres_f,
        psi_terms=((_torres_psi_h, _norm), (_torres_psi_area, _norm)),
        b_diag_fn=_torres_b,
        nonlocal_fn=_torres_nonlocals,
        gamma=p["gamma"],
        diffusivity=[p["D"], 1.0, p["D_F"]],
        constrain_state=_torres_constrain,
    )


_PRESETS = {
    "abs": _make_abs,
    "kirkpatrick_barton": _make_kb,
    "cao_rappel": _make_cao_rappel,
    "torres": _make_torres,
}


def make_model(name: str, overrides: dict | None = None) -> ModelSpec:
    """Build a preset model, optionally overriding named parameters."""
    if name not in _PRESETS:
        raise ValueError(f"unknown model preset {name!r}; have {sorted(_PRESETS)}")
    return _PRESETS[name](dict(overrides or {}))


def preset_names() -> list:
    return sorted(_PRESETS)
