"""Numerical audit of the identities and a-priori bounds behind the solver.

Every check here re-derives some exact or asymptotic statement about the
dynamics from simulated trajectories: weighted admissibility integrals and
their guard sensitivity, the uniform-in-alpha gradient bound, the
chain-rule identity tying weights to the zero set of the initial phase
field, discrete Ito identities for squares and products, empirical
quadratic variation against the covariance the noise was built from, the
log-transform residual of the pure heat flow, and weighted weak-form
residuals in the three bookkeeping conventions (plain, phi-weighted,
small-power expanded).

Mechanically, each operation replays a Trajectory deterministically (see
``Trajectory.replay``) with a probe attached; the probe receives the
per-step drift decomposition (StepContext) whose pieces telescope exactly
to the state increments, so any residual reported below measures a real
inconsistency (discretization error, regularization defect, or an injected
bookkeeping fault), never time-integration storage loss.

Quotients |grad phi|^2 / phi^p never divide by raw phi: the denominator is
max(phi_+, guard) with a reportable guard (default 1e-12), and every
result reports whether the guard was active.  Small-power weights use the
support convention rho = (phi_+)^alpha, which vanishes exactly on the
numerical zero set, matching the support property admissible weights must
have.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .dynamics import Probe, StepContext, Trajectory
from .noise import NoiseSpectrum, build_spectrum
from .torus import TorusGrid

DEFAULT_GUARD = 1e-12


# ---- report containers ----


@dataclass
class CheckResult:
    check_id: str
    value: float
    tolerance: float
    passed: bool
    formula: str = ""
    config_hash: str = ""
    details: dict = field(default_factory=dict)
    series: np.ndarray | None = None


@dataclass
class DiagnosticsReport:
    entries: list = field(default_factory=list)
    config_hash: str = ""

    def add(self, check_id: str, value: float, tolerance: float, passed: bool | None = None,
            formula: str = "", details: dict | None = None, series=None) -> CheckResult:
        if passed is None:
            passed = bool(value <= tolerance)
        res = CheckResult(check_id, float(value), float(tolerance), bool(passed), formula,
                          self.config_hash, details or {}, series)
        self.entries.append(res)
        return res

    def extend(self, other: "DiagnosticsReport") -> None:
        self.entries.extend(other.entries)

    @property
    def n_failed(self) -> int:
        return sum(0 if e.passed else 1 for e in self.entries)

    def all_passed(self) -> bool:
        return self.n_failed == 0

    def lines(self) -> list:
        out = []
        for e in sorted(self.entries, key=lambda r: r.passed):
            status = "PASS" if e.passed else "FAIL"
            out.append(
                f"[{status}] {e.check_id}: value={e.value:.6g} tol={e.tolerance:.3g}"
                + (f" ({e.formula})" if e.formula else "")
            )
        return out

    def write_text(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["check_id", "value", "tolerance", "passed", "formula", "config_hash"])
            for e in self.entries:
                w.writerow([e.check_id, e.value, e.tolerance, int(e.passed), e.formula,
                            e.config_hash])

    def write_series_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["check_id", "index", "value"])
            for e in self.entries:
                if e.series is None:
                    continue
                for i, v in enumerate(np.ravel(e.series)):
                    w.writerow([e.check_id, i, v])


# ---- test functions ----


def build_test_functions(grid: TorusGrid, seed: int = 0, include_random: bool = True) -> list:
    """Real Fourier modes with |k|_inf <= 1 plus one seeded random
    band-limited field; the default probe basis for weak-form checks."""
    vecs = [np.ones(grid.shape)]
    coords = grid.axes_coords
    ks = []
    if grid.n == 1:
        ks = [(1,)]
    elif grid.n == 2:
        ks = [(1, 0), (0, 1), (1, 1), (1, -1)]
    else:
        for kx in (-1, 0, 1):
            for ky in (-1, 0, 1):
                for kz in (0, 1):
                    k = (kx, ky, kz)
                    if k <= (0, 0, 0) or (kz == 0 and (kx, ky) <= (0, 0)):
                        continue
                    ks.append(k)
    for k in ks:
        phase = 2 * np.pi * sum(ki * x for ki, x in zip(k, coords))
        vecs.append(np.sqrt(2.0) * np.cos(phase))
        vecs.append(np.sqrt(2.0) * np.sin(phase))
    if include_random:
        rng = np.random.default_rng(seed)
        raw = rng.standard_normal(grid.shape)
        vals = grid.irfft(grid.rfft(raw) * (grid.k_squared <= 9.0))
        vecs.append(vals / max(1e-12, np.abs(vals).max()))
    return vecs


# ---- weights ----


@dataclass(frozen=True)
class Weight:
    """Weight path specification for admissibility / weak-form audits.

    kinds: "one" (constant 1), "phi_alpha" ((phi_+ + shift)^alpha, following
    the run's phase field), "sqrt_heat" (sqrt of the heat flow started at
    phi0, integrated with the same resolvent stepping as the run), or
    "user" (callable step -> field).
    """

    kind: str = "one"
    alpha: float = 0.25
    shift: float = 0.0
    heat_diffusivity: float | None = None
    user_fn: Callable[[int], np.ndarray] | None = None

    def label(self) -> str:
        if self.kind == "phi_alpha":
            return f"phi^{self.alpha:g}" + (f"+{self.shift:g}" if self.shift else "")
        if self.kind == "sqrt_heat":
            return "sqrt_heat"
        return self.kind


class _WeightTracker:
    """Produces rho at the old/new edge of each step during a replay."""

    def __init__(self, weight: Weight, engine, phi0: np.ndarray):
        self.weight = weight
        self.grid = engine.grid
        self.n = engine.grid.n
        if weight.kind == "sqrt_heat":
            kappa = weight.heat_diffusivity
            kappa = engine.gamma if kappa is None else float(kappa)
            k2 = 4.0 * np.pi**2 * self.grid.k_squared
            self._denom = 1.0 + engine.cfg.dt * kappa * k2
            self._h = phi0.copy()
            self._h_hat = self.grid.rfft(phi0)
        self._rho_old = self._eval(phi0, 0)

    def _eval(self, phi: np.ndarray, k: int) -> np.ndarray:
        w = self.weight
        if w.kind == "one":
            return np.ones_like(phi)
        if w.kind == "phi_alpha":
            return (np.maximum(phi, 0.0) + w.shift) ** w.alpha
        if w.kind == "sqrt_heat":
            return np.sqrt(np.maximum(self._h, 0.0))
        if w.kind == "user":
            return np.asarray(w.user_fn(k), dtype=float)
        raise ValueError(f"unknown weight kind {w.kind!r}")

    def step(self, ctx: StepContext) -> tuple:
        """(rho_old, rho_new) across step k; advances internal paths."""
        rho_old = self._rho_old
        if self.weight.kind == "sqrt_heat":
            self._h_hat = self._h_hat / self._denom
            self._h = self.grid.irfft(self._h_hat)
        rho_new = self._eval(ctx.phi_new, ctx.k + 1)
        self._rho_old = rho_new
        return rho_old, rho_new


def _smean(arr: np.ndarray, n: int) -> np.ndarray:
    return arr.mean(axis=tuple(range(-n, 0)))


def _guarded(phi: np.ndarray, guard: float) -> np.ndarray:
    return np.maximum(phi, guard)


# ---- admissibility ----


class _AdmissibilityProbe(Probe):
    def __init__(self, weight: Weight, guards: Sequence[float]):
        self.weight = weight
        self.guards = list(guards)

    def start(self, engine):
        self.n = engine.grid.n
        self.dt = engine.cfg.dt
        self.totals = {g: 0.0 for g in self.guards}
        self.guard_nodes = {g: 0 for g in self.guards}
        self._tracker = None
        self._engine = engine

    def on_step(self, ctx: StepContext):
        if self._tracker is None:
            self._tracker = _WeightTracker(self.weight, self._engine, ctx.phi_old)
        rho_old, _ = self._tracker.step(ctx)
        g2 = np.sum(ctx.grad_phi**2, axis=-self.n - 1)
        phi_pos = np.maximum(ctx.phi_old, 0.0)
        rho2 = rho_old**2
        for g in self.guards:
            quot = g2 / _guarded(phi_pos, g) ** 2
            self.totals[g] += self.dt * float(np.sum(_smean(rho2 * quot, self.n)))
            self.guard_nodes[g] += int(np.count_nonzero((phi_pos < g) & (rho2 > 0)))


def admissibility_integral(traj: Trajectory, weight: Weight,
                           guard: float = DEFAULT_GUARD) -> dict:
    """Discrete integral of rho^2 |grad phi|^2 / phi^2 along the run.

    Returns the guarded value plus guard-activation counts; see
    ``guard_sweep`` for the divergence-detection variant.
    """
    out = guard_sweep(traj, weight, [guard])
    return {
        "value": out["values"][guard],
        "guard": guard,
        "guard_active_nodes": out["guard_nodes"][guard],
        "weight": weight.label(),
    }


def guard_sweep(traj: Trajectory, weight: Weight, guards: Sequence[float]) -> dict:
    """Guarded admissibility integrals for several guards in one replay."""
    probe = _AdmissibilityProbe(weight, guards)
    traj.replay([probe])
    return {"values": dict(probe.totals), "guard_nodes": dict(probe.guard_nodes),
            "weight": weight.label()}


# ---- uniform-in-alpha scan and log norms ----


class _AlphaScanProbe(Probe):
    def __init__(self, alphas: Sequence[float], guard: float):
        self.alphas = list(alphas)
        self.guard = guard

    def start(self, engine):
        self.n = engine.grid.n
        self.dt = engine.cfg.dt
        self.raw = {a: 0.0 for a in self.alphas}
        self.log_quot = 0.0
        self.sup_log_l1 = 0.0

    def on_step(self, ctx: StepContext):
        g2 = np.sum(ctx.grad_phi**2, axis=-self.n - 1)
        phig = _guarded(np.maximum(ctx.phi_old, 0.0), self.guard)
        for a in self.alphas:
            val = float(np.sum(_smean(g2 * phig ** (2.0 * a - 2.0), self.n)))
            self.raw[a] += self.dt * val
        self.log_quot += self.dt * float(np.sum(_smean(g2 / phig**2, self.n)))
        self.sup_log_l1 = max(self.sup_log_l1, float(np.max(_smean(np.abs(np.log(phig)), self.n))))


def alpha_scan(traj: Trajectory, alphas: Sequence[float],
               guard: float = DEFAULT_GUARD) -> dict:
    """alpha * integral of |grad phi|^2 / phi^(2-2alpha) per alpha.

    The uniform bound says these stay comparable across alpha in (0, 1/2);
    the report carries max/min ratio and the trend toward small alpha.
    """
    for a in alphas:
        if not (0.0 < a < 0.5):
            raise ValueError(f"alpha scan needs alphas in (0, 1/2), got {a}")
    probe = _AlphaScanProbe(alphas, guard)
    traj.replay([probe])
    values = {a: a * probe.raw[a] for a in alphas}
    ordered = [values[a] for a in sorted(alphas, reverse=True)]
    ratios = [ordered[i + 1] / max(ordered[i], 1e-300) for i in range(len(ordered) - 1)]
    return {
        "values": values,
        "max_over_min": max(ordered) / max(min(ordered), 1e-300),
        "increasing_steps_toward_small_alpha": sum(1 for r in ratios if r > 1.0 + 1e-9),
        "step_ratios": ratios,
        "log_gradient_integral": probe.log_quot,
        "sup_log_l1": probe.sup_log_l1,
    }


def log_norm_bound(traj: Trajectory, m2: float, g_over_phi: float,
                   guard: float = DEFAULT_GUARD) -> dict:
    """sup_t ||log phi_t||_L1 against ||log phi_0||_L1 + C*T.

    C is assembled from the gradient-term slope m2 and sup |g/phi|, the
    constants the a-priori log estimate rests on.
    """
    probe = _AlphaScanProbe([0.25], guard)
    traj.replay([probe])
    phig0 = _guarded(np.maximum(traj.phi0, 0.0), guard)
    log0 = float(np.mean(np.abs(np.log(phig0))))
    T = traj.cfg.dt * traj.n_steps
    C = 2.0 * m2**2 + g_over_phi
    return {
        "sup_log_l1": probe.sup_log_l1,
        "log_l1_initial": log0,
        "bound": log0 + C * T,
        "log_gradient_integral": probe.log_quot,
        "satisfied": probe.sup_log_l1 <= log0 + C * T + 1e-9,
    }


# ---- weight-support chain-rule identity ----


class _WeightSupportProbe(Probe):
    def __init__(self, weight: Weight, alpha: float, guard: float):
        self.weight = weight
        self.alpha = alpha
        self.guard = guard

    def start(self, engine):
        self.n = engine.grid.n
        self.grid = engine.grid
        self.dt = engine.cfg.dt
        self.gamma = engine.gamma
        self._engine = engine
        self._tracker = None
        self.terms = {"quotient": 0.0, "cross": 0.0, "reaction": 0.0, "drho": 0.0}
        self.lhs0 = None
        self.lhs1 = None

    def on_step(self, ctx: StepContext):
        a = self.alpha
        if self._tracker is None:
            self._tracker = _WeightTracker(self.weight, self._engine, ctx.phi_old)
        rho_old, rho_new = self._tracker.step(ctx)
        phi_pos = np.maximum(ctx.phi_old, 0.0)
        phig = _guarded(phi_pos, self.guard)
        if self.lhs0 is None:
            self.lhs0 = float(np.sum(_smean((1.0 - phi_pos**a) * rho_old**2, self.n)))
        g2 = np.sum(ctx.grad_phi**2, axis=-self.n - 1)
        grad_rho = self.grid.grad_arr(rho_old)
        cross = np.sum(grad_rho * ctx.grad_phi, axis=-self.n - 1)
        self.terms["quotient"] += self.dt * a * (a - 1.0) * self.gamma * float(
            np.sum(_smean(phig ** (a - 2.0) * g2 * rho_old**2, self.n))
        )
        self.terms["cross"] += self.dt * 2.0 * a * self.gamma * float(
            np.sum(_smean(phig ** (a - 1.0) * rho_old * cross, self.n))
        )
        self.terms["reaction"] += -self.dt * a * float(
            np.sum(_smean(phig ** (a - 1.0) * ctx.react_phi * rho_old**2, self.n))
        )
        drho = rho_new - rho_old
        self.terms["drho"] += 2.0 * float(
            np.sum(_smean(drho * rho_old * (1.0 - phi_pos**a), self.n))
        )
        phi_new_pos = np.maximum(ctx.phi_new, 0.0)
        self.lhs1 = float(np.sum(_smean((1.0 - phi_new_pos**a) * rho_new**2, self.n)))


def weight_support_residual(traj: Trajectory, weight: Weight, alpha: float = 0.1,
                            guard: float = DEFAULT_GUARD, drop_terms: Iterable[str] = ()) -> dict:
    """Defect of the chain-rule identity for int (1 - phi^alpha) rho^2.

    The right-hand side carries the alpha-quotient term, the grad(rho)
    cross term, the reaction transport and the weight's own time
    derivative; the residual is normalized by the largest participating
    term.  ``drop_terms`` injects bookkeeping faults for sensitivity runs.
    """
    probe = _WeightSupportProbe(weight, alpha, guard)
    traj.replay([probe])
    lhs = probe.lhs1 - probe.lhs0
    rhs = sum(v for k, v in probe.terms.items() if k not in set(drop_terms))
    scale = max([abs(lhs)] + [abs(v) for v in probe.terms.values()] + [1e-300])
    return {
        "residual": abs(lhs - rhs) / scale,
        "lhs": lhs,
        "terms": dict(probe.terms),
        "scale": scale,
        "dropped": sorted(set(drop_terms)),
    }


# ---- Ito identities ----


class ItoSquareProbe(Probe):
    """Tracks the discrete square identity for the concentration field.

    Per step the exact algebra gives
        |c_new|^2 - |c_old|^2 = 2<dc, c_mid>,
    and the audited decomposition replaces dc by dt*drift + dM with the
    drift paired at the midpoint, the martingale increment at the left
    point, and the Ito correction by the predicted trace increment.  The
    residual accumulates the gap; with zero noise it is exactly zero.
    """

    def start(self, engine):
        self.n = engine.grid.n
        self.dt = engine.cfg.dt
        self.residual_series = []
        self.martingale_series = []
        self.acc = None
        self.sq0 = None
        self.scale = 0.0

    def on_step(self, ctx: StepContext):
        n = self.n
        sq_old = np.sum(_smean(ctx.c_old**2, n), axis=-1)
        sq_new = np.sum(_smean(ctx.c_new**2, n), axis=-1)
        if self.sq0 is None:
            self.sq0 = sq_old
            self.acc = np.zeros_like(sq_old)
        c_mid = 0.5 * (ctx.c_old + ctx.c_new)
        drift_pair = 2.0 * self.dt * np.sum(_smean(ctx.drift_c * c_mid, n), axis=-1)
        mart_pair = 2.0 * np.sum(_smean(ctx.dM * ctx.c_old, n), axis=-1)
        self.acc = self.acc + drift_pair + mart_pair + self.dt * ctx.trace_inc
        self.martingale_series.append(mart_pair)
        self.residual_series.append(sq_new - self.sq0 - self.acc)
        self.scale = np.maximum(self.scale, np.abs(sq_new))

    def result(self) -> dict:
        res = np.asarray(self.residual_series)
        mart = np.asarray(self.martingale_series)
        scale = np.maximum(self.scale, 1e-300)
        return {
            "residual_series": res,
            "final_abs_residual": np.abs(res[-1]),
            "relative_final": np.abs(res[-1]) / scale,
            "residual_rms": np.sqrt(np.mean(res**2, axis=0)),
            "martingale_total": mart.sum(axis=0),
            "scale": scale,
        }


def ito_square_residual(traj: Trajectory) -> dict:
    """Discrete Ito residual of |c_t|^2 along a single trajectory."""
    probe = ItoSquareProbe()
    traj.replay([probe])
    out = probe.result()
    series = out["residual_series"][:, 0]
    scale = float(np.ravel(out["scale"])[0])
    return {
        "residual_series": series,
        "final_abs_residual": float(abs(series[-1])),
        "relative_final": float(abs(series[-1])) / scale,
        "residual_rms": float(np.sqrt(np.mean(series**2))),
        "martingale_total": float(np.ravel(out["martingale_total"])[0]),
        "scale": scale,
    }


class ProdRuleProbe(Probe):
    """Discrete product identity for x = c against a scalar weight path y."""

    def __init__(self, weight: Weight, test_fn: np.ndarray):
        self.weight = weight
        self.w = test_fn

    def start(self, engine):
        self.n = engine.grid.n
        self.dt = engine.cfg.dt
        self._engine = engine
        self._tracker = None
        self.acc_drift = 0.0
        self.acc_y = 0.0
        self.acc_mart = 0.0
        self.lhs0 = None
        self.lhs1 = None
        self.scale = 0.0

    def on_step(self, ctx: StepContext):
        if self._tracker is None:
            self._tracker = _WeightTracker(self.weight, self._engine, ctx.phi_old)
        y_old, y_new = self._tracker.step(ctx)
        n = self.n
        if self.lhs0 is None:
            self.lhs0 = float(np.sum(_smean(ctx.c_old * y_old * self.w, n)))
        self.acc_drift += self.dt * float(np.sum(_smean(ctx.drift_c * y_old * self.w, n)))
        self.acc_y += float(np.sum(_smean((y_new - y_old) * ctx.c_old * self.w, n)))
        self.acc_mart += float(np.sum(_smean(ctx.dM * y_old * self.w, n)))
        self.lhs1 = float(np.sum(_smean(ctx.c_new * y_new * self.w, n)))
        self.scale = max(self.scale, abs(self.lhs1), abs(self.acc_drift), abs(self.acc_y))

    def result(self) -> dict:
        lhs = self.lhs1 - self.lhs0
        rhs = self.acc_drift + self.acc_y + self.acc_mart
        scale = max(self.scale, abs(lhs), 1e-300)
        return {
            "residual": abs(lhs - rhs) / scale,
            "terms": {"drift": self.acc_drift, "weight_transport": self.acc_y,
                      "martingale": self.acc_mart},
            "lhs": lhs,
            "scale": scale,
        }


def prod_rule_residual(traj: Trajectory, weight: Weight, test_fn: np.ndarray | None = None) -> dict:
    """Normalized defect of the discrete product identity <c_t y_t, w>."""
    w = np.ones(traj.grid.shape) if test_fn is None else test_fn
    probe = ProdRuleProbe(weight, w)
    traj.replay([probe])
    return probe.result()


# ---- quadratic variation ----


class QVProbe(Probe):
    """Empirical vs predicted quadratic variation of <M, v> per path."""

    def __init__(self, spectrum: NoiseSpectrum, test_fn: np.ndarray):
        self.spectrum = spectrum
        self.v = test_fn

    def start(self, engine):
        self.n = engine.grid.n
        self.dt = engine.cfg.dt
        self.emp = 0.0
        self.pred = 0.0

    def on_step(self, ctx: StepContext):
        if ctx.b_eta.ndim != ctx.dM.ndim:
            raise ValueError("QV prediction supports diagonal amplitudes only")
        pair = np.sum(_smean(ctx.dM * self.v, self.n), axis=-1)
        self.emp = self.emp + pair**2
        weighted = ctx.b_eta * self.v
        self.pred = self.pred + self.dt * np.sum(self.spectrum.quadratic_form(weighted), axis=-1)


def qv_estimate(trajs_or_probe_results: Sequence, test_fn: np.ndarray | None = None) -> dict:
    """Aggregate QV comparison over an ensemble of trajectories.

    Accepts a sequence of Trajectory objects (each is replayed with a
    QVProbe) or pre-collected (emp, pred) pairs from a batched run.
    """
    emps, preds = [], []
    for item in trajs_or_probe_results:
        if isinstance(item, Trajectory):
            spectrum = build_spectrum(item.noise_spec, item.grid)
            v = np.ones(item.grid.shape) if test_fn is None else test_fn
            probe = QVProbe(spectrum, v)
            item.replay([probe])
            emps.append(float(np.asarray(probe.emp).ravel()[0]))
            preds.append(float(np.asarray(probe.pred).ravel()[0]))
        else:
            emp, pred = item
            emps.append(float(emp))
            preds.append(float(pred))
    emps, preds = np.asarray(emps), np.asarray(preds)
    underpowered = len(emps) < 100
    mean_pred = float(preds.mean())
    rel = abs(float(emps.mean()) - mean_pred) / max(mean_pred, 1e-300)
    return {
        "paths": len(emps),
        "underpowered": underpowered,
        "mean_empirical": float(emps.mean()),
        "mean_predicted": mean_pred,
        "relative_error": rel,
        "empirical": emps,
        "predicted": preds,
    }


# ---- Cole-Hopf residual ----


class _ColeHopfProbe(Probe):
    def start(self, engine):
        self.grid = engine.grid
        self.n = engine.grid.n
        self.dt = engine.cfg.dt
        self.series = []

    def on_step(self, ctx: StepContext):
        if float(ctx.phi_old.min()) <= 0.0 or float(ctx.phi_new.min()) <= 0.0:
            raise ValueError("Cole-Hopf residual needs a strictly positive phase field")
        z_old = -np.log(ctx.phi_old)
        z_new = -np.log(ctx.phi_new)
        zh_new = self.grid.rfft(z_new)
        lap = self.grid.irfft(self.grid.laplacian_multiplier * zh_new)
        zh_old = self.grid.rfft(z_old)
        g2 = sum(
            self.grid.irfft(m * zh_old) ** 2 for m in self.grid.gradient_multipliers
        )
        resid = (z_new - z_old) / self.dt - (lap - g2)
        self.series.append(np.sqrt(_smean(resid**2, self.n)))


def cole_hopf_residual(traj: Trajectory) -> dict:
    """L2 residual of dz/dt = Lap z - |grad z|^2 for z = log(1/phi).

    Meaningful on runs whose phase field follows the pure heat flow with
    unit diffusivity (reactions off, gamma = 1).
    """
    probe = _ColeHopfProbe()
    traj.replay([probe])
    series = np.asarray(probe.series)[:, 0]
    return {"series": series, "rms": float(np.sqrt(np.mean(series**2))),
            "final": float(series[-1])}


# ---- weighted weak-form residuals ----


class WeakFormProbe(Probe):
    """Accumulates the weighted variational identity, term by term.

    form = "coupled":    <c_t, v_t> with v = rho^2 u  (plain convention)
    form = "phi_alpha":  the expanded small-power identity for
                         <(phi+eps)^alpha c, u> with its seven drift terms
    form = "uncoupled_phi": the phi-weighted convention <phi c, v> with
                         the d/dt(phi) transport term
    """

    def __init__(self, weight: Weight, test_fn: np.ndarray, form: str = "coupled",
                 guard: float = DEFAULT_GUARD):
        if form not in ("coupled", "phi_alpha", "uncoupled_phi"):
            raise ValueError(f"unknown weak-form convention {form!r}")
        if form == "phi_alpha" and weight.kind != "phi_alpha":
            raise ValueError("phi_alpha form needs a phi_alpha weight")
        self.weight = weight
        self.u = test_fn
        self.form = form
        self.guard = guard

    def start(self, engine):
        self.grid = engine.grid
        self.n = engine.grid.n
        self.dt = engine.cfg.dt
        self.gamma = engine.gamma
        self.D = engine.D
        self._engine = engine
        self._tracker = None
        self._grad_u = None
        self.terms = {}
        self.lhs0 = None
        self.lhs1 = None
        self.ref_scale = 0.0

    def _add(self, key, val):
        self.terms[key] = self.terms.get(key, 0.0) + float(np.sum(val))

    def _pair(self, field_dcomp, scalar):
        """sum_j mean(field_j * scalar) over components."""
        return np.sum(_smean(field_dcomp * np.expand_dims(scalar, -self.n - 1), self.n), axis=-1)

    def on_step(self, ctx: StepContext):
        if self._tracker is None:
            self._tracker = _WeightTracker(self.weight, self._engine, ctx.phi_old)
            self._grad_u = self.grid.grad_arr(self.u)
        rho_old, rho_new = self._tracker.step(ctx)
        ref = float(np.sqrt(np.mean(ctx.c_new**2)) * np.sqrt(np.mean(self.u**2)))
        self.ref_scale = max(self.ref_scale, ref)
        getattr(self, "_step_" + self.form)(ctx, rho_old, rho_new)

    # -- plain convention: v_t = rho_t^2 u --

    def _step_coupled(self, ctx, rho_old, rho_new):
        v_old = rho_old**2 * self.u
        v_new = rho_new**2 * self.u
        if self.lhs0 is None:
            self.lhs0 = float(np.sum(self._pair(ctx.c_old, v_old)))
        self._add("diffusion", self.dt * self._pair(ctx.lap_c_new, v_old))
        self._add("singular", self.dt * self._pair(ctx.sing, v_old))
        self._add("reaction", self.dt * self._pair(ctx.react_c, v_old))
        self._add("martingale", self._pair(ctx.dM, v_old))
        self._add("transport", self._pair(ctx.c_old, v_new - v_old))
        self.lhs1 = float(np.sum(self._pair(ctx.c_new, v_new)))

    # -- phi-weighted convention of the uncoupled theory --

    def _step_uncoupled_phi(self, ctx, rho_old, rho_new):
        if self.lhs0 is None:
            self.lhs0 = float(np.sum(self._pair(ctx.c_old, ctx.phi_old * self.u)))
        phiu = ctx.phi_old * self.u
        self._add("diffusion", self.dt * self._pair(ctx.lap_c_new, phiu))
        self._add("singular", self.dt * self._pair(ctx.sing, phiu))
        self._add("reaction", self.dt * self._pair(ctx.react_c, phiu))
        self._add("martingale", self._pair(ctx.dM, phiu))
        self._add("phi_transport", self._pair(ctx.c_old, ctx.dphi * self.u))
        self.lhs1 = float(np.sum(self._pair(ctx.c_new, ctx.phi_new * self.u)))

    # -- expanded small-power identity --

    def _step_phi_alpha(self, ctx, rho_old, rho_new):
        a = self.weight.alpha
        eps = self.weight.shift
        w = np.maximum(ctx.phi_old, 0.0) + eps
        w = _guarded(w, self.guard)
        wa = w**a
        if self.lhs0 is None:
            self.lhs0 = float(np.sum(self._pair(ctx.c_old, wa * self.u)))
        grad_c = ctx.grad_c  # (B, d, n, sp), shared across probes
        # (1) -<D w^a grad c, grad u>
        gc_dot_gu = np.sum(grad_c * self._grad_u, axis=-self.n - 1)
        self._add("diffusion", -self.dt * np.sum(
            _smean(self.D.reshape((-1,) + (1,) * self.n) * gc_dot_gu
                   * np.expand_dims(wa, -self.n - 1), self.n), axis=-1))
        # (2) -<((D+gamma)a - D) w^(a-1) grad c . grad phi, u>
        gc_dot_gphi = np.sum(grad_c * np.expand_dims(ctx.grad_phi, -self.n - 2), axis=-self.n - 1)
        coeff = ((self.D + self.gamma) * a - self.D).reshape((-1,) + (1,) * self.n)
        self._add("mixed_gradient", -self.dt * np.sum(
            _smean(coeff * gc_dot_gphi * np.expand_dims(w ** (a - 1.0) * self.u, -self.n - 1),
                   self.n), axis=-1))
        # (3) +<w^a f, u>
        self._add("reaction", self.dt * self._pair(ctx.react_c, wa * self.u))
        # (4) -a*gamma <w^(a-1) c grad phi, grad u>
        gphi_dot_gu = np.sum(ctx.grad_phi * self._grad_u, axis=-self.n - 1)
        self._add("weight_flux", -self.dt * a * self.gamma * self._pair(
            ctx.c_old, w ** (a - 1.0) * gphi_dot_gu))
        # (5) -a(a-1)*gamma <|grad phi|^2 w^(a-2) c, u>
        g2 = np.sum(ctx.grad_phi**2, axis=-self.n - 1)
        self._add("quotient", -self.dt * a * (a - 1.0) * self.gamma * self._pair(
            ctx.c_old, g2 * w ** (a - 2.0) * self.u))
        # (6) +a <w^(a-1) Psi c, u>; (7) +a <w^(a-1) g c, u>
        g_raw = ctx.engine.model.g(ctx.phi_old, ctx.c_old, ctx.nl)
        psi_raw = ctx.engine.model.psi(ctx.phi_old, ctx.c_old, ctx.grad_phi, ctx.nl)
        self._add("psi_transport", self.dt * a * self._pair(
            ctx.c_old, w ** (a - 1.0) * psi_raw * self.u))
        self._add("g_transport", self.dt * a * self._pair(
            ctx.c_old, w ** (a - 1.0) * g_raw * self.u))
        alias = ctx.react_phi - (g_raw + psi_raw)
        self._add("dealias_gap", self.dt * a * self._pair(
            ctx.c_old, w ** (a - 1.0) * alias * self.u))
        # martingale: <w^a u, dM>
        self._add("martingale", self._pair(ctx.dM, wa * self.u))
        w_new = _guarded(np.maximum(ctx.phi_new, 0.0) + eps, self.guard)
        self.lhs1 = float(np.sum(self._pair(ctx.c_new, w_new**a * self.u)))

    def result(self, drop_terms: Iterable[str] = ()) -> dict:
        lhs = self.lhs1 - self.lhs0
        dropped = set(drop_terms)
        rhs = sum(v for k, v in self.terms.items() if k not in dropped)
        # identities whose every participant sits below roundoff relative
        # to the state scale are satisfied by inspection, not 0/0 noise
        floor = 1e-9 * self.ref_scale
        scale = max([abs(lhs)] + [abs(v) for v in self.terms.values()] + [floor, 1e-300])
        return {
            "residual": abs(lhs - rhs) / scale,
            "lhs": lhs,
            "terms": dict(self.terms),
            "scale": scale,
            "dropped": sorted(dropped),
        }


def weak_form_residual(traj: Trajectory, weight: Weight,
                       tests: Sequence[np.ndarray] | None = None,
                       form: str = "coupled", guard: float = DEFAULT_GUARD,
                       drop_terms: Iterable[str] = ()) -> dict:
    """Normalized weak-form residual for each test function.

    Returns per-test residuals plus the worst case; ``drop_terms``
    recomputes with named terms removed (fault injection) without a
    second replay.
    """
    if tests is None:
        tests = build_test_functions(traj.grid)
    probes = [WeakFormProbe(weight, u, form=form, guard=guard) for u in tests]
    traj.replay(probes)
    per_test = [p.result(drop_terms) for p in probes]
    residuals = [r["residual"] for r in per_test]
    return {
        "residuals": residuals,
        "max_residual": max(residuals),
        "per_test": per_test,
        "weight": weight.label(),
        "form": form,
    }


# ---- phase-field energy identity ----


class _PhiEnergyProbe(Probe):
    def start(self, engine):
        self.grid = engine.grid
        self.n = engine.grid.n
        self.dt = engine.cfg.dt
        self.gamma = engine.gamma
        self.E0 = None
        self.E1 = None
        self.acc_gamma = 0.0
        self.acc_react = 0.0
        self.gamma_terms = []
        self._lap_old = None

    def on_step(self, ctx: StepContext):
        if self.E0 is None:
            g0 = self.grid.grad_arr(ctx.phi_old)
            self.E0 = float(np.sum(_smean(np.sum(g0 * g0, axis=-self.n - 1), self.n)))
            self._lap_old = self.grid.lap_arr(ctx.phi_old)
        lap_new = ctx.lap_phi_new / self.gamma
        lap_bar = 0.5 * (lap_new + self._lap_old)
        tg = -2.0 * self.dt * self.gamma * float(np.sum(_smean(lap_new * lap_bar, self.n)))
        tr = -2.0 * self.dt * float(np.sum(_smean(ctx.react_phi * lap_new, self.n)))
        self.acc_gamma += tg
        self.acc_react += tr
        self.gamma_terms.append(tg)
        self._lap_old = lap_new
        self._phi_last = ctx.phi_new

    def finish(self):
        g = self.grid.grad_arr(self._phi_last)
        self.E1 = float(np.sum(_smean(np.sum(g * g, axis=-self.n - 1), self.n)))


def phi_energy_residual(traj: Trajectory) -> dict:
    """Defect of the |grad phi|^2 energy balance along the run.

    The dissipative term pairs the implicit-side Laplacian with the
    midpoint Laplacian (exact for the pure resolvent flow); the reaction
    pairing at the right endpoint contributes the O(dt) defect for driven
    runs.  Returns the normalized residual and the per-step dissipative
    terms (each should be <= 0).
    """
    probe = _PhiEnergyProbe()
    traj.replay([probe])
    lhs = probe.E1 - probe.E0
    rhs = probe.acc_gamma + probe.acc_react
    scale = max(abs(lhs), abs(probe.acc_gamma), abs(probe.acc_react), probe.E0, 1e-300)
    return {
        "residual": abs(lhs - rhs) / scale,
        "dissipative_terms": np.asarray(probe.gamma_terms),
        "terms": {"dissipation": probe.acc_gamma, "reaction": probe.acc_react},
        "scale": scale,
    }
