"""Batch orchestration: configs, manifests, ensembles, cascade studies.

Run configuration is flat INI-style text with one section per subsystem
([grid], [model], [reg], [noise], [solver], [initial], [diagnostics],
[ensemble], [cascade], [output]).  Every default is resolved at load time
and echoed verbatim into the run manifest, so a manifest is a complete,
replayable record: re-running from it must reproduce all artifact hashes
bit for bit (and ``replay_manifest`` checks exactly that).

Ensembles integrate in vectorized batches; the noise is keyed by
(seed, path, step), so splitting the same paths across chunks or worker
processes cannot change any number.  Aggregation uses numpy reductions
(pairwise summation) and is order-independent at the 1e-12 level.
Cascade studies reuse one seed across members (common random numbers), so
successive differences between members isolate the regularization knobs.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .diagnostics import (
    DiagnosticsReport,
    ItoSquareProbe,
    QVProbe,
    Weight,
    alpha_scan,
    build_test_functions,
    ito_square_residual,
    phi_energy_residual,
    weak_form_residual,
)
from .dynamics import Probe, RegParams, SolverConfig, Trajectory, integrate, run_coupled
from .models import ModelSpec, make_model
from .noise import NoiseSpec, build_spectrum
from .torus import ScalarField, TorusGrid, VectorField

CHUNK_PATHS = 50


# ---- configuration ----

_DEFAULTS = {
    "grid": {"n": "2", "N": "64"},
    "model": {"preset": "abs"},
    "reg": {"tau": "inf", "eps": "1e-2", "alpha": "0.25", "eta_margin": "0.1"},
    "noise": {"enabled": "true", "r": "0.1", "s": "2.0", "k_max": "8", "seed": "12345"},
    "solver": {
        "dt": "1e-4", "t_end": "0.5", "record_every": "50", "clip_c": "false",
        "evolve_phi": "true", "noise_refinement": "1", "singular_mode": "quotient",
    },
    "initial": {
        "phi_kind": "cosine", "phi_params": "0.55,0.35",
        "c_kind": "constant", "c_params": "0.5",
    },
    "diagnostics": {"checks": "ito_square,weak_form_one,phi_energy,excursion_band",
                    "test_seed": "0"},
    "ensemble": {"paths": "50"},
    "cascade": {
        "eps_list": "1e-1,3e-2,1e-2,3e-3", "tau_list": "", "alpha_list": "0.4,0.2,0.1,0.05",
        "pairing": "paper_ordered",
    },
    "output": {"write_ledger": "false", "write_plots": "true"},
}


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Parse a config file into a fully-defaulted nested dict of strings."""
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive (grid has n and N)
    parser.read_dict(_DEFAULTS)
    if path is not None:
        with open(path) as fh:
            parser.read_file(fh)
    if overrides:
        for sect, kv in overrides.items():
            if not parser.has_section(sect):
                parser.add_section(sect)
            for k, v in kv.items():
                parser.set(sect, k, str(v))
    return {s: dict(parser.items(s)) for s in parser.sections()}


def _floats(text: str) -> list:
    return [float(tok) for tok in text.split(",") if tok.strip() != ""]


def _bool(text: str) -> bool:
    return text.strip().lower() in ("1", "true", "yes", "on")


@dataclass
class RunSetup:
    """Config realized into live objects."""

    config: dict
    grid: TorusGrid
    model: ModelSpec
    reg: RegParams
    noise_spec: NoiseSpec | None
    solver: SolverConfig
    phi0: ScalarField
    c0: VectorField


def build_initial_phi(grid: TorusGrid, kind: str, params: Sequence[float]) -> ScalarField:
    x = grid.axes_coords[0]
    y = grid.axes_coords[1] if grid.n > 1 else x
    if kind == "constant":
        return ScalarField.constant(grid, params[0])
    if kind == "cosine":
        base, amp = params[0], params[1]
        return ScalarField(grid, base + amp * np.cos(2 * np.pi * x))
    if kind == "cosine2d":
        base, amp = params[0], params[1]
        return ScalarField(grid, base + amp * np.cos(2 * np.pi * x) * np.cos(2 * np.pi * y))
    if kind == "bump":
        # params: base, amp, cx, cy, radius; C^1 compact bump
        base, amp, cx, cy, rad = params
        r2 = (x - cx) ** 2 + (y - cy) ** 2
        return ScalarField(grid, base + amp * np.maximum(0.0, 1.0 - r2 / rad**2) ** 2)
    if kind == "disk":
        # params: r0, width; exact zeros on the disk, C^2 contact outside
        r0, w = params
        r = np.sqrt((x - 0.5) ** 2 + (y - 0.5) ** 2)
        t = np.clip((r - r0) / w, 0.0, 1.0)
        return ScalarField(grid, t**3 * (10.0 - 15.0 * t + 6.0 * t * t))
    raise ValueError(f"unknown phi initial kind {kind!r}")


def build_initial_c(grid: TorusGrid, model: ModelSpec, kind: str,
                    params: Sequence[float]) -> VectorField:
    y = grid.axes_coords[-1]
    if kind == "constant":
        vals = [np.full(grid.shape, params[i] if i < len(params) else params[-1])
                for i in range(model.d)]
        return VectorField(grid, np.stack(vals))
    if kind == "cosine":
        base, amp = params[0], params[1]
        comp = base + amp * np.sin(2 * np.pi * y)
        return VectorField(grid, np.stack([comp] * model.d))
    raise ValueError(f"unknown c initial kind {kind!r}")


def realize(config: dict) -> RunSetup:
    grid = TorusGrid(int(config["grid"]["n"]), int(config["grid"]["N"]))
    model_sect = dict(config["model"])
    preset = model_sect.pop("preset")
    overrides = {k: float(v) for k, v in model_sect.items()}
    model = make_model(preset, overrides)
    if grid.n != model.n_spatial:
        import dataclasses as _dc

        model = _dc.replace(model, n_spatial=grid.n)
    reg_sect = config["reg"]
    reg = RegParams(
        tau=float(reg_sect["tau"]), eps=float(reg_sect["eps"]),
        alpha=float(reg_sect["alpha"]), eta_rel_margin=float(reg_sect["eta_margin"]),
    )
    noise_sect = config["noise"]
    noise_spec = None
    if _bool(noise_sect["enabled"]):
        noise_spec = NoiseSpec(
            r=float(noise_sect["r"]), s=float(noise_sect["s"]),
            k_max=int(noise_sect["k_max"]), d=model.d, seed=int(noise_sect["seed"]),
        )
        build_spectrum(noise_spec, grid)  # validate before any compute
    sol = config["solver"]
    solver = SolverConfig(
        dt=float(sol["dt"]), t_end=float(sol["t_end"]),
        gamma=float(sol["gamma"]) if "gamma" in sol else None,
        diffusivity=_floats(sol["diffusivity"]) if "diffusivity" in sol else None,
        record_every=int(sol["record_every"]), clip_c=_bool(sol["clip_c"]),
        evolve_phi=_bool(sol["evolve_phi"]),
        noise_refinement=int(sol["noise_refinement"]),
        singular_mode=sol["singular_mode"],
    ).bind(model)
    init = config["initial"]
    phi0 = build_initial_phi(grid, init["phi_kind"], _floats(init["phi_params"]))
    c0 = build_initial_c(grid, model, init["c_kind"], _floats(init["c_params"]))
    return RunSetup(config, grid, model, reg, noise_spec, solver, phi0, c0)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


# ---- manifest ----


@dataclass
class RunManifest:
    config: dict
    version: str
    config_sha256: str
    artifacts: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    n_steps: int = 0
    t_end_effective: float = 0.0

    def write(self, path: Path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        with open(path) as fh:
            raw = json.load(fh)
        return cls(**raw)


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---- diagnostics registry for single runs ----


def _check_ito_square(setup: RunSetup, traj: Trajectory, report: DiagnosticsReport) -> None:
    out = ito_square_residual(traj)
    noisy = setup.noise_spec is not None
    tol = 0.05 if noisy else 1e-6
    report.add("ito_square_relative", out["relative_final"] / (1.0 if noisy else 1.0), tol,
               formula="square identity for |c|^2", details={"rms": out["residual_rms"]})


def _check_weak_form_one(setup: RunSetup, traj: Trajectory, report: DiagnosticsReport) -> None:
    tests = build_test_functions(traj.grid, seed=int(setup.config["diagnostics"]["test_seed"]))
    out = weak_form_residual(traj, Weight("one"), tests, form="coupled")
    report.add("weak_form_weight_one", out["max_residual"], 0.05,
               formula="variational identity, constant weight")


def _check_weak_form_phi_alpha(setup: RunSetup, traj: Trajectory,
                               report: DiagnosticsReport) -> None:
    tests = build_test_functions(traj.grid, seed=int(setup.config["diagnostics"]["test_seed"]))
    w = Weight("phi_alpha", alpha=setup.reg.alpha, shift=setup.reg.eps)
    out = weak_form_residual(traj, w, tests, form="phi_alpha")
    report.add("weak_form_phi_alpha", out["max_residual"], 0.05,
               formula="expanded small-power variational identity")


def _check_phi_energy(setup: RunSetup, traj: Trajectory, report: DiagnosticsReport) -> None:
    out = phi_energy_residual(traj)
    report.add("phi_energy_residual", out["residual"], 0.05,
               formula="|grad phi|^2 balance")
    report.add("phi_energy_dissipative_sign", float(out["dissipative_terms"].max() > 1e-12),
               0.5, formula="dissipative term nonpositive per step")


def _check_excursion_band(setup: RunSetup, traj: Trajectory, report: DiagnosticsReport) -> None:
    band = 5.0 * setup.solver.dt
    if setup.noise_spec is not None:
        spectrum = build_spectrum(setup.noise_spec, traj.grid)
        band += 3.0 * float(traj.streams["b_sup"].max()) * np.sqrt(setup.solver.dt * spectrum.trace)
    report.add("hypercube_excursion", float(traj.streams["c_excursion"].max()), band,
               formula="box invariance up to the step band")
    tol_phi = 5.0 * setup.solver.dt
    phi_out = max(float(-traj.streams["min_phi"].min()),
                  float(traj.streams["max_phi"].max() - setup.model.k_phi), 0.0)
    report.add("phi_band_excursion", phi_out, tol_phi, formula="phi band invariance")


def _check_alpha_scan(setup: RunSetup, traj: Trajectory, report: DiagnosticsReport) -> None:
    out = alpha_scan(traj, [0.4, 0.2, 0.1, 0.05, 0.025])
    report.add("alpha_scan_ratio", out["max_over_min"], 10.0,
               formula="uniform-in-alpha gradient bound")
    report.add("alpha_scan_trend", float(out["increasing_steps_toward_small_alpha"]), 0.5,
               formula="no growth toward small alpha")


CHECKS: dict = {
    "ito_square": _check_ito_square,
    "weak_form_one": _check_weak_form_one,
    "weak_form_phi_alpha": _check_weak_form_phi_alpha,
    "phi_energy": _check_phi_energy,
    "excursion_band": _check_excursion_band,
    "alpha_scan": _check_alpha_scan,
}


# ---- single runs ----


def run_single(config_path: str | Path | None, out_dir: str | Path,
               overrides: dict | None = None) -> tuple:
    """Integrate one trajectory per the config; write artifacts + manifest.

    Returns (trajectory, report, manifest).  Exit-status policy is owned
    by the CLI: success iff every enabled check passed.
    """
    t0 = time.perf_counter()
    config = load_config(config_path, overrides)
    setup = realize(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj = run_coupled(setup.model, setup.solver, setup.reg, setup.noise_spec,
                       setup.phi0, setup.c0)
    report = DiagnosticsReport(config_hash=config_hash(config))
    for name in [c.strip() for c in config["diagnostics"]["checks"].split(",") if c.strip()]:
        if name not in CHECKS:
            raise ValueError(f"unknown diagnostic check {name!r}; have {sorted(CHECKS)}")
        CHECKS[name](setup, traj, report)

    artifacts = {}
    snap_path = out / "snapshots.sdf"
    with open(snap_path, "wb") as fh:
        data = traj.snapshot_bytes()
        fh.write(data)
    artifacts["snapshots.sdf"] = _sha(data)
    if _bool(config["output"]["write_ledger"]) and setup.noise_spec is not None:
        led_path = out / "noise.sdl"
        buf = io.BytesIO()
        traj.ledger().write(buf)
        with open(led_path, "wb") as fh:
            fh.write(buf.getvalue())
        artifacts["noise.sdl"] = _sha(buf.getvalue())
    report.write_text(out / "diagnostics.txt")
    report.write_csv(out / "diagnostics.csv")
    for name in ("diagnostics.txt", "diagnostics.csv"):
        artifacts[name] = _sha((out / name).read_bytes())

    manifest = RunManifest(
        config=config, version=__version__, config_sha256=config_hash(config),
        artifacts=artifacts,
        seeds={"noise": int(config["noise"]["seed"]) if setup.noise_spec else None,
               "path_index": 0},
        wall_clock_s=time.perf_counter() - t0,
        n_steps=traj.n_steps, t_end_effective=traj.n_steps * setup.solver.dt,
    )
    manifest.write(out / "manifest.json")
    return traj, report, manifest


def replay_manifest(manifest_path: str | Path, out_dir: str | Path) -> dict:
    """Re-run from a manifest's config echo; compare artifact hashes."""
    manifest = RunManifest.read(Path(manifest_path))
    cfg_overrides = {s: dict(kv) for s, kv in manifest.config.items()}
    _, _, new_manifest = run_single(None, out_dir, overrides=cfg_overrides)
    matches = {
        name: new_manifest.artifacts.get(name) == sha
        for name, sha in manifest.artifacts.items()
    }
    return {"match": all(matches.values()), "per_artifact": matches,
            "new_manifest": new_manifest}


# ---- ensembles ----


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("PHASELAB_WORKERS", "1")))
    except ValueError:
        return 1


def run_ensemble_paths(
    model: ModelSpec, grid: TorusGrid, cfg: SolverConfig, reg: RegParams,
    noise_spec: NoiseSpec, phi0: ScalarField, c0: VectorField, n_paths: int,
    probe_factory: Callable[[], Sequence[Probe]] | None = None,
    first_path: int = 0, keep_snapshots: bool = False, chunk: int = CHUNK_PATHS,
) -> dict:
    """Integrate n_paths with independent counter-keyed noise streams.

    Paths are processed in vectorized chunks; failures are isolated per
    chunk and reported, never raised.  Returns concatenated streams, the
    probe list per chunk, and the completed-path count.
    """
    chunks = []
    start = first_path
    while start < first_path + n_paths:
        size = min(chunk, first_path + n_paths - start)
        chunks.append(list(range(start, start + size)))
        start += size

    streams_parts, probes_per_chunk, failures = [], [], []
    finals = []
    for paths in chunks:
        B = len(paths)
        probes = list(probe_factory()) if probe_factory else []
        try:
            out = integrate(
                model, grid, cfg, reg, noise_spec,
                np.repeat(phi0.values[None], B, axis=0),
                np.repeat(c0.values[None], B, axis=0),
                path_indices=paths, probes=probes, keep_snapshots=keep_snapshots,
            )
        except Exception as exc:  # isolate the chunk, keep the ensemble
            failures.append({"paths": paths, "error": repr(exc)})
            continue
        streams_parts.append(out["streams"])
        probes_per_chunk.append(probes)
        finals.append((out["phi_final"], out["c_final"]))
    combined = {}
    if streams_parts:
        for key in streams_parts[0]:
            arrs = [p[key] for p in streams_parts]
            if arrs[0].ndim > 1:
                combined[key] = np.concatenate(arrs, axis=1)
            else:
                # per-step node counts aggregate additively across chunks
                combined[key] = np.sum(np.stack(arrs, axis=-1), axis=-1)
    completed = sum(len(c) for c in chunks) - sum(len(f["paths"]) for f in failures)
    return {
        "streams": combined,
        "probes": probes_per_chunk,
        "failures": failures,
        "completed": completed,
        "finals": finals,
    }


def _ensemble_chunk_task(config: dict, paths: list) -> dict:
    """Picklable per-chunk worker: rebuilds everything from the config."""
    setup = realize(config)
    spectrum = build_spectrum(setup.noise_spec, setup.grid)
    tests = build_test_functions(setup.grid, seed=int(config["diagnostics"]["test_seed"]))
    v = tests[1] if len(tests) > 1 else tests[0]
    probes = [ItoSquareProbe(), QVProbe(spectrum, v)]
    B = len(paths)
    out = integrate(
        setup.model, setup.grid, setup.solver, setup.reg, setup.noise_spec,
        np.repeat(setup.phi0.values[None], B, axis=0),
        np.repeat(setup.c0.values[None], B, axis=0),
        path_indices=paths, probes=probes, keep_snapshots=False,
    )
    ito, qv = probes
    res = ito.result()
    return {
        "streams": out["streams"],
        "martingale": np.ravel(res["martingale_total"]),
        "qv_emp": np.ravel(qv.emp),
        "qv_pred": np.ravel(qv.pred),
    }


def run_ensemble(config_path: str | Path | None, n_paths: int | None = None,
                 overrides: dict | None = None) -> dict:
    """Config-driven ensemble with the default statistics bundle.

    Collects hypercube-excursion statistics, the Ito-square martingale
    centeredness and the quadratic-variation comparison for one test
    function.  Chunks fan out across PHASELAB_WORKERS processes when that
    is set above 1; results are independent of the fan-out because the
    noise is keyed by (seed, path, step).  M < 2 is rejected; small M is
    flagged as unreliable.
    """
    config = load_config(config_path, overrides)
    setup = realize(config)
    M = int(config["ensemble"]["paths"]) if n_paths is None else int(n_paths)
    if M < 2:
        raise ValueError("ensembles need at least 2 paths")
    if setup.noise_spec is None:
        raise ValueError("ensembles need noise enabled")
    spectrum = build_spectrum(setup.noise_spec, setup.grid)

    chunks = [list(range(s, min(s + CHUNK_PATHS, M))) for s in range(0, M, CHUNK_PATHS)]
    results, failures = [], []
    workers = _worker_count()
    if workers > 1 and len(chunks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = {pool.submit(_ensemble_chunk_task, config, c): c for c in chunks}
            for fut, paths in futs.items():
                try:
                    results.append(fut.result())
                except Exception as exc:
                    failures.append({"paths": paths, "error": repr(exc)})
    else:
        for paths in chunks:
            try:
                results.append(_ensemble_chunk_task(config, paths))
            except Exception as exc:
                failures.append({"paths": paths, "error": repr(exc)})

    if not results:
        raise RuntimeError(f"all ensemble chunks failed: {failures}")
    out = {"streams": {}, "failures": failures,
           "completed": M - sum(len(f["paths"]) for f in failures)}
    for key in results[0]["streams"]:
        arrs = [r["streams"][key] for r in results]
        if arrs[0].ndim > 1:
            out["streams"][key] = np.concatenate(arrs, axis=1)
        else:
            out["streams"][key] = np.sum(np.stack(arrs, axis=-1), axis=-1)
    mart = np.concatenate([r["martingale"] for r in results])
    qv_emp = np.concatenate([r["qv_emp"] for r in results])
    qv_pred = np.concatenate([r["qv_pred"] for r in results])
    report = DiagnosticsReport(config_hash=config_hash(config))
    unreliable = out["completed"] < 100
    sd = mart.std(ddof=1) if len(mart) > 1 else 0.0
    report.add("martingale_centered", abs(float(mart.mean())),
               3.0 * sd / np.sqrt(max(len(mart), 1)) + 1e-30,
               formula="ensemble mean of the martingale pairing",
               details={"unreliable": unreliable})
    rel = abs(qv_emp.mean() - qv_pred.mean()) / max(qv_pred.mean(), 1e-300)
    report.add("qv_relative_error", float(rel), 0.10,
               formula="empirical vs predicted quadratic variation",
               details={"unreliable": unreliable})
    band = 5.0 * setup.solver.dt + 3.0 * float(out["streams"]["b_sup"].max()) * np.sqrt(
        setup.solver.dt * spectrum.trace)
    report.add("ensemble_excursion", float(out["streams"]["c_excursion"].max()), band,
               formula="box invariance across the ensemble")
    return {
        "report": report,
        "completed": out["completed"],
        "failures": out["failures"],
        "unreliable": unreliable,
        "martingale": mart,
        "qv_empirical": qv_emp,
        "qv_predicted": qv_pred,
        "streams": out["streams"],
        "config": config,
    }


# ---- cascade ----


@dataclass(frozen=True)
class CascadeSchedule:
    """Ordered regularization ladder with common-random-numbers coupling.

    tau values increase (may end unbounded), eps values decrease toward 0,
    alpha values decrease inside (0, 1/2).  pairing = "paper_ordered"
    removes the cap first at fixed eps, then shrinks eps, then sweeps the
    weight power; "simultaneous" zips tau and eps stage-free.
    """

    tau_list: tuple = ()
    eps_list: tuple = (1e-1, 3e-2, 1e-2, 3e-3)
    alpha_list: tuple = (0.4, 0.2, 0.1, 0.05)
    pairing: str = "paper_ordered"

    def __post_init__(self):
        taus = tuple(float(t) for t in self.tau_list)
        epss = tuple(float(e) for e in self.eps_list)
        alphas = tuple(float(a) for a in self.alpha_list)
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ValueError("tau_list must be strictly increasing")
        if any(b >= a for a, b in zip(epss, epss[1:])) or any(e <= 0 for e in epss):
            raise ValueError("eps_list must be strictly decreasing and positive")
        if any(b >= a for a, b in zip(alphas, alphas[1:])):
            raise ValueError("alpha_list must be strictly decreasing")
        if any(not (0 < a < 0.5) for a in alphas):
            raise ValueError("alpha_list must lie in (0, 1/2)")
        if self.pairing not in ("paper_ordered", "simultaneous"):
            raise ValueError(f"unknown pairing {self.pairing!r}")
        object.__setattr__(self, "tau_list", taus)
        object.__setattr__(self, "eps_list", epss)
        object.__setattr__(self, "alpha_list", alphas)

    def members(self) -> list:
        """(label, tau, eps, stage) per cascade member, in removal order.

        paper_ordered: the cap is removed first at the coarsest eps, then
        eps shrinks at the final cap; the shared boundary member is not
        duplicated.  Monotonicity claims apply within one stage.
        """
        out = []
        if self.pairing == "simultaneous":
            taus = self.tau_list or (np.inf,) * len(self.eps_list)
            for tau, eps in zip(taus, self.eps_list):
                out.append((f"tau={tau:g},eps={eps:g}", tau, eps, "joint"))
            return out
        eps0 = self.eps_list[0]
        for tau in self.tau_list:
            out.append((f"tau={tau:g},eps={eps0:g}", tau, eps0, "tau"))
        tau_final = self.tau_list[-1] if self.tau_list else np.inf
        eps_rest = self.eps_list[1:] if self.tau_list else self.eps_list
        for eps in eps_rest:
            out.append((f"tau={tau_final:g},eps={eps:g}", tau_final, eps, "eps"))
        return out


def _h1_surrogate_sq(grid: TorusGrid, vals: np.ndarray) -> float:
    g = grid.grad_arr(vals)
    return float(np.mean(vals**2) + np.mean(np.sum(g * g, axis=-grid.n - 1)))


def _snapshot_l2t(times: np.ndarray, series_sq: np.ndarray) -> float:
    """sqrt of the trapezoid quadrature of a squared-norm time series."""
    trapezoid = getattr(np, "trapezoid", np.trapz)
    return float(np.sqrt(trapezoid(series_sq, times)))


def cascade_differences(a: Trajectory, b: Trajectory, alphas: Sequence[float]) -> dict:
    """Norm distances between two CRN-coupled cascade members."""
    grid = a.grid
    times = a.times
    c_sq = np.array([np.mean((a.c_snapshots[i] - b.c_snapshots[i]) ** 2)
                     for i in range(len(times))])
    phi_sq = np.array([_h1_surrogate_sq(grid, a.phi_snapshots[i] - b.phi_snapshots[i])
                       for i in range(len(times))])
    out = {
        "c_l2": _snapshot_l2t(times, c_sq),
        "phi_h1": _snapshot_l2t(times, phi_sq),
    }
    for alpha in alphas:
        w_sq = np.array([
            np.mean((np.maximum(a.phi_snapshots[i], 0.0) ** alpha) ** 2
                    * np.sum((a.c_snapshots[i] - b.c_snapshots[i]) ** 2, axis=0))
            for i in range(len(times))
        ])
        out[f"c_weighted_alpha_{alpha:g}"] = _snapshot_l2t(times, w_sq)
    return out


def run_cascade(config_path: str | Path | None, schedule: CascadeSchedule | None = None,
                overrides: dict | None = None) -> dict:
    """Run the CRN-coupled regularization ladder and difference table.

    Successive members share the noise seed; the table reports the
    distances between neighbours, fitted geometric decay rates, cap
    activation counts, and a monotonicity flag (non-monotone rows are
    reported, never smoothed).
    """
    config = load_config(config_path, overrides)
    setup = realize(config)
    if schedule is None:
        cs = config["cascade"]
        schedule = CascadeSchedule(
            tau_list=tuple(_floats(cs["tau_list"])),
            eps_list=tuple(_floats(cs["eps_list"])),
            alpha_list=tuple(_floats(cs["alpha_list"])),
            pairing=cs["pairing"],
        )
    members = schedule.members()
    trajs, cap_counts = [], []
    for label, tau, eps, stage in members:
        reg = RegParams(tau=tau, eps=eps, alpha=setup.reg.alpha,
                        eta_rel_margin=setup.reg.eta_rel_margin)
        traj = run_coupled(setup.model, setup.solver, reg, setup.noise_spec,
                           setup.phi0, setup.c0)
        trajs.append((label, stage, traj))
        cap_counts.append(int(traj.streams["cap_active"].sum()))
    rows = []
    for (la, sa, ta), (lb, sb, tb) in zip(trajs, trajs[1:]):
        diffs = cascade_differences(ta, tb, schedule.alpha_list)
        stage = sb if sa != sb else sa  # a boundary row belongs to the later stage
        rows.append({"from": la, "to": lb, "stage": stage, **diffs})
    c_seq = [r["c_l2"] for r in rows]
    monotone_by_stage = {}
    for stage in ("tau", "eps", "joint"):
        seq = [r["c_l2"] for r in rows if r["stage"] == stage]
        if len(seq) > 1:
            monotone_by_stage[stage] = all(b < a + 1e-300 for a, b in zip(seq, seq[1:]))
    rates = []
    if len(c_seq) > 1 and min(c_seq) > 0:
        rates = list(np.diff(-np.log(np.asarray(c_seq))))
    return {
        "members": [label for label, _, _, _ in members],
        "stages": [stage for _, _, _, stage in members],
        "cap_active": cap_counts,
        "rows": rows,
        "c_differences": c_seq,
        "monotone": all(monotone_by_stage.values()) if monotone_by_stage else True,
        "monotone_by_stage": monotone_by_stage,
        "decay_rates": rates,
        "trajectories": [(label, traj) for label, _, traj in trajs],
        "schedule": schedule,
        "config": config,
    }


# ---- report emission ----


def emit_report(reports: Sequence[DiagnosticsReport], out_dir: str | Path,
                write_plots: bool = True) -> dict:
    """Write CSV + summary (+ best-effort plots).  CSV is the contract."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    merged = DiagnosticsReport()
    for rep in reports:
        merged.extend(rep)
    merged.write_csv(out / "checks.csv")
    merged.write_series_csv(out / "series.csv")
    lines = [f"checks: {len(merged.entries)}  failed: {merged.n_failed}"]
    lines += merged.lines()
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    if write_plots:
        try:  # plots never gate the exit status
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt

            for e in merged.entries:
                if e.series is None:
                    continue
                fig, ax = plt.subplots(figsize=(5, 3))
                ax.plot(np.ravel(e.series))
                ax.set_title(e.check_id)
                ax.set_xlabel("step")
                fig.tight_layout()
                fig.savefig(out / f"{e.check_id}.png", dpi=100)
                plt.close(fig)
        except Exception:
            pass
    return {"n_checks": len(merged.entries), "n_failed": merged.n_failed,
            "summary": str(out / "summary.txt")}
