"""Command-line entry points.

Verbs:
  run            one trajectory + diagnostics + manifest
  ensemble       Monte Carlo ensemble statistics
  cascade        regularization-ladder convergence table
  report         merge diagnostics CSVs into one summary (+ plots)
  validate-model randomized invariance audit of a model preset

Exit code 0 iff every enabled check passes.  PHASELAB_WORKERS sets the
worker-process count for ensembles.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="run configuration file")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the noise seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="phaselab", description=__doc__)
    sub = ap.add_subparsers(dest="verb", required=True)

    run_p = sub.add_parser("run", help="single trajectory with diagnostics")
    _add_common(run_p)

    ens_p = sub.add_parser("ensemble", help="Monte Carlo ensemble")
    _add_common(ens_p)
    ens_p.add_argument("--paths", type=int, default=None, help="number of paths")

    cas_p = sub.add_parser("cascade", help="regularization cascade study")
    _add_common(cas_p)
    cas_p.add_argument("--dt-levels", type=int, default=1,
                       help="additionally repeat the ladder at halved step sizes")

    rep_p = sub.add_parser("report", help="merge diagnostics CSV files")
    rep_p.add_argument("inputs", nargs="*", type=Path, help="checks.csv / diagnostics.csv files")
    rep_p.add_argument("--out", type=Path, required=True)

    val_p = sub.add_parser("validate-model", help="invariance audit of a preset")
    val_p.add_argument("--preset", type=str, default=None)
    val_p.add_argument("--config", type=Path, default=None)
    val_p.add_argument("--samples", type=int, default=200)
    val_p.add_argument("--seed", type=int, default=0)
    return ap


def _seed_override(seed):
    return {"noise": {"seed": str(seed)}} if seed is not None else None


def cmd_run(args) -> int:
    from .harness import emit_report, run_single

    traj, report, manifest = run_single(args.config, args.out,
                                        overrides=_seed_override(args.seed))
    emit_report([report], args.out, write_plots=True)
    print(f"steps: {manifest.n_steps}  wall: {manifest.wall_clock_s:.1f}s  "
          f"failed checks: {report.n_failed}")
    for line in report.lines():
        print(" ", line)
    return 0 if report.all_passed() else 1


def cmd_ensemble(args) -> int:
    from .harness import emit_report, run_ensemble

    out = run_ensemble(args.config, n_paths=args.paths, overrides=_seed_override(args.seed))
    emit_report([out["report"]], args.out)
    print(f"paths completed: {out['completed']}  unreliable: {out['unreliable']}")
    if out["failures"]:
        print(f"isolated failures: {len(out['failures'])}")
    for line in out["report"].lines():
        print(" ", line)
    return 0 if out["report"].all_passed() else 1


def cmd_cascade(args) -> int:
    from .harness import run_cascade

    levels = max(1, args.dt_levels)
    any_bad = False
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rows_out = []
    for lvl in range(levels):
        overrides = _seed_override(args.seed) or {}
        if lvl > 0:
            from .harness import load_config

            base = load_config(args.config)
            dt = float(base["solver"]["dt"]) / 2**lvl
            overrides.setdefault("solver", {})["dt"] = str(dt)
            overrides["solver"]["noise_refinement"] = str(2 ** (levels - 1 - lvl) or 1)
        res = run_cascade(args.config, overrides=overrides or None)
        print(f"[dt level {lvl}] members: {res['members']}")
        print(f"  c-differences: {['%.4g' % d for d in res['c_differences']]}  "
              f"monotone: {res['monotone']}  cap-active: {res['cap_active']}")
        any_bad = any_bad or not res["monotone"]
        for row in res["rows"]:
            rows_out.append({"dt_level": lvl, **{k: v for k, v in row.items()}})
    with open(outdir / "cascade.csv", "w", newline="") as fh:
        if rows_out:
            w = csv.DictWriter(fh, fieldnames=list(rows_out[0]))
            w.writeheader()
            w.writerows(rows_out)
    return 1 if any_bad else 0


def cmd_report(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in args.inputs:
        with open(path) as fh:
            rows.extend(list(csv.DictReader(fh)))
    failed = [r for r in rows if r.get("passed") in ("0", "False")]
    ordered = failed + [r for r in rows if r not in failed]
    with open(outdir / "combined.csv", "w", newline="") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(ordered)
    summary = [f"checks: {len(rows)}  failed: {len(failed)}"]
    summary += [f"[FAIL] {r['check_id']}: {r['value']}" for r in failed]
    (outdir / "summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    return 1 if failed else 0


def cmd_validate_model(args) -> int:
    from .harness import load_config
    from .models import make_model, validate_invariance

    if args.preset:
        model = make_model(args.preset)
    else:
        config = load_config(args.config)
        sect = dict(config["model"])
        model = make_model(sect.pop("preset"), {k: float(v) for k, v in sect.items()})
    rep = validate_invariance(model, samples=args.samples, seed=args.seed)
    print(f"model: {rep['model']}  samples: {rep['samples']}  "
          f"violations: {rep['n_violations']}")
    print(f"  sup |g|/phi: {rep['sup_g_over_phi']:.4g}  "
          f"Lip_phi(g): {rep['lipschitz_g_phi']:.4g}  Lip_grad(Psi): {rep['lipschitz_psi_grad']:.4g}")
    for v in rep["violations"][:10]:
        print("  violation:", v)
    return 0 if rep["n_violations"] == 0 else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    np.seterr(over="raise")
    handlers = {
        "run": cmd_run,
        "ensemble": cmd_ensemble,
        "cascade": cmd_cascade,
        "report": cmd_report,
        "validate-model": cmd_validate_model,
    }
    return handlers[args.verb](args)


if __name__ == "__main__":
    sys.exit(main())
