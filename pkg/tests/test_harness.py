import os

import numpy as np
import pytest

from phaselab import cli
from phaselab import harness as hs
from phaselab.diagnostics import DiagnosticsReport
from phaselab.torus import read_sdf

SMOKE = os.path.join(os.path.dirname(__file__), "..", "src", "phaselab", "configs",
                     "abs_smoke.cfg")

FAST = {"solver": {"t_end": "0.005", "record_every": "10"}}


class TestConfig:
    def test_defaults_complete(self):
        config = hs.load_config(None)
        assert config["grid"]["N"] == "64"
        assert config["model"]["preset"] == "abs"
        assert "checks" in config["diagnostics"]

    def test_file_and_overrides(self):
        config = hs.load_config(SMOKE, overrides={"solver": {"dt": "2e-4"}})
        assert config["solver"]["dt"] == "2e-4"
        assert config["solver"]["t_end"] == "0.05"

    def test_realize_builds_objects(self):
        setup = hs.realize(hs.load_config(SMOKE))
        assert setup.grid.N == 64 and setup.model.name == "abs"
        assert setup.solver.gamma == setup.model.gamma
        assert setup.noise_spec is not None and setup.noise_spec.d == 1

    def test_invalid_box_rejected_before_compute(self):
        config = hs.load_config(SMOKE, overrides={"model": {"preset": "cao_rappel",
                                                            "S1": "-1.0"}})
        with pytest.raises(ValueError):
            hs.realize(config)

    def test_config_hash_stable(self):
        a = hs.config_hash(hs.load_config(SMOKE))
        b = hs.config_hash(hs.load_config(SMOKE))
        assert a == b
        c = hs.config_hash(hs.load_config(SMOKE, overrides={"noise": {"seed": "1"}}))
        assert a != c


class TestInitialData:
    def test_kinds(self):
        from phaselab.models import make_model
        from phaselab.torus import TorusGrid

        grid = TorusGrid(2, 32)
        model = make_model("torres")
        phi = hs.build_initial_phi(grid, "disk", [0.15, 0.12])
        assert phi.values.min() == 0.0 and phi.values.max() <= 1.0
        bump = hs.build_initial_phi(grid, "bump", [0.1, 0.8, 0.5, 0.5, 0.3])
        assert bump.values.min() >= 0.1
        c = hs.build_initial_c(grid, model, "constant", [0.3, 0.3, 0.5])
        assert c.d == 3 and c.values[2, 0, 0] == 0.5
        with pytest.raises(ValueError, match="unknown phi"):
            hs.build_initial_phi(grid, "wavelet", [0.0])


class TestRunSingle:
    def test_artifacts_and_checks(self, tmp_path):
        traj, report, manifest = hs.run_single(SMOKE, tmp_path / "run",
                                               overrides=FAST)
        assert report.all_passed()
        for name in ("snapshots.sdf", "diagnostics.txt", "diagnostics.csv"):
            assert (tmp_path / "run" / name).exists()
            assert name in manifest.artifacts
        with open(tmp_path / "run" / "snapshots.sdf", "rb") as fh:
            grid, vals = read_sdf(fh)
            assert vals.shape == (1, 64, 64)

    def test_ledger_artifact_when_enabled(self, tmp_path):
        overrides = {**FAST, "output": {"write_ledger": "true", "write_plots": "false"}}
        _, _, manifest = hs.run_single(SMOKE, tmp_path / "run", overrides=overrides)
        assert "noise.sdl" in manifest.artifacts

    def test_unknown_check_rejected(self, tmp_path):
        overrides = {**FAST, "diagnostics": {"checks": "nonexistent"}}
        with pytest.raises(ValueError, match="unknown diagnostic"):
            hs.run_single(SMOKE, tmp_path / "run", overrides=overrides)

    def test_manifest_replay_reproduces_hashes(self, tmp_path):
        _, _, man1 = hs.run_single(SMOKE, tmp_path / "a", overrides=FAST)
        rep = hs.replay_manifest(tmp_path / "a" / "manifest.json", tmp_path / "b")
        assert rep["match"]
        assert all(rep["per_artifact"].values())


class TestEnsemble:
    def test_small_ensemble_flags_unreliable(self):
        out = hs.run_ensemble(SMOKE, n_paths=2, overrides=FAST)
        assert out["unreliable"]
        assert out["completed"] == 2
        assert out["report"].entries

    def test_rejects_single_path(self):
        with pytest.raises(ValueError, match="at least 2"):
            hs.run_ensemble(SMOKE, n_paths=1, overrides=FAST)

    def test_disjoint_seed_ranges_agree(self):
        a = hs.run_ensemble(SMOKE, n_paths=24, overrides={
            **FAST, "noise": {"seed": "100"}})
        b = hs.run_ensemble(SMOKE, n_paths=24, overrides={
            **FAST, "noise": {"seed": "20000"}})
        qa, qb = a["qv_empirical"], b["qv_empirical"]
        pooled = np.sqrt(qa.var(ddof=1) / len(qa) + qb.var(ddof=1) / len(qb))
        assert abs(qa.mean() - qb.mean()) <= 4 * pooled

    def test_worker_pool_matches_serial(self):
        serial = hs.run_ensemble(SMOKE, n_paths=4, overrides=FAST)
        os.environ["PHASELAB_WORKERS"] = "2"
        try:
            pooled = hs.run_ensemble(SMOKE, n_paths=4, overrides=FAST)
        finally:
            del os.environ["PHASELAB_WORKERS"]
        assert np.allclose(serial["martingale"], pooled["martingale"], rtol=0, atol=0)


class TestCascade:
    def test_schedule_validation(self):
        with pytest.raises(ValueError, match="tau_list"):
            hs.CascadeSchedule(tau_list=(2.0, 1.0))
        with pytest.raises(ValueError, match="eps_list"):
            hs.CascadeSchedule(eps_list=(1e-2, 1e-1))
        with pytest.raises(ValueError, match="alpha_list"):
            hs.CascadeSchedule(alpha_list=(0.1, 0.2))
        with pytest.raises(ValueError, match="pairing"):
            hs.CascadeSchedule(pairing="zigzag")

    def test_paper_ordered_members(self):
        sched = hs.CascadeSchedule(tau_list=(1.0, np.inf), eps_list=(1e-1, 1e-2))
        members = sched.members()
        assert [m[3] for m in members] == ["tau", "tau", "eps"]
        assert members[1][1] == np.inf and members[1][2] == 1e-1
        assert members[2][2] == 1e-2

    def test_eps_sweep_monotone_and_tau_collapse(self):
        res = hs.run_cascade(SMOKE, overrides={
            "solver": {"t_end": "0.01"},
            "initial": {"phi_params": "0.5,0.45"},
            "cascade": {"tau_list": "2,4,inf", "eps_list": "1e-1,3e-2,1e-2"},
        })
        assert res["monotone_by_stage"]["eps"]
        # once the cap never activates the members coincide exactly
        tau_rows = [r for r in res["rows"] if r["stage"] == "tau"]
        assert tau_rows[-1]["c_l2"] == 0.0
        assert res["cap_active"][1] == 0


class TestEmitReport:
    def test_empty_report(self, tmp_path):
        out = hs.emit_report([DiagnosticsReport()], tmp_path)
        assert out["n_checks"] == 0 and out["n_failed"] == 0
        assert (tmp_path / "checks.csv").exists()

    def test_failures_listed_first(self, tmp_path):
        rep = DiagnosticsReport()
        rep.add("good", 0.0, 1.0)
        rep.add("bad", 2.0, 1.0)
        out = hs.emit_report([rep], tmp_path, write_plots=False)
        assert out["n_failed"] == 1
        summary = (tmp_path / "summary.txt").read_text().splitlines()
        assert "[FAIL] bad" in summary[1]

    def test_series_plot_emitted(self, tmp_path):
        rep = DiagnosticsReport()
        rep.add("with_series", 0.0, 1.0, series=np.linspace(0, 1, 8))
        hs.emit_report([rep], tmp_path, write_plots=True)
        assert (tmp_path / "with_series.png").exists()


class TestCli:
    def test_run_exit_zero(self, tmp_path, capsys):
        rc = cli.main(["run", "--config", SMOKE, "--out", str(tmp_path / "o")])
        assert rc == 0
        assert "failed checks: 0" in capsys.readouterr().out

    def test_validate_model_verb(self, capsys):
        assert cli.main(["validate-model", "--preset", "abs", "--samples", "10"]) == 0
        assert "violations: 0" in capsys.readouterr().out

    def test_report_verb_merges(self, tmp_path, capsys):
        rep = DiagnosticsReport()
        rep.add("ok", 0.0, 1.0)
        rep.write_csv(tmp_path / "d1.csv")
        rc = cli.main(["report", str(tmp_path / "d1.csv"), "--out", str(tmp_path / "m")])
        assert rc == 0
        assert (tmp_path / "m" / "combined.csv").exists()

    def test_seed_flag_changes_hash(self, tmp_path):
        cli.main(["run", "--config", SMOKE, "--out", str(tmp_path / "a"), "--seed", "7"])
        cli.main(["run", "--config", SMOKE, "--out", str(tmp_path / "b"), "--seed", "8"])
        import json

        ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
        mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert ma["artifacts"]["snapshots.sdf"] != mb["artifacts"]["snapshots.sdf"]


class TestCliCascade:
    def test_cascade_verb(self, tmp_path, capsys):
        import configparser

        cfg = configparser.ConfigParser()
        cfg.optionxform = str
        cfg.read(SMOKE)
        cfg.set("solver", "t_end", "0.005")
        cfg.set("cascade", "tau_list", "")
        cfg.set("cascade", "eps_list", "1e-1,1e-2")
        path = tmp_path / "cascade.cfg"
        with open(path, "w") as fh:
            cfg.write(fh)
        rc = cli.main(["cascade", "--config", str(path), "--out", str(tmp_path / "o")])
        assert rc == 0
        assert (tmp_path / "o" / "cascade.csv").exists()
        assert "monotone" in capsys.readouterr().out
