import dataclasses

import numpy as np
import pytest

from phaselab import models as md
from phaselab.torus import ScalarField, TorusGrid, VectorField


@pytest.fixture(scope="module")
def grid():
    return TorusGrid(2, 32)


def const_state(grid, phi_val, c_vals):
    phi = ScalarField.constant(grid, phi_val)
    c = VectorField(grid, np.stack([np.full(grid.shape, v) for v in np.atleast_1d(c_vals)]))
    return phi, c


class TestEtaCutoff:
    def test_plateau_and_support(self):
        eta = md.EtaCutoff([0.0], [1.0], [0.1])
        c = np.array([[-0.05, 0.0, 0.05, 0.5, 0.95, 1.0, 1.1]])[:, :, None]
        vals = eta(c[..., None])
        ref = np.array([0.0, 0.0, 0.5, 1.0, 0.5, 0.0, 0.0])
        assert np.allclose(vals[0, :, 0, 0], ref)

    def test_bounds(self):
        eta = md.EtaCutoff([0.0], [1.0], [0.2])
        x = np.linspace(-0.5, 1.5, 2001)[None, :, None, None]
        v = eta(x)
        assert v.min() >= 0.0 and v.max() <= 1.0

    def test_lipschitz_constant(self):
        m = 0.1
        eta = md.EtaCutoff([0.0], [1.0], [m])
        x = np.linspace(-0.2, 1.2, 20001)[None, :, None, None]
        v = eta(x)[0, :, 0, 0]
        slope = np.abs(np.diff(v)) / np.diff(x[0, :, 0, 0])
        assert slope.max() <= 1.5 / m + 1e-6
        assert eta.lipschitz_bounds()[0] == pytest.approx(1.5 / m)

    def test_rejects_margin_out_of_range(self):
        with pytest.raises(ValueError):
            md.EtaCutoff([0.0], [1.0], [0.6])


class TestAbsPreset:
    def test_g_roots(self, grid):
        model = md.make_model("abs")
        for val, expect in ((0.0, 0.0), (1.0, 0.0), (0.5, 0.0)):
            phi, c = const_state(grid, val, [0.3])
            assert md.eval_g(model, phi, c).values[0, 0] == pytest.approx(expect, abs=1e-15)

    def test_g_value(self, grid):
        model = md.make_model("abs", {"K": 1.0})
        phi, c = const_state(grid, 0.25, [0.3])
        assert md.eval_g(model, phi, c).values[0, 0] == pytest.approx(-0.046875)

    def test_f_fixed_roots(self, grid):
        model = md.make_model("abs", {"rho": 0.0})
        for val in (0.0, 1.0):
            phi, c = const_state(grid, 0.4, [val])
            assert np.abs(md.eval_f(model, phi, c).values).max() < 1e-15

    def test_f_local_value(self, grid):
        model = md.make_model("abs", {"delta0": 0.5, "M": 0.0, "rho": 0.0, "K_alpha": 1.0})
        phi, c = const_state(grid, 0.4, [0.25])
        expect = -1.0 * 0.25 * (-0.75) * (-0.25)
        assert md.eval_f(model, phi, c).values[0, 0, 0] == pytest.approx(expect)

    def test_delta_truncated(self, grid):
        model = md.make_model("abs", {"M": 100.0})
        phi, c = const_state(grid, 1.0, [1.0])
        nl = model.nonlocals(phi.values, c.values)
        assert nl["delta"].max() == pytest.approx(0.95)

    def test_psi_arithmetic(self, grid):
        model = md.make_model("abs", {"beta": 0.0, "alpha": 1.0})
        phi, c = const_state(grid, 0.5, [0.5])
        grad = VectorField(grid, np.stack([np.full(grid.shape, 2.0), np.zeros(grid.shape)]))
        out = md.eval_psi(model, phi, c, grad)
        assert np.allclose(out.values, 1.0)

    def test_psi_zero_gradient(self, grid):
        model = md.make_model("abs")
        phi, c = const_state(grid, 0.5, [0.5])
        grad = VectorField(grid, np.zeros((2,) + grid.shape))
        assert np.abs(md.eval_psi(model, phi, c, grad).values).max() == 0.0

    def test_psi_area_term_vanishes_at_target(self, grid):
        model = md.make_model("abs", {"alpha": 0.0, "A0": 0.3})
        phi, c = const_state(grid, 0.3, [0.5])  # mean(phi) = A0
        grad = VectorField(grid, np.ones((2,) + grid.shape))
        assert np.abs(md.eval_psi(model, phi, c, grad).values).max() < 1e-14

    def test_b_eta_values(self, grid):
        model = md.make_model("abs")
        eta = md.EtaCutoff([0.0], [1.0], [0.1])
        phi, c = const_state(grid, 0.5, [0.5])
        amp = md.eval_b_eta(model, eta, phi, c)
        assert amp.shape == (1, 1) + grid.shape
        assert amp[0, 0, 0, 0] == pytest.approx(0.25)

    def test_b_eta_vanishes_at_phi_faces_and_outside_box(self, grid):
        model = md.make_model("abs")
        eta = md.EtaCutoff([0.0], [1.0], [0.1])
        for phi_val in (0.0, 1.0):
            phi, c = const_state(grid, phi_val, [0.5])
            assert np.abs(md.eval_b_eta(model, eta, phi, c)).max() == 0.0
        phi, c = const_state(grid, 0.5, [1.2])
        assert np.abs(md.eval_b_eta(model, eta, phi, c)).max() == 0.0


class TestClip:
    def test_inside_unchanged(self, grid):
        model = md.make_model("abs")
        _, c = const_state(grid, 0.5, [0.7])
        assert np.array_equal(md.clip_to_K(c, model).values, c.values)

    def test_clips_above(self, grid):
        model = md.make_model("abs")
        _, c = const_state(grid, 0.5, [1.3])
        assert np.all(md.clip_to_K(c, model).values == 1.0)

    def test_idempotent_and_one_lipschitz(self, grid):
        model = md.make_model("torres")
        rng = np.random.default_rng(4)
        a = VectorField(grid, rng.uniform(-1, 2, (3,) + grid.shape))
        b = VectorField(grid, rng.uniform(-1, 2, (3,) + grid.shape))
        ca, cb = md.clip_to_K(a, model), md.clip_to_K(b, model)
        assert np.array_equal(md.clip_to_K(ca, model).values, ca.values)
        assert np.abs(ca.values - cb.values).max() <= np.abs(a.values - b.values).max() + 1e-15


class TestInvariance:
    @pytest.mark.parametrize("name", md.preset_names())
    def test_presets_pass(self, name):
        rep = md.validate_invariance(md.make_model(name), samples=60, seed=5)
        assert rep["n_violations"] == 0
        assert np.isfinite(rep["sup_g_over_phi"])

    def test_flipped_sign_detected(self):
        model = md.make_model("abs")
        flipped = dataclasses.replace(model, f_fn=lambda mo, p, c, nl: -model.f_fn(mo, p, c, nl))
        rep = md.validate_invariance(flipped, samples=10, seed=0)
        assert rep["n_violations"] > 0
        # f(0) = 0 survives the flip, so the breach shows at the upper face
        assert any(v.get("face") == "upper" for v in rep["violations"])

    def test_b_eta_lipschitz_in_c(self, grid):
        model = md.make_model("abs")
        eta = model.default_eta()
        bound = eta.lipschitz_bounds()[0] * 0.25 + 1.0 * 0.0  # Lip(eta)*sup|b|, b const in c
        rng = np.random.default_rng(8)
        worst = 0.0
        for _ in range(50):
            phi = ScalarField(grid, rng.uniform(0, 1, grid.shape))
            c1 = VectorField(grid, rng.uniform(-0.2, 1.2, (1,) + grid.shape))
            c2 = VectorField(grid, rng.uniform(-0.2, 1.2, (1,) + grid.shape))
            a1 = md.eval_b_eta(model, eta, phi, c1)
            a2 = md.eval_b_eta(model, eta, phi, c2)
            gap = np.abs(a1 - a2).max()
            dist = np.abs(c1.values - c2.values).max()
            if dist > 0:
                worst = max(worst, gap / dist)
        assert worst <= bound + 1e-9


class TestMakeModel:
    def test_unknown_preset(self):
        with pytest.raises(ValueError, match="unknown model preset"):
            md.make_model("nope")

    def test_kb_structure(self):
        model = md.make_model("kirkpatrick_barton")
        assert model.d == 1
        assert model.singular_coeff[0] == pytest.approx(2.0)
        assert model.diffusivity[0] == pytest.approx(1.0)

    def test_torres_structure(self):
        model = md.make_model("torres")
        assert model.d == 3
        assert np.allclose(model.lower, 0.0) and np.allclose(model.upper, 1.0)

    def test_override_applied(self):
        model = md.make_model("abs", {"gamma": 0.5})
        assert model.gamma == 0.5

    def test_bad_box_rejected(self):
        with pytest.raises(ValueError):
            md.ModelSpec(
                name="x", d=1, lower=[1.0], upper=[0.0], params={},
                g_fn=lambda *a: 0, f_fn=lambda *a: 0,
            )

    def test_nonfinite_state_rejected(self, grid):
        model = md.make_model("abs")
        phi = ScalarField.constant(grid, 0.5)
        vals = np.full((1,) + grid.shape, 0.5)
        vals[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            md.eval_g(model, phi, VectorField(grid, vals))


class TestLargeSampleAudit:
    def test_abs_invariance_ten_thousand_samples(self):
        # randomized audit at the documented sample count
        rep = md.validate_invariance(md.make_model("abs"), samples=10_000, seed=11,
                                     grid=TorusGrid(2, 8))
        assert rep["n_violations"] == 0
