import io

import numpy as np
import pytest
from scipy import stats

from phaselab import noise as ns
from phaselab.torus import TorusGrid


@pytest.fixture(scope="module")
def grid():
    return TorusGrid(2, 32)


@pytest.fixture(scope="module")
def spectrum(grid):
    return ns.build_spectrum(ns.NoiseSpec(r=0.1, s=2.0, k_max=6, d=1, seed=7), grid)


class TestSpectrum:
    def test_single_mode_trace(self, grid):
        sp = ns.build_spectrum(ns.NoiseSpec(r=0.1, s=2.0, k_max=0), grid)
        assert sp.trace == pytest.approx(1.0)
        assert sp.n_modes == 1

    def test_rejects_hs_boundary(self, grid):
        with pytest.raises(ValueError, match="s > r"):
            ns.build_spectrum(ns.NoiseSpec(r=1.0, s=2.0, k_max=4), grid)

    def test_rejects_cutoff_beyond_dealias_band(self, grid):
        with pytest.raises(ValueError, match="k_max"):
            ns.build_spectrum(ns.NoiseSpec(r=0.1, s=2.0, k_max=grid.N // 2), grid)

    def test_hs_sum_stable_under_cutoff_doubling(self):
        t8, h8 = ns.spectrum_sums(r=0.1, s=2.0, k_max=8, n=2)
        t16, h16 = ns.spectrum_sums(r=0.1, s=2.0, k_max=16, n=2)
        assert np.isfinite(h8)
        assert abs(h16 - h8) / h8 < 0.01
        assert abs(t16 - t8) / t8 < 0.01

    def test_hs_sum_diverges_when_condition_violated(self):
        # s = r gives flat Bessel weights, so the sum grows like k_max^2
        _, h8 = ns.spectrum_sums(r=0.5, s=0.5, k_max=8, n=2)
        _, h16 = ns.spectrum_sums(r=0.5, s=0.5, k_max=16, n=2)
        assert h16 / h8 > 2.0

    def test_half_space_partition(self, grid):
        sp = ns.build_spectrum(ns.NoiseSpec(k_max=3), grid)
        ks = {tuple(k) for k in sp.kvecs}
        assert len(ks) == ((2 * 3 + 1) ** 2 - 1) // 2
        for k in ks:
            assert tuple(-np.array(k)) not in ks

    def test_lambda_symmetry_and_positivity(self, spectrum):
        assert np.all(spectrum.lams > 0)
        ksq = (spectrum.kvecs**2).sum(axis=1)
        expect = (1 + 4 * np.pi**2 * ksq) ** -2.0
        assert np.allclose(spectrum.lams, expect)


class TestSampling:
    def test_fft_matches_direct_summation(self, grid):
        sp = ns.build_spectrum(ns.NoiseSpec(r=0.1, s=1.5, k_max=4, d=1, seed=1), grid)
        sampler = ns.NoiseSampler(sp, dt=0.25, seed=1)
        xi = sampler.gaussian_table(0)[0]
        fast = sp.synthesize(xi, 0.25)
        slow = sp.synthesize_direct(xi, 0.25)
        assert np.abs(fast - slow).max() < 1e-12

    def test_increments_real_and_deterministic(self, spectrum):
        a = ns.sample_increment(spectrum, 1e-3, rng_seed=9, step=17)
        b = ns.sample_increment(spectrum, 1e-3, rng_seed=9, step=17)
        assert np.array_equal(a, b)
        assert a.dtype == np.float64 and np.all(np.isfinite(a))
        c = ns.sample_increment(spectrum, 1e-3, rng_seed=10, step=17)
        assert not np.array_equal(a, c)

    def test_step_and_path_streams_disjoint(self, spectrum):
        s = ns.NoiseSampler(spectrum, 1e-3, seed=3, path_index=0)
        s2 = ns.NoiseSampler(spectrum, 1e-3, seed=3, path_index=1)
        assert not np.array_equal(s.increment(0), s.increment(1))
        assert not np.array_equal(s.increment(0), s2.increment(0))

    def test_rejects_nonpositive_dt(self, spectrum):
        with pytest.raises(ValueError):
            ns.NoiseSampler(spectrum, 0.0)

    def test_norm_scales_linearly_in_dt(self, spectrum):
        # E mean(|dW|^2) = dt * trace(Q); Monte Carlo ratio check
        rng_seed, M = 5, 400
        means = {}
        for dt in (1e-2, 1e-3):
            s = ns.NoiseSampler(spectrum, dt, seed=rng_seed)
            vals = [np.mean(s.increment(i) ** 2) for i in range(M)]
            means[dt] = np.mean(vals)
        ratio = means[1e-2] / means[1e-3]
        assert 10 * (1 - 4 / np.sqrt(M)) < ratio < 10 * (1 + 4 / np.sqrt(M))

    def test_mode_variances_within_chi2_ci(self, spectrum):
        M, dt = 2000, 1e-3
        s = ns.NoiseSampler(spectrum, dt, seed=11)
        incs = np.stack([s.increment(i) for i in range(M)])
        proj = spectrum.basis_projections(incs)[:, 0, :]
        # 3-sigma-equivalent chi^2 band for the sample variance
        q = stats.norm.cdf(3.0)
        lo = stats.chi2.ppf(1 - q, M - 1) / (M - 1)
        hi = stats.chi2.ppf(q, M - 1) / (M - 1)
        for mode in (0, 1, 5, 12, spectrum.n_modes - 1):
            ratio = proj[:, mode].var(ddof=1) / (spectrum.lambdas[mode] * dt)
            assert lo < ratio < hi, f"mode {mode} variance ratio {ratio}"

    def test_refinement_sums_to_same_brownian_path(self, spectrum):
        coarse = ns.NoiseSampler(spectrum, 4e-3, seed=2, refinement=4)
        fine = ns.NoiseSampler(spectrum, 1e-3, seed=2, refinement=1)
        summed = sum(fine.increment(j) for j in range(4))
        assert np.abs(coarse.increment(0) - summed).max() < 1e-14

    def test_disjoint_steps_uncorrelated(self, spectrum):
        s = ns.NoiseSampler(spectrum, 1e-3, seed=21)
        M = 600
        a = np.array([float(s.increment(2 * i)[0, 3, 4]) for i in range(M)])
        b = np.array([float(s.increment(2 * i + 1)[0, 3, 4]) for i in range(M)])
        corr = np.corrcoef(a, b)[0, 1]
        assert abs(corr) < 4 / np.sqrt(M)


class TestLedger:
    def _ledger(self, grid, n_steps=120, dt=1e-3):
        spec = ns.NoiseSpec(r=0.1, s=2.0, k_max=4, d=2, seed=31)
        return ns.NoiseLedger(spec, grid, dt, n_steps)

    def test_replay_bit_exact(self, grid):
        led = self._ledger(grid)
        first = led.materialize().copy()
        led.increments = None
        assert np.array_equal(led.materialize(), first)

    def test_file_round_trip(self, grid):
        led = self._ledger(grid, n_steps=5)
        buf = io.BytesIO()
        led.write(buf)
        buf.seek(0)
        back = ns.NoiseLedger.read(buf, dt=led.dt)
        assert back.spec == led.spec
        assert np.array_equal(back.materialize(), led.materialize())

    def test_covariance_diagnostic(self, grid):
        led = self._ledger(grid, n_steps=2000)
        rep = ns.covariance_diagnostic(led)
        assert not rep["underpowered"] and not rep["degenerate"]
        assert rep["max_rel_mode_error"] <= 0.15
        assert abs(rep["trace_estimate"] - rep["trace"]) / rep["trace"] < 0.05

    def test_degenerate_ledger_flagged(self, grid):
        led = self._ledger(grid, n_steps=150)
        led.materialize()
        led.increments = np.zeros_like(led.increments)
        rep = ns.covariance_diagnostic(led)
        assert rep["degenerate"] and rep["trace_estimate"] == 0.0

    def test_shuffled_ledger_same_variances(self, grid):
        led = self._ledger(grid, n_steps=300)
        rep = ns.covariance_diagnostic(led)
        rng = np.random.default_rng(0)
        led.increments = led.materialize()[rng.permutation(300)]
        rep2 = ns.covariance_diagnostic(led)
        assert np.allclose(rep["empirical_variances"], rep2["empirical_variances"], rtol=1e-10)

    def test_underpowered_flag(self, grid):
        rep = ns.covariance_diagnostic(self._ledger(grid, n_steps=20))
        assert rep["underpowered"]
