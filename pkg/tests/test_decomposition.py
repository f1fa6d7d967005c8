import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from switchback.cec import CecCurve
from switchback.decomposition import (
    MonteCarloConfig,
    MseBreakdown,
    SimulSpec,
    UnsupportedModelError,
    balanced_variance_terms,
    bias_closed_form,
    interval_stats,
    mse_closed_form,
    mse_monte_carlo,
    sweep_fixed,
)
from switchback.designs import DesignSpec, build_change_of_measure, build_fixed, build_poisson, mirror
from switchback.model import CarryoverKernel, CovarianceKernel, EventDensity
from switchback.outcomes import CecEffect, ControlProfile, KernelEffect, NoiseModel

T = 1440
UNIFORM = EventDensity.uniform(T)
SINUSOID = EventDensity.sinusoid(T, 0.5, 2 * math.pi / 1440, 0.7, 1.0)
ZERO_CTRL = ControlProfile.constant(T, 0.0)


def stats_for(part, kernel=CarryoverKernel.uniform_window(30), f=UNIFORM, cov=CovarianceKernel.none(),
              variance=1.0, ctrl=ZERO_CTRL, inst=1.0, co=1.0, simuls=()):
    return interval_stats(part, f, ctrl, NoiseModel(cov, variance), KernelEffect(inst, co, kernel), simuls)


def covariance_block_oracle(a, b, f_values, h, step=0.1):
    """Oracle: fine-grid double sum of the triangular covariance over [a, b]^2."""
    cells = int(math.ceil((b - a) / step))
    step = (b - a) / cells
    x = a + (np.arange(cells) + 0.5) * step
    fx = f_values(x)
    d = np.abs(x[:, None] - x[None, :])
    k = np.clip(h - d, 0, None) / h
    return float(fx @ k @ fx) * step * step


class TestIntervalStats:
    def test_uniform_variance(self):
        s = stats_for(build_fixed(T, 60), variance=2.0)
        np.testing.assert_allclose(s.v, 2.0 / 24, rtol=1e-12)

    @pytest.mark.filterwarnings("ignore::scipy.integrate.IntegrationWarning")
    @pytest.mark.parametrize("h", [30.0, 60.0, 90.0])
    def test_covariance_uniform_dblquad(self, h):
        s = stats_for(build_fixed(T, 60), cov=CovarianceKernel.linear_decay(1.0, h))
        exact, _ = integrate.dblquad(lambda y, x: max(h - abs(x - y), 0.0) / h, 0, 60, 0, 60,
                                     epsabs=1e-10, epsrel=1e-10)
        np.testing.assert_allclose(s.c * T * T, exact, rtol=1e-6)

    def test_covariance_long_window_closed_form(self):
        # |I| <= h: sigma2 (L^2 - L^3 / (3h)) / T^2
        L, h = 60.0, 90.0
        s = stats_for(build_fixed(T, L), cov=CovarianceKernel.linear_decay(1.0, h))
        np.testing.assert_allclose(s.c, (L * L - L ** 3 / (3 * h)) / T ** 2, rtol=1e-9)

    def test_covariance_short_window_integral(self):
        # |I| > h: the double integral is sigma2 (L h - h^2 / 3) / T^2
        L, h = 60.0, 30.0
        s = stats_for(build_fixed(T, L), cov=CovarianceKernel.linear_decay(1.0, h))
        np.testing.assert_allclose(s.c, (L * h - h * h / 3) / T ** 2, rtol=1e-9)

    def test_covariance_sinusoid_fine_grid(self):
        part = build_change_of_measure(T, 24, 0.0, SINUSOID)
        s = stats_for(part, f=SINUSOID, cov=CovarianceKernel.linear_decay(1.5, 45.0))
        e = part.endpoints
        for m in (0, 7, 13):
            oracle = 1.5 * covariance_block_oracle(e[m], e[m + 1], SINUSOID, 45.0)
            assert s.c[m] == pytest.approx(oracle, rel=2e-4)

    def test_worked_carryover_value(self):
        s = stats_for(build_fixed(T, 60), kernel=CarryoverKernel.uniform_window(30))
        np.testing.assert_allclose(s.i_diag, 1 / 24 - 30 / 2880, rtol=1e-9)

    def test_cec_primary_unsupported(self):
        with pytest.raises(UnsupportedModelError):
            interval_stats(build_fixed(T, 60), UNIFORM, ZERO_CTRL, NoiseModel(), CecEffect(CecCurve([1.0])))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 1000), st.sampled_from(["uniform", "linear", "geometric"]),
           st.sampled_from(["uniform", "sinusoid"]), st.sampled_from(["fixed", "poisson", "com"]))
    def test_sum_identities(self, seed, kname, fname, family):
        f = UNIFORM if fname == "uniform" else SINUSOID
        kernel = {"uniform": CarryoverKernel.uniform_window(37.0), "linear": CarryoverKernel.linear_decay(50.0),
                  "geometric": CarryoverKernel.geometric(0.08)}[kname]
        if family == "fixed":
            part = build_fixed(T, 53.0, 11.0)
        elif family == "poisson":
            part = build_poisson(T, 45.0, 0.0, seed)
        else:
            part = build_change_of_measure(T, 30, 0.0, f)
        inst = np.random.default_rng(seed).uniform(0, 2, T)
        s = stats_for(part, kernel=kernel, f=f, inst=inst, co=0.8)
        assert s.mu.sum() == pytest.approx(1.0, abs=1e-9)
        assert s.xi.sum() == pytest.approx(s.delta_inst + s.i_matrix.sum(), abs=1e-9)
        assert s.i_matrix.sum() + s.co_boundary_loss == pytest.approx(s.delta_co, abs=1e-9)
        assert s.xi_inst_dem.sum() == pytest.approx(0.0, abs=1e-9)
        assert s.gate == pytest.approx(s.xi.sum(), abs=1e-12)
        assert np.all(np.triu(s.i_matrix, 1) == 0)


class TestBias:
    def test_worked_example(self):
        s = stats_for(build_fixed(T, 60), kernel=CarryoverKernel.uniform_window(30))
        bias, simul = bias_closed_form(s)
        assert bias == pytest.approx(-0.25, abs=1e-9)
        assert simul == 0.0

    def test_zero_carryover(self):
        s = stats_for(build_fixed(T, 60), co=0.0)
        assert bias_closed_form(s)[0] == 0.0

    def test_non_additive_not_computed(self):
        s = stats_for(build_fixed(T, 60))
        assert bias_closed_form(s, additive=False)[1] is None

    def test_shrinks_with_h(self):
        part = build_fixed(T, 60)
        hs = [50.0, 40.0, 30.0, 20.0, 10.0, 5.0, 1.0]
        b = [abs(bias_closed_form(stats_for(part, kernel=CarryoverKernel.uniform_window(h)))[0]) for h in hs]
        assert all(x > y for x, y in zip(b, b[1:]))
        np.testing.assert_allclose(b, [24 * h / 2880 for h in hs], rtol=1e-9)

    def test_single_interval_no_bias(self):
        s = stats_for(build_fixed(T, T), kernel=CarryoverKernel.linear_decay(60))
        assert bias_closed_form(s)[0] == pytest.approx(-s.co_boundary_loss, abs=1e-12)
        assert s.i_matrix.sum() + s.co_boundary_loss == pytest.approx(1.0)


class TestMse:
    def test_assembly_identity(self):
        s = stats_for(build_fixed(T, 60), cov=CovarianceKernel.linear_decay(0.5, 60), ctrl=ControlProfile.periodic(
            T, 1.0, 0.5, 1440.0))
        br = mse_closed_form(s, 2000)
        parts = br.var_meas + br.bias_carryover ** 2 + br.var_inst_carryover + br.e_simul_sq + 2 * br.cross_simul
        assert br.total_mse == parts
        assert br.e_simul_sq == 0.0 and br.cross_simul == 0.0

    def test_var_meas_formula(self):
        s = stats_for(build_fixed(T, 60), cov=CovarianceKernel.linear_decay(1.0, 60), variance=1.0)
        n = 5000
        expected = 4 * sum(s.v / n + s.c * (n - 1) / n)
        assert mse_closed_form(s, n).var_meas == pytest.approx(expected, rel=1e-14)

    def test_non_additive_rejected(self):
        with pytest.raises(UnsupportedModelError):
            mse_closed_form(stats_for(build_fixed(T, 60)), 100, additive=False)

    def test_simultaneous_terms_nonzero(self):
        simul = (KernelEffect(0.5, 0.0, CarryoverKernel.uniform_window(1.0)), build_fixed(T, 45.0))
        br = mse_closed_form(stats_for(build_fixed(T, 60), simuls=[simul]), 1000)
        assert br.e_simul_sq > 0

    def test_base_case_sweep_shapes(self):
        rows = sweep_fixed(T, range(4, 97, 4), UNIFORM, ZERO_CTRL,
                           NoiseModel(CovarianceKernel.linear_decay(1.0, 60), 1.0),
                           KernelEffect(1.0, 1.0, CarryoverKernel.linear_decay(60)), 5000)
        var_meas = np.array([r["var_meas"] for r in rows])
        bias_sq = np.array([r["bias_sq"] for r in rows])
        total = np.array([r["total"] for r in rows])
        assert np.all(np.diff(var_meas) <= 1e-15)
        assert np.all(np.diff(bias_sq) >= -1e-15)
        k = int(np.argmin(total))
        assert 0 < k < len(rows) - 1

    def test_uniform_kernel_bias_monotone_in_M(self):
        rows = sweep_fixed(T, range(4, 49, 4), UNIFORM, ZERO_CTRL, NoiseModel(CovarianceKernel.none(), 1.0),
                           KernelEffect(1.0, 1.0, CarryoverKernel.uniform_window(30)), 1000)
        assert np.all(np.diff([r["bias_sq"] for r in rows]) >= 0)

    def test_breakdown_json(self):
        br = MseBreakdown.assemble(1.0, 0.5, 0.25, 0.0, 0.0, 10)
        assert br.to_json()["total_mse"] == 1.5


class TestBalanced:
    part = mirror(build_fixed(720, 60).endpoints, 720.0)

    def test_zero_mean_equal(self):
        s = stats_for(self.part)
        br = mse_closed_form(s, 1000)
        assert balanced_variance_terms(s) == pytest.approx(br.var_inst_carryover, rel=1e-12)

    def test_large_mean_balanced_smaller(self):
        s = stats_for(self.part, ctrl=ControlProfile.periodic(T, 5.0, 2.0, 1440.0), inst=0.01, co=0.01)
        assert balanced_variance_terms(s) < 1e-3 * mse_closed_form(s, 1000).var_inst_carryover

    def test_unbalanced_rejected(self):
        with pytest.raises(ValueError):
            balanced_variance_terms(stats_for(build_fixed(T, 100)))


def mc_config(**kw):
    base = dict(density=UNIFORM, ctrl=ZERO_CTRL, noise=NoiseModel(CovarianceKernel.none(), 1.0),
                primary=KernelEffect(1.0, 1.0, CarryoverKernel.uniform_window(30)),
                design=DesignSpec("fixed", 60.0), n=1000, R=100)
    base.update(kw)
    return MonteCarloConfig(**base)


class TestMonteCarlo:
    def test_zero_everything(self):
        cfg = mc_config(noise=NoiseModel(), primary=KernelEffect(0.0, 0.0, CarryoverKernel.uniform_window(5)))
        bias, mse, se_b, se_m = mse_monte_carlo(cfg, 1)
        assert bias == 0.0 and mse == 0.0

    def test_deterministic(self):
        a = mse_monte_carlo(mc_config(R=20), 5)
        b = mse_monte_carlo(mc_config(R=20), 5)
        np.testing.assert_array_equal(a.errors, b.errors)

    def test_single_replication_has_no_se(self):
        res = mse_monte_carlo(mc_config(R=1), 3)
        assert res.se_bias is None and res.se_mse is None

    def test_jackknife_se_of_mean(self):
        res = mse_monte_carlo(mc_config(R=50), 3)
        assert res.se_bias == pytest.approx(res.errors.std(ddof=1) / math.sqrt(50), rel=1e-9)

    def test_failures_counted(self):
        cfg = mc_config(n=3, R=30, estimator="burnin", burnin_h=30.0)
        res = mse_monte_carlo(cfg, 0)
        assert res.failures > 0
        assert len(res.errors) + res.failures == 30

    def test_closed_form_agreement(self):
        ctrl = ControlProfile.periodic(T, 0.5, 0.3, 1440.0)
        noise = NoiseModel(CovarianceKernel.linear_decay(0.5, 60.0), 1.0)
        primary = KernelEffect(1.0, 1.0, CarryoverKernel.linear_decay(45.0))
        res = mse_monte_carlo(mc_config(ctrl=ctrl, noise=noise, primary=primary, R=2000, n=2000), 11)
        br = mse_closed_form(interval_stats(build_fixed(T, 60), UNIFORM, ctrl, noise, primary), 2000)
        assert abs(res.mse_hat - br.total_mse) <= max(0.05 * br.total_mse, 3 * res.se_mse)
        assert abs(res.bias_hat - br.bias_carryover) <= 3 * res.se_bias

    @pytest.mark.parametrize("coupled,expected", [(True, 0.4), (False, 0.2)])
    def test_staggering_toy(self, coupled, expected):
        zero = KernelEffect(0.0, 0.0, CarryoverKernel.uniform_window(1))
        simul = SimulSpec(zero, None if coupled else DesignSpec("fixed", 60.0), coupled=coupled)
        cfg = mc_config(primary=zero, simuls=[simul], compound={0: 0.4}, R=1000, n=500,
                        noise=NoiseModel(CovarianceKernel.none(), 0.01))
        res = mse_monte_carlo(cfg, 2)
        assert abs(res.bias_hat - expected) < 3 * res.se_bias
