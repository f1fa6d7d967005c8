"""Acceptance criteria.  Each test prints one PASS/FAIL line."""

import math
import time

import numpy as np
import pytest
from scipy import linalg, stats

from switchback.cec import CecCurve, CecGenerator, fit_natural_cubic, synth_cec_ensemble
from switchback.decomposition import (
    MonteCarloConfig,
    SimulSpec,
    bias_closed_form,
    interval_stats,
    mse_closed_form,
    mse_monte_carlo,
    sweep_fixed,
)
from switchback.designs import DesignSampler, DesignSpec, build_change_of_measure, build_fixed, draw_design
from switchback.ebdesign import EcosystemSpec, SyntheticConfig, default_candidates, rank_designs
from switchback.estimators import ht_estimate, randomization_pvalue
from switchback.model import CarryoverKernel, CovarianceKernel, EventDensity, density_mass
from switchback.outcomes import ControlProfile, KernelEffect, NoiseModel, simulate_stream

T = 1440
UNIFORM = EventDensity.uniform(T)
SINUSOID = EventDensity.sinusoid(T, 0.5, 2 * math.pi / T, 0.3, 1.0)
ZERO_CTRL = ControlProfile.constant(T, 0.0)


def report(capsys, name, ok, detail, started):
    with capsys.disabled():
        print(f"\n{name} {'PASS' if ok else 'FAIL'} ({time.perf_counter() - started:.1f}s): {detail}")
    assert ok, detail


def agree(a, b, rel):
    return abs(a - b) <= rel * max(abs(a), abs(b))


def test_ac1_worked_examples(capsys):
    t0 = time.perf_counter()
    failures = []
    delta_co = 0.7
    # within-interval carryover on its stated domain h < T/M
    for h, M in [(10, 8), (30, 8), (60, 8), (10, 24), (30, 24), (10, 48)]:
        s = interval_stats(build_fixed(T, T / M), UNIFORM, ZERO_CTRL, NoiseModel(),
                           KernelEffect(0.0, delta_co, CarryoverKernel.uniform_window(h)))
        expected = delta_co * (1 / M - h / (2 * T))
        if not np.allclose(s.i_diag, expected, rtol=1e-6, atol=0):
            failures.append(f"I(h={h}, M={M})")
    # integrated covariance, both window regimes
    for L, h in [(60.0, 30.0), (60.0, 90.0), (30.0, 60.0), (40.0, 10.0)]:
        s = interval_stats(build_fixed(T, L), UNIFORM, ZERO_CTRL,
                           NoiseModel(CovarianceKernel.linear_decay(1.0, h), 1.0),
                           KernelEffect(0.0, 0.0, CarryoverKernel.uniform_window(1)))
        if h < L:
            stated = (L * L - L * h + 2 * h * h / 3) / T ** 2
        else:
            stated = (L * L - L ** 3 / (3 * h)) / T ** 2
        if not np.allclose(s.c, stated, rtol=1e-6, atol=0):
            exact = (L * h - h * h / 3) / T ** 2 if h < L else stated
            failures.append(f"C(L={L:g}, h={h:g}): stated {stated * T * T:.1f}/T^2, "
                            f"computed {s.c[0] * T * T:.1f}/T^2, exact integral {exact * T * T:.1f}/T^2")
    # bias line on the sweep; outside h <= T/M the exact expression applies
    for h in (10, 30, 60):
        for M in (8, 24, 48):
            s = interval_stats(build_fixed(T, T / M), UNIFORM, ZERO_CTRL, NoiseModel(),
                               KernelEffect(0.0, delta_co, CarryoverKernel.uniform_window(h)))
            bias, _ = bias_closed_form(s)
            if h <= T / M:
                expected = -delta_co * M * h / (2 * T)
            else:
                expected = -delta_co * (1 - T / (2 * h * M))
            if not agree(bias, expected, 1e-6):
                failures.append(f"bias(h={h}, M={M}) = {bias:.6g} vs {expected:.6g}")
    ok = not failures and time.perf_counter() - t0 < 10
    report(capsys, "AC1", ok, "; ".join(failures) or "I, C and bias line reproduced", t0)


def mc_case(**kw):
    base = dict(density=UNIFORM, ctrl=ZERO_CTRL, noise=NoiseModel(CovarianceKernel.none(), 1.0),
                primary=KernelEffect(1.0, 1.0, CarryoverKernel.uniform_window(30)),
                design=DesignSpec("fixed", 60.0), n=1000, R=10_000)
    base.update(kw)
    return MonteCarloConfig(**base)


def test_ac2_oracle_equivalence(capsys):
    t0 = time.perf_counter()
    periodic = ControlProfile.periodic(T, 0.5, 0.3, 720.0)
    corr = NoiseModel(CovarianceKernel.linear_decay(0.5, 60.0), 1.0)
    simul_effect = KernelEffect(0.3, 0.2, CarryoverKernel.linear_decay(20.0))
    cases = {
        "uniform/fixed/linear": (
            mc_case(ctrl=periodic, noise=corr, primary=KernelEffect(1.0, 1.0, CarryoverKernel.linear_decay(45.0))),
            build_fixed(T, 60.0), ()),
        "sinusoid/change-of-measure/geometric": (
            mc_case(density=SINUSOID, ctrl=periodic, noise=corr, design=DesignSpec("change_of_measure", 60.0),
                    primary=KernelEffect(0.5, 1.5, CarryoverKernel.geometric(0.05))),
            build_change_of_measure(T, 24, 0.0, SINUSOID), ()),
        "uniform/fixed + simultaneous": (
            mc_case(ctrl=periodic, simuls=[SimulSpec(simul_effect, DesignSpec("fixed", 45.0))]),
            build_fixed(T, 60.0), [(simul_effect, build_fixed(T, 45.0))]),
    }
    lines, ok = [], True
    for seed, (name, (cfg, part, simuls)) in enumerate(cases.items()):
        res = mse_monte_carlo(cfg, seed)
        br = mse_closed_form(interval_stats(part, cfg.density, cfg.ctrl, cfg.noise, cfg.primary, simuls), cfg.n)
        mse_ok = abs(res.mse_hat - br.total_mse) <= max(0.05 * br.total_mse, 3 * res.se_mse)
        bias_ok = abs(res.bias_hat - br.bias_carryover) <= 3 * res.se_bias
        ok &= mse_ok and bias_ok
        lines.append(f"{name}: mse {res.mse_hat:.4g} vs {br.total_mse:.4g}, "
                     f"bias {res.bias_hat:.4g}+-{res.se_bias:.2g} vs {br.bias_carryover:.4g}")
    ok &= time.perf_counter() - t0 < 300
    report(capsys, "AC2", ok, "; ".join(lines), t0)


def test_ac3_unbiased_without_carryover(capsys):
    t0 = time.perf_counter()
    inst = 0.5 + 0.4 * np.sin(np.arange(T) * 2 * math.pi / 720)
    primary = KernelEffect(inst, 0.0, CarryoverKernel.uniform_window(1))
    ctrl = ControlProfile.periodic(T, 1.0, 0.5, 720.0)
    designs = [DesignSpec("fixed", 60.0), DesignSpec("poisson", 45.0), DesignSpec("change_of_measure", 60.0),
               DesignSpec("fixed", 60.0, balanced=True)]
    lines, ok = [], True
    for seed, spec in enumerate(designs):
        res = mse_monte_carlo(mc_case(density=SINUSOID, ctrl=ctrl, primary=primary, design=spec, n=200), 100 + seed)
        z = res.bias_hat / res.se_bias
        ok &= abs(z) < 3
        lines.append(f"{spec.label} z={z:.2f}")
    ok &= time.perf_counter() - t0 < 60
    report(capsys, "AC3", ok, ", ".join(lines), t0)


def test_ac4_burnin_removes_bias(capsys):
    t0 = time.perf_counter()
    h, p = 30.0, 60.0
    primary = KernelEffect(1.0, 1.0, CarryoverKernel.uniform_window(h))
    design = DesignSpec("fixed", p)
    plain = mse_monte_carlo(mc_case(primary=primary, design=design, n=500), 7)
    burn = mse_monte_carlo(mc_case(primary=primary, design=design, n=500, estimator="burnin", burnin_h=h), 8)
    M = T / p
    line = -1.0 * M * h / (2 * T)
    ok = (abs(burn.bias_hat) < 3 * burn.se_bias and abs(plain.bias_hat - line) < 3 * plain.se_bias
          and burn.failures == 0 and time.perf_counter() - t0 < 120)
    report(capsys, "AC4", ok, f"burn-in bias {burn.bias_hat:.4f}+-{burn.se_bias:.4f}; "
                              f"HT bias {plain.bias_hat:.4f}+-{plain.se_bias:.4f} vs {line:.4f}", t0)


def test_ac5_tradeoff_shapes(capsys):
    t0 = time.perf_counter()
    rows = sweep_fixed(T, range(4, 97), UNIFORM, ZERO_CTRL, NoiseModel(CovarianceKernel.linear_decay(1.0, 60.0), 1.0),
                       KernelEffect(1.0, 1.0, CarryoverKernel.linear_decay(60.0)), 5000)
    bias_sq = np.array([r["bias_sq"] for r in rows])
    var_meas = np.array([r["var_meas"] for r in rows])
    total = np.array([r["total"] for r in rows])
    argmin = rows[int(np.argmin(total))]["M"]
    ok = (np.all(np.diff(bias_sq) >= -1e-12) and np.all(np.diff(var_meas) <= 1e-12) and 4 < argmin < 96
          and time.perf_counter() - t0 < 30)
    report(capsys, "AC5", ok, f"bias^2 nondecreasing, var_meas nonincreasing, argmin M = {argmin}", t0)


def test_ac6_staggering(capsys):
    t0 = time.perf_counter()
    compound = 0.4
    zero = KernelEffect(0.0, 0.0, CarryoverKernel.uniform_window(1))
    noise = NoiseModel(CovarianceKernel.none(), 0.01)
    same = mse_monte_carlo(mc_case(primary=zero, noise=noise, n=200, compound={0: compound},
                                   simuls=[SimulSpec(zero, coupled=True)]), 21)
    stag = mse_monte_carlo(mc_case(primary=zero, noise=noise, n=200, compound={0: compound},
                                   simuls=[SimulSpec(zero, DesignSpec("fixed", 60.0, offset=30.0))]), 22)
    ok = (abs(same.bias_hat - compound) < 3 * same.se_bias and abs(stag.bias_hat - compound / 2) < 3 * stag.se_bias
          and time.perf_counter() - t0 < 60)
    report(capsys, "AC6", ok, f"same switches {same.bias_hat:.4f}+-{same.se_bias:.4f} (target {compound}); "
                              f"staggered {stag.bias_hat:.4f}+-{stag.se_bias:.4f} (target {compound / 2})", t0)


def test_ac7_balanced_top_tier(capsys):
    t0 = time.perf_counter()
    ens = synth_cec_ensemble(CecGenerator(gate_sd=0.01, scale=0.01), 10, 56, 1)
    scores, selected = rank_designs(SyntheticConfig(default_candidates(), ens, EcosystemSpec(), R=500, seed=11))
    sq = np.column_stack([s.errors for s in scores]) ** 2
    bal = [i for i, s in enumerate(scores) if s.design.balanced]
    unbal = [i for i, s in enumerate(scores) if not s.design.balanced]
    worst_bal = max(bal, key=lambda i: sq[:, i].mean())
    best_unbal = min(unbal, key=lambda i: sq[:, i].mean())
    gap = sq[:, best_unbal] - sq[:, worst_bal]
    se = gap.std(ddof=1) / math.sqrt(len(gap))
    ok = gap.mean() > 3 * se and selected.balanced and time.perf_counter() - t0 < 600
    report(capsys, "AC7", ok, f"worst balanced {scores[worst_bal].design.label} {sq[:, worst_bal].mean():.3g} < "
                              f"best unbalanced {scores[best_unbal].design.label} {sq[:, best_unbal].mean():.3g}, "
                              f"gap {gap.mean() / se:.1f} paired SE; selected {selected.label}", t0)


def lagrange_fit(y, knot=0.5):
    """Oracle: KKT system of the constrained least squares with explicit multipliers."""
    H = len(y)
    x = np.arange(1, H + 1) / H
    left = x < knot
    X = np.zeros((H, 8))
    X[left, :4] = np.vander(x[left], 4, increasing=True)
    X[~left, 4:] = np.vander(x[~left], 4, increasing=True)
    k = knot
    A = np.array([
        [0, 0, 1, 0, 0, 0, 0, 0],
        [1, k, k ** 2, k ** 3, -1, -k, -k ** 2, -k ** 3],
        [0, 1, 2 * k, 3 * k ** 2, 0, -1, -2 * k, -3 * k ** 2],
        [0, 0, 0, 0, 0, 1, 2, 3],
    ], dtype=float)
    kkt = np.block([[X.T @ X, A.T], [A, np.zeros((4, 4))]])
    sol = linalg.solve(kkt, np.concatenate([X.T @ y, np.zeros(4)]))
    return X @ sol[:8], A


def test_ac8_spline(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_c, worst_o = 0.0, 0.0
    for _ in range(100):
        H = int(rng.integers(8, 200))
        y = rng.normal(size=H) * rng.uniform(0.01, 10) + np.cumsum(rng.normal(size=H)) * 0.1
        fit = fit_natural_cubic(CecCurve(y))
        fitted, A = lagrange_fit(y)
        worst_c = max(worst_c, float(np.max(np.abs(A @ fit.coefficients))))
        worst_o = max(worst_o, float(np.max(np.abs(fit.values() - fitted))))
    ok = worst_c < 1e-8 and worst_o < 1e-8 and time.perf_counter() - t0 < 5
    report(capsys, "AC8", ok, f"max constraint residual {worst_c:.2e}, max fitted-value gap to the oracle {worst_o:.2e}", t0)


def test_ac9_pvalues_uniform(capsys):
    t0 = time.perf_counter()
    spec = DesignSpec("fixed", 60.0)
    noise = NoiseModel(CovarianceKernel.linear_decay(0.5, 30.0), 1.0)
    ctrl = ControlProfile.periodic(T, 0.0, 1.0, 720.0)
    p = []
    for r in range(500):
        plan = draw_design(spec, T, None, np.random.SeedSequence([9, r, 0]))
        s = simulate_stream(SINUSOID, ctrl, noise, None, n=500, seed=np.random.SeedSequence([9, r, 1]))
        p.append(randomization_pvalue(s, spec, ht_estimate(s, plan), 1000, np.random.SeedSequence([9, r, 2])).p_value)
    ks = stats.kstest(p, "uniform")
    ok = ks.pvalue > 0.001 and time.perf_counter() - t0 < 300
    report(capsys, "AC9", ok, f"KS statistic {ks.statistic:.4f}, p = {ks.pvalue:.3f}", t0)


def test_ac10_design_invariants(capsys):
    t0 = time.perf_counter()
    worst = 0.0
    for M in (7, 24, 100):
        part = build_change_of_measure(T, M, 0.0, SINUSOID)
        mass = np.array([density_mass(SINUSOID, a, b) for a, b in zip(part.endpoints[:-1], part.endpoints[1:])])
        worst = max(worst, float(np.max(np.abs(mass - 1 / M))))
    probes = np.random.default_rng(0).uniform(T / 2, T, 10_000)
    mirrored = True
    for spec in (DesignSpec("fixed", 60.0, balanced=True), DesignSpec("poisson", 45.0, balanced=True),
                 DesignSpec("change_of_measure", 60.0, balanced=True)):
        f = EventDensity.sinusoid(T, 0.5, 2 * math.pi / 720, 0.3, 1.0)
        plan = DesignSampler(spec, float(T), f).draw(3)
        mirrored &= bool(np.all(plan.treatment_at(probes) == 1 - plan.treatment_at(probes - T / 2)))
    ok = worst < 1e-9 and mirrored and time.perf_counter() - t0 < 5
    report(capsys, "AC10", ok, f"max mass deviation {worst:.1e}; complement identity "
                               f"{'holds' if mirrored else 'broken'} at 10^4 probes", t0)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
