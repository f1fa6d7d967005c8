"""Estimate a cumulative effect curve, smooth it, and pick a design for the next experiment."""

# %% A balanced two-day experiment whose effect flips sign as treatment persists
import numpy as np

from switchback import (
    CecCurve,
    ControlProfile,
    CovarianceKernel,
    DesignSpec,
    EventDensity,
    NoiseModel,
    draw_design,
    estimate_cec,
    fit_natural_cubic,
    leave_two_out_cv,
    simulate_stream,
)
from switchback.cec import CecEnsemble, CecGenerator, synth_cec_ensemble
from switchback.ebdesign import EcosystemSpec, SyntheticConfig, default_candidates, rank_designs
from switchback.outcomes import CecEffect

T = 2880
H = 56
dt = np.arange(1, H + 1)
truth = 0.05 * np.sin(dt / 12.0) + 0.02 * dt / H
plan = draw_design(DesignSpec("fixed", 60.0, balanced=True), T, seed=3)
stream = simulate_stream(EventDensity.uniform(T), ControlProfile.constant(T, 0.3),
                         NoiseModel(CovarianceKernel.none(), 0.01), (CecEffect(CecCurve(truth)), plan),
                         n=100_000, seed=4)

# %% Raw curve, spline fit and its end value
raw = estimate_cec(stream, plan, H)
fit = fit_natural_cubic(raw)
print("raw   :", np.round(raw.values[::8], 3))
print("spline:", np.round(fit.values()[::8], 3))
print("truth :", np.round(truth[::8], 3))
print(f"end value: spline {fit.gate:.3f}, truth {truth[-1]:.3f}")

# %% How well does each smoother predict held-out interval pairs?
for sm in ("natural-cubic", "polynomial(1)", "polynomial(3)", "local(1)"):
    print(f"{sm:>14}: CV MSE {leave_two_out_cv(stream, plan, sm, H).cv_mse:.2e}")

# %% Prior of plausible curves: this fit plus small synthetic ones
synth = synth_cec_ensemble(CecGenerator(gate_sd=0.01, scale=0.01), 9, H, seed=5)
prior = CecEnsemble([fit.curve()] + list(synth.curves))

# %% Score candidate designs on synthetic two-week experiments (small R keeps this quick)
cfg = SyntheticConfig(default_candidates((56.0, 112.0)), prior, EcosystemSpec(n=5000), R=20, seed=6)
scores, selected = rank_designs(cfg)
for s in sorted(scores, key=lambda s: s.mse):
    print(f"{s.design.label:>16}: MSE {s.mse:.2e}")
print("selected:", selected.label)
