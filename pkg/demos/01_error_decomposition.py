"""Where the error of a switchback estimate comes from, and how interval length trades it off."""

# %% Setup: one day, uniform traffic, an hour of carryover and an hour of noise correlation
import numpy as np

from switchback import (
    CarryoverKernel,
    ControlProfile,
    CovarianceKernel,
    DesignSpec,
    EventDensity,
    KernelEffect,
    MonteCarloConfig,
    NoiseModel,
    build_fixed,
    interval_stats,
    mse_closed_form,
    mse_monte_carlo,
)
from switchback.decomposition import sweep_fixed

T = 1440
f = EventDensity.uniform(T)
ctrl = ControlProfile.constant(T, 0.0)
noise = NoiseModel(CovarianceKernel.linear_decay(1.0, 60.0), 1.0)
effect = KernelEffect(1.0, 1.0, CarryoverKernel.linear_decay(60.0))
n = 5000

# %% Closed-form components across the number of intervals
rows = sweep_fixed(T, range(4, 97, 4), f, ctrl, noise, effect, n)
print(f"{'M':>4} {'var_meas':>10} {'bias^2':>10} {'var_eff':>10} {'total':>10}")
for r in rows:
    print(f"{r['M']:>4} {r['var_meas']:>10.4f} {r['bias_sq']:>10.4f} {r['var_total_effect']:>10.4f} {r['total']:>10.4f}")
best = min(rows, key=lambda r: r["total"])
print(f"lowest MSE at M = {best['M']} (interval length {T / best['M']:.0f} min)")

# %% Short intervals pay carryover bias, long ones pay correlated noise
short, long_ = rows[-1], rows[0]
print(f"M = {short['M']}: bias^2 {short['bias_sq']:.3f}, var_meas {short['var_meas']:.3f}")
print(f"M = {long_['M']}: bias^2 {long_['bias_sq']:.3f}, var_meas {long_['var_meas']:.3f}")

# %% Cross-check one design against simulation
part = build_fixed(T, 60.0)
closed = mse_closed_form(interval_stats(part, f, ctrl, noise, effect), n)
mc = mse_monte_carlo(MonteCarloConfig(f, ctrl, noise, effect, DesignSpec("fixed", 60.0), n=n, R=500), seed=1)
print(f"closed form: bias {closed.bias_carryover:.4f}, MSE {closed.total_mse:.4f}")
print(f"Monte Carlo: bias {mc.bias_hat:.4f} +- {mc.se_bias:.4f}, MSE {mc.mse_hat:.4f} +- {mc.se_mse:.4f}")

# %% Randomized lengths do not change the bias but blur the switching grid
mc_poisson = mse_monte_carlo(MonteCarloConfig(f, ctrl, noise, effect, DesignSpec("poisson", 60.0), n=n, R=500),
                             seed=2)
print(f"Poisson-60: bias {mc_poisson.bias_hat:.4f}, MSE {mc_poisson.mse_hat:.4f}")
print("errors (first 5):", np.round(mc_poisson.errors[:5], 3))
