"""Run one balanced switchback, estimate the effect, and test it by re-randomization."""

# %% A day of traffic with a 12-hour cycle and a treatment that builds up over 30 minutes
import math

from switchback import (
    CarryoverKernel,
    ControlProfile,
    CovarianceKernel,
    DesignSpec,
    EventDensity,
    KernelEffect,
    NoiseModel,
    draw_design,
    ht_burnin_estimate,
    ht_estimate,
    randomization_ci,
    randomization_pvalue,
    simulate_stream,
)
from switchback.outcomes import gate_of

T = 1440
f = EventDensity.sinusoid(T, 0.5, 2 * math.pi / T, 0.0, 1.0)
ctrl = ControlProfile.periodic(T, 1.0, 0.5, 720.0)
noise = NoiseModel(CovarianceKernel.linear_decay(0.2, 30.0), 1.0)
effect = KernelEffect(0.2, 0.3, CarryoverKernel.uniform_window(30.0))
truth = gate_of(effect, f)
print(f"true effect of global treatment: {truth:.3f}")

# %% A balanced design mirrors the first half-day, cancelling the 12-hour control cycle
spec = DesignSpec("fixed", 90.0, balanced=True)
plan = draw_design(spec, T, seed=11)
stream = simulate_stream(f, ctrl, noise, (effect, plan), n=20_000, seed=12)
print(f"{plan.partition.M} intervals, {int(plan.bits.sum())} treated; {stream.n} events")

# %% Plain and burn-in estimates
plain = ht_estimate(stream, plan)
burn = ht_burnin_estimate(stream, plan, 30.0)
print(f"HT estimate      {plain.value:.3f}  (events used {plain.n_used})")
print(f"burn-in estimate {burn.value:.3f}  (events used {burn.n_used})")

# %% Sharp-null test and interval by re-randomization
test = randomization_pvalue(stream, spec, plain, J=500, seed=13)
lo, hi = randomization_ci(stream, spec, J=500, alpha=0.05, seed=14, plan=plan)
print(f"p-value {test.p_value:.3f} over {test.draws} draws")
print(f"95% interval [{lo:.3f}, {hi:.3f}]")
