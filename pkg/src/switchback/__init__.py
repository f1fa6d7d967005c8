"""Switchback experiment design, estimation, and error decomposition."""

from .cec import (
    CecCurve,
    CecEnsemble,
    CecGenerator,
    SplineFit,
    estimate_cec,
    fit_natural_cubic,
    leave_two_out_cv,
    sample_cec,
    synth_cec_ensemble,
)
from .decomposition import (
    IntervalStats,
    MonteCarloConfig,
    MseBreakdown,
    SimulSpec,
    balanced_variance_terms,
    bias_closed_form,
    interval_stats,
    mse_closed_form,
    mse_monte_carlo,
)
from .designs import (
    AssignmentPlan,
    DesignSpec,
    IntervalPartition,
    assign_balanced,
    assign_iid,
    build_change_of_measure,
    build_fixed,
    build_poisson,
    draw_design,
)
from .ebdesign import DesignScore, EcosystemSpec, SyntheticConfig, rank_designs, run_synthetic_experiment, summarize
from .estimators import (
    GateEstimate,
    RandomizationResult,
    ht_burnin_estimate,
    ht_estimate,
    randomization_ci,
    randomization_pvalue,
)
from .model import (
    CarryoverKernel,
    CovarianceKernel,
    EventDensity,
    MinuteGrid,
    carryover_weight,
    covariance_eval,
    density_mass,
    sample_event_times,
)
from .outcomes import (
    CecEffect,
    ControlProfile,
    EventStream,
    KernelEffect,
    NoiseModel,
    effect_at,
    simulate_stream,
)

__version__ = "0.1.0"
