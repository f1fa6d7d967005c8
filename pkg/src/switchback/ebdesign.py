"""Empirical-Bayes design selection through synthetic experiments.

Historical data is emulated by a generator with a daily periodic density and
control mean plus correlated noise.  Each replication draws a historical
stream and a curve from the ensemble; every candidate design is scored on
that same pair.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .cec import CecCurve, CecEnsemble, sample_cec
from .designs import FAMILY_ORDER, AssignmentPlan, DesignSampler, DesignSpec, draw_design
from .estimators import ht_burnin_estimate, ht_estimate
from .model import CovarianceKernel, EventDensity, FloatArray, seed_sequence
from .outcomes import CecEffect, ControlProfile, EventStream, NoiseModel, effect_at, simulate_stream

SIMUL_MODES = ("none", "one-concurrent")


@dataclass(frozen=True)
class EcosystemSpec:
    """Generator for historical streams.

    Density and control mean follow a daily sinusoid.  Noise has a
    Bernoulli-like variance ctrl (1 - ctrl) plus a latent component with a
    linearly decaying covariance.  In one-concurrent mode a simultaneous
    experiment with a ramp-shaped effect runs on a balanced fixed design.
    """

    horizon: int = 20160
    period: float = 1440.0
    density_amplitude: float = 0.4
    ctrl_base: float = 0.3
    ctrl_amplitude: float = 0.1
    n: int = 20000
    latent_sigma2: float = 1e-4
    latent_h: float = 60.0
    simul_gate: float = 0.01
    simul_ramp: int = 30
    simul_length: float = 56.0

    def density(self) -> EventDensity:
        return EventDensity.sinusoid(self.horizon, self.density_amplitude, 2 * math.pi / self.period, 0.0, 1.0)

    def ctrl(self) -> ControlProfile:
        return ControlProfile.periodic(self.horizon, self.ctrl_base, self.ctrl_amplitude, self.period,
                                       phase=-math.pi / 2)

    def noise(self) -> NoiseModel:
        c = self.ctrl().values
        return NoiseModel(CovarianceKernel.linear_decay(self.latent_sigma2, self.latent_h),
                          np.clip(c * (1 - c), self.latent_sigma2, None))

    def simul_curve(self) -> CecCurve:
        H = int(self.simul_length)
        dt = np.arange(1, H + 1)
        return CecCurve(self.simul_gate * np.minimum(dt / self.simul_ramp, 1.0))

    def to_json(self) -> dict[str, Any]:
        return dict(self.__dict__)


def generate_base_stream(eco: EcosystemSpec, simul_mode: str = "none", seed: Any = None) -> EventStream:
    """One historical stream; in one-concurrent mode the simultaneous effect is embedded."""
    if simul_mode not in SIMUL_MODES:
        raise ValueError(f"simul_mode must be one of {SIMUL_MODES}")
    s_plan, s_stream = seed_sequence(seed).spawn(2)
    f = eco.density()
    simuls = []
    if simul_mode == "one-concurrent":
        spec = DesignSpec("fixed", eco.simul_length, balanced=True)
        simuls.append((CecEffect(eco.simul_curve()), draw_design(spec, eco.horizon, f, s_plan)))
    return simulate_stream(f, eco.ctrl(), eco.noise(), None, simuls, None, eco.n, "continuous", s_stream)


def _estimate(stream: EventStream, plan: AssignmentPlan, estimator: str, burnin_h: float) -> float:
    if estimator == "burnin":
        return ht_burnin_estimate(stream, plan, burnin_h).value
    return ht_estimate(stream, plan).value


def run_synthetic_experiment(base_stream: EventStream, cec: CecCurve, design: DesignSpec,
                             estimator: str = "ht", burnin_h: float = 0.0, seed: Any = None,
                             density: EventDensity | None = None) -> float:
    """Inject the curve's effect under a fresh plan and return estimate minus the curve's GATE."""
    horizon = base_stream.horizon
    if horizon is None:
        raise ValueError("base stream metadata lacks the horizon")
    if density is not None and density.horizon != horizon:
        raise ValueError("density horizon differs from the stream horizon")
    plan = DesignSampler(design, float(horizon), density).draw(seed)
    return _score(base_stream, cec, plan, estimator, burnin_h)


def _score(base: EventStream, cec: CecCurve, plan: AssignmentPlan, estimator: str, burnin_h: float) -> float:
    y = base.outcomes + effect_at(CecEffect(cec), plan, base.times)
    return _estimate(base.with_outcomes(y), plan, estimator, burnin_h) - cec.gate


def summarize(errors: Sequence[float] | FloatArray) -> tuple[float, float, float]:
    """(mse, mse without the ceil(1%) largest |errors|, mean |error|)."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise ValueError("no errors to summarize")
    sq = e * e
    drop = math.ceil(0.01 * len(e))
    kept = np.sort(sq)[: len(e) - drop] if drop < len(e) else sq[:0]
    trimmed = float(kept.mean()) if kept.size else float("nan")
    return float(sq.mean()), trimmed, float(np.abs(e).mean())


@dataclass(frozen=True, eq=False)
class DesignScore:
    design: DesignSpec
    errors: FloatArray = field(repr=False)
    mse: float
    trimmed_mse: float
    mean_abs_error: float

    @classmethod
    def from_errors(cls, design: DesignSpec, errors: FloatArray) -> DesignScore:
        mse, trimmed, mae = summarize(errors)
        return cls(design, np.asarray(errors, dtype=float), mse, trimmed, mae)

    @property
    def se_mse(self) -> float:
        sq = self.errors ** 2
        return float(sq.std(ddof=1) / math.sqrt(len(sq))) if len(sq) > 1 else float("nan")

    def to_json(self) -> dict[str, Any]:
        q = np.quantile(np.abs(self.errors), [0.1, 0.25, 0.5, 0.75, 0.9]).tolist()
        return {"design": self.design.to_json(), "label": self.design.label, "mse": self.mse,
                "trimmed_mse": self.trimmed_mse, "mean_abs": self.mean_abs_error,
                "se_mse": self.se_mse, "abs_error_quantiles": dict(zip(["q10", "q25", "q50", "q75", "q90"], q))}


@dataclass(frozen=True, eq=False)
class SyntheticConfig:
    """Candidates, prior ensemble and historical source for design selection.

    ``base_streams``, when given, replaces the generator: each replication
    picks one of them uniformly.
    """

    candidates: Sequence[DesignSpec]
    ensemble: CecEnsemble
    ecosystem: EcosystemSpec = field(default_factory=EcosystemSpec)
    base_streams: Sequence[EventStream] = ()
    simul_mode: str = "none"
    estimator: str = "ht"
    burnin_h: float = 0.0
    R: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.R < 1:
            raise ValueError("R must be at least 1")
        if not self.candidates:
            raise ValueError("the candidate list is empty")
        if len(self.ensemble) == 0:
            raise ValueError("the CEC ensemble is empty")
        if self.simul_mode not in SIMUL_MODES:
            raise ValueError(f"simul_mode must be one of {SIMUL_MODES}")
        if self.estimator not in ("ht", "burnin"):
            raise ValueError("estimator must be 'ht' or 'burnin'")

    @property
    def horizon(self) -> int:
        if self.base_streams:
            return int(self.base_streams[0].horizon)
        return self.ecosystem.horizon


def historical_density(streams: Sequence[EventStream], horizon: int) -> EventDensity:
    """Per-minute event histogram of the pooled streams, with half a count added to every minute."""
    counts = np.full(int(horizon), 0.5)
    for s in streams:
        if s.horizon != horizon:
            raise ValueError("base streams have different horizons")
        np.add.at(counts, np.minimum(s.times.astype(np.int64), int(horizon) - 1), 1.0)
    return EventDensity.empirical(counts)


def _rank_key(score: DesignScore) -> tuple[float, float, int, str]:
    d = score.design
    return (score.mse, d.avg_length, FAMILY_ORDER[d.family], d.label)


def rank_designs(config: SyntheticConfig, threads: int = 1) -> tuple[list[DesignScore], DesignSpec]:
    """Score every candidate on R shared (stream, curve) draws; return scores in input order and the pick.

    The pick minimizes MSE; ties go to the shorter average interval, then to
    the family order fixed, poisson, change_of_measure.
    """
    eco = config.ecosystem
    T = config.horizon
    if not config.base_streams:
        density = eco.density()
    elif any(c.family == "change_of_measure" for c in config.candidates):
        density = historical_density(config.base_streams, T)
    else:
        density = None
    samplers = [DesignSampler(spec, float(T), density) for spec in config.candidates]
    keys = [spec.key() for spec in config.candidates]

    def replicate(r: int) -> list[float]:
        s_stream = np.random.SeedSequence([config.seed, r, 0])
        s_cec = np.random.SeedSequence([config.seed, r, 1])
        if config.base_streams:
            pick = np.random.default_rng(s_stream).integers(len(config.base_streams))
            base = config.base_streams[int(pick)]
        else:
            base = generate_base_stream(eco, config.simul_mode, s_stream)
        cec = sample_cec(config.ensemble, s_cec)
        out = []
        for sampler, key in zip(samplers, keys):
            plan = sampler.draw(np.random.SeedSequence([config.seed, r, key]))
            out.append(_score(base, cec, plan, config.estimator, config.burnin_h))
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(replicate, range(config.R)))
    else:
        rows = [replicate(r) for r in range(config.R)]
    matrix = np.array(rows).reshape(config.R, len(config.candidates))
    scores = [DesignScore.from_errors(spec, matrix[:, i]) for i, spec in enumerate(config.candidates)]
    selected = min(scores, key=_rank_key).design
    return scores, selected


def default_candidates(lengths: Sequence[float] = (28.0, 56.0, 112.0)) -> list[DesignSpec]:
    """Every family at every length, balanced and unbalanced."""
    return [DesignSpec(fam, float(L), balanced=b)
            for b in (False, True) for fam in FAMILY_ORDER for L in lengths]


def ranking_report(scores: Sequence[DesignScore], selected: DesignSpec) -> dict[str, Any]:
    ordered = sorted(scores, key=_rank_key)
    return {"selected": selected.to_json(), "selected_label": selected.label,
            "ranking": [s.to_json() for s in ordered]}


def write_ranking(scores: Sequence[DesignScore], selected: DesignSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(ranking_report(scores, selected), indent=2))


def write_error_matrix(scores: Sequence[DesignScore], path: str | Path) -> None:
    """One row per replication, one column per design."""
    header = ",".join(["replication"] + [s.design.label for s in scores])
    matrix = np.column_stack([s.errors for s in scores])
    lines = [header] + [",".join([str(r)] + [repr(float(x)) for x in row]) for r, row in enumerate(matrix)]
    Path(path).write_text("\n".join(lines) + "\n")
