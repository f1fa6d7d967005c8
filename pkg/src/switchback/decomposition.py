"""Interval-level statistics, closed-form bias and MSE, and a Monte-Carlo MSE oracle.

Integrals are taken against the per-minute density.  Single integrals are
exact sums over pieces bounded by minute marks and interval endpoints.
Carryover integrals use 3-point Gauss-Legendre on pieces whose breaks also
include the kernel-support shifts of those marks, so the integrand is smooth
on every piece.  Covariance double integrals are exact through the second
antiderivative of the triangular kernel.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

from .designs import AssignmentPlan, DesignSampler, DesignSpec, IntervalPartition, build_fixed
from .estimators import EstimationError, ht_burnin_estimate, ht_estimate
from .model import CarryoverKernel, CovarianceKernel, EventDensity, FloatArray, seed_sequence
from .outcomes import (
    CecEffect,
    ControlProfile,
    EffectModel,
    KernelEffect,
    NoiseModel,
    _per_minute,
    gate_of,
    simulate_stream,
)

_GL_X, _GL_W = np.polynomial.legendre.leggauss(3)


class UnsupportedModelError(ValueError):
    """The closed forms do not cover this configuration; use mse_monte_carlo."""


def _pieces(T: float, *extra: FloatArray) -> FloatArray:
    pts = [np.arange(0.0, math.floor(T) + 1.0), np.array([0.0, float(T)])]
    pts += [np.asarray(e, dtype=float) for e in extra]
    b = np.unique(np.concatenate(pts))
    return b[(b >= 0) & (b <= T)]


def _piece_mass(f: EventDensity, breaks: FloatArray) -> tuple[FloatArray, FloatArray]:
    mid = (breaks[:-1] + breaks[1:]) / 2.0
    return mid, f(mid) * np.diff(breaks)


def _gauss_nodes(breaks: FloatArray) -> tuple[FloatArray, FloatArray]:
    lo, hi = breaks[:-1], breaks[1:]
    half = (hi - lo) / 2.0
    t = ((lo + hi) / 2.0)[:, None] + half[:, None] * _GL_X[None, :]
    w = half[:, None] * _GL_W[None, :]
    return t.ravel(), w.ravel()


def _carry_matrix(target: IntervalPartition, source: IntervalPartition, kernel: CarryoverKernel,
                  delta_co: float | FloatArray, f: EventDensity) -> tuple[FloatArray, FloatArray]:
    """Matrix of int_{target m} delta_co(t) int_{source k} d_t(u) f(u) du f(t) dt.

    Also returns the mass lost to the pre-experiment window per target interval.
    """
    T = float(f.horizon)
    s = kernel.support
    frac = s - math.floor(s)
    breaks = _pieces(T, target.endpoints, source.endpoints, source.endpoints + s,
                     np.arange(0.0, math.floor(T) + 1.0) + frac, np.array([s]))
    t, w = _gauss_nodes(breaks)
    step = f.extended(s)
    z = kernel.normalizer(f, t)
    base = w * _per_minute(delta_co, t) * f(t)
    base = np.divide(base, z, out=np.zeros_like(base), where=z > 0)
    tgt = target.interval_index(t)
    M, K = target.M, source.M
    out = np.zeros((M, K))
    e = source.endpoints
    for k in range(K):
        lo_i = np.searchsorted(t, e[k], side="left")
        hi_i = np.searchsorted(t, e[k + 1] + s, side="right")
        if hi_i <= lo_i:
            continue
        sl = slice(lo_i, hi_i)
        inner = kernel.window_integral(step, t[sl], e[k], e[k + 1])
        out[:, k] = np.bincount(tgt[sl], weights=base[sl] * inner, minlength=M)
    sel = t < s
    pre = kernel.window_integral(step, t[sel], -s - 1.0, 0.0)
    loss = np.bincount(tgt[sel], weights=base[sel] * pre, minlength=M)
    return out, loss


def _phi(x: FloatArray, h: float) -> FloatArray:
    """Second antiderivative of (h - |x|)_+ / h, even, with phi(0) = phi'(0) = 0."""
    a = np.abs(x)
    inside = a * a / 2.0 - a ** 3 / (6.0 * h)
    outside = h * h / 3.0 + (h / 2.0) * (a - h)
    return np.where(a <= h, inside, outside)


def _covariance_blocks(partition: IntervalPartition, f: EventDensity, cov: CovarianceKernel) -> FloatArray:
    """C^(m): double integral of cov(t, t') f(t) f(t') over each interval squared."""
    M = partition.M
    if cov.variant == "none" or cov.sigma2 == 0:
        return np.zeros(M)
    T = float(f.horizon)
    h = cov.h
    b = _pieces(T, partition.endpoints)
    lo, hi = b[:-1], b[1:]
    mid = (lo + hi) / 2.0
    dens = f(mid) * np.sqrt(cov.scale_at(mid))
    idx = partition.interval_index(mid)
    out = np.zeros(M)
    n = len(lo)
    # largest piece offset that can still be within h
    reach = np.searchsorted(lo, hi + h, side="left") - np.arange(n)
    for d in range(int(reach.max()) + 1):
        i = np.arange(n - d)
        j = i + d
        ok = idx[i] == idx[j]
        if not ok.any():
            continue
        i, j = i[ok], j[ok]
        box = (_phi(hi[i] - lo[j], h) + _phi(lo[i] - hi[j], h)
               - _phi(hi[i] - hi[j], h) - _phi(lo[i] - lo[j], h))
        contrib = dens[i] * dens[j] * box
        out += (1.0 if d == 0 else 2.0) * np.bincount(idx[i], weights=contrib, minlength=M)
    return cov.sigma2 * out


@dataclass(frozen=True, eq=False)
class IntervalStats:
    """Interval-level integrals for one partition.

    ``delta_co`` is the density-weighted carryover effect, ``delta_co_global``
    the same quantity with the pre-experiment window left untreated
    (``delta_co - co_boundary_loss``), which equals the sum of ``i_matrix``.
    ``xi`` includes that loss, so its sum is the horizon effect ``gate``.
    """

    partition: IntervalPartition
    mu: FloatArray
    mu_yctrl: FloatArray
    v: FloatArray
    c: FloatArray
    xi: FloatArray
    xi_inst: FloatArray
    xi_inst_dem: FloatArray
    xi_co_dem: FloatArray
    i_matrix: FloatArray
    delta_inst: float
    delta_co: float
    delta_co_global: float
    co_boundary_loss: float
    gate: float
    simul_gate_mass: list[FloatArray] = field(default_factory=list)
    simul_inst_mass: list[FloatArray] = field(default_factory=list)
    simul_co_mass: list[FloatArray] = field(default_factory=list)

    @property
    def M(self) -> int:
        return self.partition.M

    @property
    def i_diag(self) -> FloatArray:
        return np.diag(self.i_matrix).copy()


def interval_stats(partition: IntervalPartition, f: EventDensity, ctrl: ControlProfile, noise: NoiseModel,
                   primary_effect: EffectModel,
                   simul_effects: Sequence[tuple[EffectModel, IntervalPartition]] = ()) -> IntervalStats:
    """All interval statistics needed by the closed-form bias and MSE."""
    if isinstance(primary_effect, CecEffect) or any(isinstance(m, CecEffect) for m, _ in simul_effects):
        raise UnsupportedModelError("CEC effects have no closed form here; use mse_monte_carlo")
    T = f.horizon
    if not math.isclose(partition.horizon, T):
        raise ValueError("partition horizon differs from the density horizon")
    M = partition.M
    b = _pieces(T, partition.endpoints)
    mid, mass = _piece_mass(f, b)
    idx = partition.interval_index(mid)

    def per_interval(values: FloatArray) -> FloatArray:
        return np.bincount(idx, weights=mass * values, minlength=M)

    mu = per_interval(np.ones_like(mid))
    mu_yctrl = per_interval(ctrl(mid))
    v = per_interval(noise.variance_at(mid))
    c = _covariance_blocks(partition, f, noise.covariance)
    xi_inst = per_interval(_per_minute(primary_effect.delta_inst, mid))
    xi_co = per_interval(_per_minute(primary_effect.delta_co, mid))
    delta_inst = float(xi_inst.sum())
    delta_co = float(xi_co.sum())
    if primary_effect.is_zero_carryover():
        imat, loss = np.zeros((M, M)), np.zeros(M)
    else:
        imat, loss = _carry_matrix(partition, partition, primary_effect.kernel, primary_effect.delta_co, f)
    xi = xi_inst + imat.sum(axis=1)

    gates, insts, cos = [], [], []
    for model, spart in simul_effects:
        bs = _pieces(T, partition.endpoints, spart.endpoints)
        smid, smass = _piece_mass(f, bs)
        inst = np.zeros((M, spart.M))
        np.add.at(inst, (partition.interval_index(smid), spart.interval_index(smid)),
                  smass * _per_minute(model.delta_inst, smid))
        if model.is_zero_carryover():
            co = np.zeros_like(inst)
        else:
            co, _ = _carry_matrix(partition, spart, model.kernel, model.delta_co, f)
        insts.append(inst)
        cos.append(co)
        gates.append((inst + co).sum(axis=1))

    return IntervalStats(
        partition=partition, mu=mu, mu_yctrl=mu_yctrl, v=v, c=c, xi=xi, xi_inst=xi_inst,
        xi_inst_dem=xi_inst - delta_inst * mu, xi_co_dem=xi_co - delta_co * mu,
        i_matrix=imat, delta_inst=delta_inst, delta_co=delta_co,
        delta_co_global=float(imat.sum()), co_boundary_loss=float(loss.sum()),
        gate=float(xi.sum()), simul_gate_mass=gates, simul_inst_mass=insts, simul_co_mass=cos,
    )


def bias_closed_form(stats: IntervalStats, additive: bool = True) -> tuple[float, float | None]:
    """(carryover bias, simultaneous bias); the latter is None when not additive."""
    bias_co = float(np.trace(stats.i_matrix)) - stats.delta_co
    return bias_co, (0.0 if additive else None)


def _off_diagonal_terms(i: FloatArray) -> float:
    off = ~np.eye(len(i), dtype=bool)
    return float(np.sum((i * i + i * i.T)[off]))


@dataclass(frozen=True)
class MseBreakdown:
    var_meas: float
    bias_carryover: float
    var_inst_carryover: float
    e_simul_sq: float
    cross_simul: float
    bias_simul: float
    total_mse: float
    n: int

    @staticmethod
    def assemble(var_meas: float, bias_carryover: float, var_inst_carryover: float,
                 e_simul_sq: float, cross_simul: float, n: int, bias_simul: float = 0.0) -> MseBreakdown:
        total = var_meas + bias_carryover ** 2 + var_inst_carryover + e_simul_sq + 2.0 * cross_simul
        return MseBreakdown(var_meas, bias_carryover, var_inst_carryover, e_simul_sq,
                            cross_simul, bias_simul, total, n)

    def to_json(self) -> dict[str, Any]:
        return dict(self.__dict__)


def mse_closed_form(stats: IntervalStats, n: int, additive: bool = True) -> MseBreakdown:
    """MSE of the HT estimator under i.i.d. pi = 1/2 assignment and additive effects.

    The O(1/n) event-sampling variance of the effect terms is not included.
    """
    if not additive:
        raise UnsupportedModelError("non-additive configurations need mse_monte_carlo")
    if n < 1:
        raise ValueError("n must be positive")
    var_meas = 4.0 * float(np.sum(stats.v / n + stats.c * (n - 1) / n))
    bias_co, _ = bias_closed_form(stats)
    shifted = stats.xi + 2.0 * stats.mu_yctrl
    var_ic = float(np.sum(shifted ** 2)) + _off_diagonal_terms(stats.i_matrix)
    e_simul = 0.0
    cross = 0.0
    if stats.simul_gate_mass:
        g = np.sum(stats.simul_gate_mass, axis=0)
        e_simul = float(np.sum(g ** 2))
        e_simul += sum(float(np.sum((a + b) ** 2)) for a, b in zip(stats.simul_inst_mass, stats.simul_co_mass))
        cross = float(np.dot(shifted, g))
    return MseBreakdown.assemble(var_meas, bias_co, var_ic, e_simul, cross, int(n))


def balanced_variance_terms(stats: IntervalStats) -> float:
    """Assignment variance with the control mean cancelled by a mirrored design."""
    part = stats.partition
    if not part.is_mirrored(part.horizon / 2.0):
        raise ValueError("balanced terms need a mirrored partition")
    return float(np.sum(stats.xi ** 2)) + _off_diagonal_terms(stats.i_matrix)


def sweep_fixed(T: int, Ms: Sequence[int], f: EventDensity, ctrl: ControlProfile, noise: NoiseModel,
                primary: KernelEffect, n: int,
                simuls: Sequence[tuple[KernelEffect, IntervalPartition]] = ()) -> list[dict[str, float]]:
    """Closed-form components for fixed designs with M equal intervals."""
    rows = []
    for M in Ms:
        part = build_fixed(T, T / M, 0.0)
        br = mse_closed_form(interval_stats(part, f, ctrl, noise, primary, simuls), n)
        rows.append({
            "M": int(M), "var_meas": br.var_meas, "bias_sq": br.bias_carryover ** 2,
            "var_total_effect": br.var_inst_carryover, "e_simul_sq": br.e_simul_sq,
            "cross": br.cross_simul, "total": br.total_mse,
        })
    return rows


SWEEP_COLUMNS = ("M", "var_meas", "bias_sq", "var_total_effect", "e_simul_sq", "cross", "total")


@dataclass(frozen=True)
class SimulSpec:
    """A simultaneous intervention.  ``coupled`` reuses the primary plan."""

    effect: EffectModel
    design: DesignSpec | None = None
    coupled: bool = False

    def __post_init__(self) -> None:
        if not self.coupled and self.design is None:
            raise ValueError("an uncoupled simultaneous intervention needs a design")


@dataclass(frozen=True, eq=False)
class MonteCarloConfig:
    density: EventDensity
    ctrl: ControlProfile
    noise: NoiseModel
    primary: EffectModel
    design: DesignSpec
    simuls: Sequence[SimulSpec] = ()
    compound: Mapping[int, float] = field(default_factory=dict)
    estimator: str = "ht"
    burnin_h: float = 0.0
    n: int = 1000
    R: int = 100
    mode: str = "continuous"

    def __post_init__(self) -> None:
        if self.estimator not in ("ht", "burnin"):
            raise ValueError("estimator must be 'ht' or 'burnin'")
        if self.R < 1:
            raise ValueError("R must be positive")


@dataclass(frozen=True, eq=False)
class MonteCarloResult:
    bias_hat: float
    mse_hat: float
    se_bias: float | None
    se_mse: float | None
    errors: FloatArray = field(repr=False)
    failures: int = 0

    def __iter__(self) -> Iterator[Any]:
        return iter((self.bias_hat, self.mse_hat, self.se_bias, self.se_mse))

    def to_json(self) -> dict[str, Any]:
        return {"bias_hat": self.bias_hat, "mse_hat": self.mse_hat, "se_bias": self.se_bias,
                "se_mse": self.se_mse, "R": int(len(self.errors)), "failures": self.failures}


def _jackknife_mean_se(x: FloatArray) -> float | None:
    R = len(x)
    if R < 2:
        return None
    loo = (x.sum() - x) / (R - 1)
    return float(math.sqrt((R - 1) / R * np.sum((loo - loo.mean()) ** 2)))


class _Replicator:
    def __init__(self, cfg: MonteCarloConfig) -> None:
        T = cfg.density.horizon
        self.cfg = cfg
        self.truth = gate_of(cfg.primary, cfg.density)
        self.primary = DesignSampler(cfg.design, float(T), cfg.density)
        self.simuls = [None if s.coupled else DesignSampler(s.design, float(T), cfg.density)
                       for s in cfg.simuls]

    def __call__(self, child: np.random.SeedSequence) -> float:
        cfg = self.cfg
        s_plan, s_simul, s_stream = child.spawn(3)
        plan = self.primary.draw(s_plan)
        simul_seeds = s_simul.spawn(max(len(cfg.simuls), 1))
        simul_plans: list[AssignmentPlan] = [
            plan if sampler is None else sampler.draw(ss)
            for sampler, ss in zip(self.simuls, simul_seeds)
        ]
        stream = simulate_stream(
            cfg.density, cfg.ctrl, cfg.noise, (cfg.primary, plan),
            [(s.effect, p) for s, p in zip(cfg.simuls, simul_plans)],
            cfg.compound, cfg.n, cfg.mode, s_stream,
        )
        if cfg.estimator == "burnin":
            est = ht_burnin_estimate(stream, plan, cfg.burnin_h)
        else:
            est = ht_estimate(stream, plan)
        return est.value - self.truth


def mse_monte_carlo(cfg: MonteCarloConfig, seed: Any = None, threads: int = 1) -> MonteCarloResult:
    """Bias and MSE of the chosen estimator over R independent replications.

    Each replication redraws the designs, event times and noise.  Replications
    whose estimator fails are dropped and counted in ``failures``.
    """
    rep = _Replicator(cfg)
    children = seed_sequence(seed).spawn(cfg.R)

    def safe(child: np.random.SeedSequence) -> float:
        try:
            return rep(child)
        except EstimationError:
            return math.nan

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            errs = np.array(list(pool.map(safe, children)))
    else:
        errs = np.array([safe(c) for c in children])
    failures = int(np.isnan(errs).sum())
    errs = errs[~np.isnan(errs)]
    if len(errs) == 0:
        raise EstimationError("every replication failed", R=cfg.R)
    sq = errs ** 2
    return MonteCarloResult(float(errs.mean()), float(sq.mean()), _jackknife_mean_se(errs),
                            _jackknife_mean_se(sq), errs, failures)
