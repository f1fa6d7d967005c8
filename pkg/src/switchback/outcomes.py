"""Synthetic event streams: control outcomes, effects, correlated noise."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Mapping, Sequence, Union

import numpy as np
import numpy.typing as npt

from .designs import AssignmentPlan
from .model import (
    CarryoverKernel,
    CovarianceKernel,
    EventDensity,
    FloatArray,
    StepFunction,
    sample_event_times,
    seed_sequence,
)

if TYPE_CHECKING:
    from .cec import CecCurve


def _per_minute(values: float | npt.ArrayLike, t: npt.ArrayLike) -> FloatArray:
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    if v.ndim == 0:
        return np.full(t.shape, float(v))
    j = np.clip(np.floor(t).astype(np.int64), 0, len(v) - 1)
    return v[j]


def _minute_array(values: float | npt.ArrayLike, T: int) -> FloatArray:
    v = np.asarray(values, dtype=float)
    if v.ndim == 0:
        return np.full(T, float(v))
    if len(v) != T:
        raise ValueError(f"per-minute profile has length {len(v)}, expected {T}")
    return v


@dataclass(frozen=True, eq=False)
class ControlProfile:
    """Mean control outcome per minute."""

    values: FloatArray

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float)
        if v.ndim != 1 or len(v) == 0 or np.any(~np.isfinite(v)):
            raise ValueError("control profile must be a finite per-minute array")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, horizon: int, c: float) -> ControlProfile:
        return cls(np.full(int(horizon), float(c)))

    @classmethod
    def periodic(cls, horizon: int, base: float, amplitude: float, period: float,
                 phase: float = 0.0) -> ControlProfile:
        mid = np.arange(int(horizon)) + 0.5
        return cls(base + amplitude * np.sin(2 * np.pi * mid / period + phase))

    @property
    def horizon(self) -> int:
        return len(self.values)

    def __call__(self, t: npt.ArrayLike) -> FloatArray:
        return _per_minute(self.values, t)

    def to_json(self) -> dict[str, Any]:
        return {"values": [float(x) for x in self.values]}


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Correlated part from ``covariance`` plus idiosyncratic noise, total variance sigma2(t)."""

    covariance: CovarianceKernel = field(default_factory=CovarianceKernel.none)
    variance: float | FloatArray = 0.0

    def variance_at(self, t: npt.ArrayLike) -> FloatArray:
        return _per_minute(self.variance, t)

    def check(self, horizon: int) -> None:
        mid = np.arange(horizon) + 0.5
        total = self.variance_at(mid)
        if np.any(total < 0):
            raise ValueError("noise variance must be nonnegative")
        if np.any(total < self.covariance.diag(mid) - 1e-12):
            raise ValueError("noise variance sigma2(t) is below cov(t, t)")


@dataclass(frozen=True, eq=False)
class KernelEffect:
    """delta_inst, delta_co (scalars or per-minute arrays) with a carryover kernel."""

    delta_inst: float | FloatArray
    delta_co: float | FloatArray
    kernel: CarryoverKernel

    def is_zero_carryover(self) -> bool:
        return bool(np.all(np.asarray(self.delta_co) == 0))


@dataclass(frozen=True, eq=False)
class CecEffect:
    """Effect driven by a cumulative-effect curve under the increment-convolution model."""

    curve: "CecCurve"


EffectModel = Union[KernelEffect, CecEffect]


def _plan_weighted_density(f: EventDensity, plan: AssignmentPlan, lookback: float) -> StepFunction:
    """f(u) * w(u) on [-E, T]; w is 0 in the pre-experiment period."""
    ext = f.extended(lookback)
    breaks = np.union1d(ext.breaks, plan.partition.endpoints)
    mid = (breaks[:-1] + breaks[1:]) / 2.0
    w = np.where(mid >= 0, plan.bits[plan.partition.interval_index(np.maximum(mid, 0.0))], 0)
    return StepFunction(breaks, ext(mid) * w)


def carryover_exposure(kernel: CarryoverKernel, f: EventDensity, plan: AssignmentPlan,
                       t: npt.ArrayLike) -> FloatArray:
    """int w(t') d_t(t') f(t') dt' at the given times."""
    t = np.asarray(t, dtype=float)
    step = _plan_weighted_density(f, plan, kernel.support)
    num = kernel.window_integral(step, t, t - kernel.support, t)
    z = kernel.normalizer(f, t)
    return np.divide(num, z, out=np.zeros_like(num), where=z > 0)


def _cec_effect(values: FloatArray, plan: AssignmentPlan, t: FloatArray) -> FloatArray:
    H = len(values)
    g = np.concatenate([[0.0], values])
    s, d = plan.switch_times()
    out = np.zeros_like(t)
    if len(s) == 0:
        return out
    last = np.searchsorted(s, t, side="left") - 1
    near = np.zeros(t.shape, dtype=np.int64)
    lag = 0
    while True:
        k = last - lag
        ok = k >= 0
        x = t - s[np.maximum(k, 0)]
        ok &= x < H
        if not ok.any():
            break
        idx = np.clip(np.ceil(x).astype(np.int64), 0, H)
        out += np.where(ok, d[np.maximum(k, 0)] * g[idx], 0.0)
        near += ok
        lag += 1
    far = last - near
    state = np.where(far >= 0, (far + 1) % 2, 0)
    return out + values[-1] * state


def effect_at(model: EffectModel, plan: AssignmentPlan, t: npt.ArrayLike,
              density: EventDensity | None = None) -> FloatArray | float:
    """Treatment effect on the market outcome at time(s) t under the plan.

    Kernel models need the event density; CEC models superpose the curve's
    increments from every switch, with the treatment path read just before
    each lag.
    """
    ta = np.asarray(t, dtype=float)
    if np.any(ta < 0) or np.any(ta > plan.horizon):
        raise ValueError("t must lie in [0, T]")
    flat = np.atleast_1d(ta)
    if isinstance(model, KernelEffect):
        if density is None:
            raise ValueError("kernel effects need the event density")
        w = plan.treatment_at(flat)
        out = w * _per_minute(model.delta_inst, flat)
        if not model.is_zero_carryover():
            out = out + _per_minute(model.delta_co, flat) * carryover_exposure(
                model.kernel, density, plan, flat)
    elif isinstance(model, CecEffect):
        out = _cec_effect(np.asarray(model.curve.values, dtype=float), plan, flat)
    else:
        raise TypeError(f"unsupported effect model {type(model).__name__}")
    return float(out[0]) if ta.ndim == 0 else out.reshape(ta.shape)


def gate_of(model: EffectModel, f: EventDensity) -> float:
    """Global average treatment effect of a model."""
    if isinstance(model, KernelEffect):
        T = f.horizon
        total = _minute_array(model.delta_inst, T) + _minute_array(model.delta_co, T)
        return float(np.dot(f.cell_mass, total))
    return float(model.curve.values[-1])


def implied_cec_values(model: KernelEffect, H: int) -> FloatArray:
    """CEC of a constant-effect uniform-window model: inst + co * min(dt, h)/h."""
    if model.kernel.variant != "uniform" or np.ndim(model.delta_inst) or np.ndim(model.delta_co):
        raise ValueError("only constant uniform-window models have this closed form")
    dt = np.arange(1, H + 1, dtype=float)
    return model.delta_inst + model.delta_co * np.minimum(dt, model.kernel.h) / model.kernel.h


@dataclass(frozen=True, eq=False)
class EventStream:
    """Event times (sorted) with outcomes and free-form metadata."""

    times: FloatArray
    outcomes: FloatArray
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        t = np.array(self.times, dtype=float)
        y = np.array(self.outcomes, dtype=float)
        if t.shape != y.shape or t.ndim != 1:
            raise ValueError("times and outcomes must be 1-d arrays of equal length")
        if np.any(np.diff(t) < 0):
            raise ValueError("event times must be sorted")
        horizon = self.metadata.get("horizon")
        if horizon is not None and len(t) and (t[0] < 0 or t[-1] > horizon):
            raise ValueError("event times must lie in [0, T]")
        t.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def n(self) -> int:
        return len(self.times)

    @property
    def horizon(self) -> float | None:
        return self.metadata.get("horizon")

    def with_outcomes(self, outcomes: npt.ArrayLike, **meta: Any) -> EventStream:
        return EventStream(self.times, outcomes, {**self.metadata, **meta})

    def subset(self, mask: npt.ArrayLike) -> EventStream:
        mask = np.asarray(mask)
        return EventStream(self.times[mask], self.outcomes[mask], self.metadata)

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        lines = ["t_min,outcome"]
        lines += [f"{t!r},{y!r}" for t, y in zip(self.times.tolist(), self.outcomes.tolist())]
        path.write_text("\n".join(lines) + "\n")
        path.with_suffix(".json").write_text(json.dumps(self.metadata, indent=2, sort_keys=True))

    @classmethod
    def from_csv(cls, path: str | Path) -> EventStream:
        path = Path(path)
        rows = path.read_text().splitlines()
        if not rows or rows[0].strip() != "t_min,outcome":
            raise ValueError(f"{path}: expected header 't_min,outcome'")
        data = np.array([[float(x) for x in r.split(",")] for r in rows[1:] if r.strip()])
        data = data.reshape(-1, 2)
        meta_path = path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(data[:, 0], data[:, 1], meta)


def _correlated_noise(cov: CovarianceKernel, t: FloatArray, rng: np.random.Generator) -> FloatArray:
    """Zero-mean Gaussian values at t with cov sigma2 sqrt(v v') (h - |dt|)_+ / h.

    Uses X(t) = sqrt(sigma2 v(t) / h) (B(t) - B(t - h)) for a Brownian motion B,
    whose covariance is exactly the triangular kernel at continuous times.
    """
    if cov.variant == "none" or cov.sigma2 == 0 or len(t) == 0:
        return np.zeros_like(t)
    h = cov.h
    pts = np.concatenate([t, t - h])
    order = np.argsort(pts, kind="stable")
    gaps = np.diff(pts[order], prepend=pts[order][0])
    walk = np.cumsum(rng.standard_normal(len(pts)) * np.sqrt(gaps))
    b = np.empty_like(walk)
    b[order] = walk
    n = len(t)
    return np.sqrt(cov.sigma2 * cov.scale_at(t) / h) * (b[:n] - b[n:])


def _seed_label(seed: Any) -> Any:
    if isinstance(seed, np.random.SeedSequence):
        return {"entropy": str(seed.entropy), "spawn_key": list(seed.spawn_key)}
    return seed if seed is None or isinstance(seed, int) else str(seed)


def simulate_stream(
    f: EventDensity,
    ctrl: ControlProfile,
    noise: NoiseModel,
    primary: tuple[EffectModel, AssignmentPlan] | None,
    simuls: Sequence[tuple[EffectModel, AssignmentPlan]] = (),
    compound: Mapping[int, float] | None = None,
    n: int = 1000,
    mode: str = "continuous",
    seed: Any = None,
) -> EventStream:
    """Sample n events and their outcomes.

    Market outcome: ctrl + primary effect + simultaneous effects +
    sum_k compound[k] * W_t * W^s_k(t).  ``compound`` maps a simultaneous
    intervention index to its interaction coefficient with the primary.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if mode not in ("continuous", "binary"):
        raise ValueError("mode must be 'continuous' or 'binary'")
    T = f.horizon
    if ctrl.horizon != T:
        raise ValueError("control profile and density have different horizons")
    noise.check(T)
    plans = ([primary[1]] if primary else []) + [p for _, p in simuls]
    for plan in plans:
        if plan.horizon != T:
            raise ValueError("plan horizon differs from the density horizon")
    compound = dict(compound or {})
    if compound and primary is None:
        raise ValueError("compound terms need a primary intervention")

    ss = seed_sequence(seed)
    s_times, s_latent, s_idio, s_bern = ss.spawn(4)
    t = sample_event_times(f, n, np.random.default_rng(s_times))

    y = ctrl(t)
    if primary is not None:
        y = y + effect_at(primary[0], primary[1], t, f)
    for model, plan in simuls:
        y = y + effect_at(model, plan, t, f)
    if compound:
        w = primary[1].treatment_at(t)
        for k, coef in compound.items():
            y = y + coef * w * simuls[k][1].treatment_at(t)

    meta: dict[str, Any] = {"horizon": T, "seed": _seed_label(seed),
                            "mode": mode, "n": n}
    if mode == "continuous":
        eps = _correlated_noise(noise.covariance, t, np.random.default_rng(s_latent))
        idio_var = noise.variance_at(t) - noise.covariance.diag(t)
        eps += np.sqrt(np.maximum(idio_var, 0.0)) * np.random.default_rng(s_idio).standard_normal(n)
        out = y + eps
    else:
        p = np.clip(y, 0.0, 1.0)
        adjusted = np.abs(p - y) > 0.05
        rate = float(np.mean(np.abs(p - y) > 0))
        meta["clamp_rate"] = rate
        if np.mean(adjusted) > 0.01:
            meta["warning"] = (f"success probability clamped by more than 0.05 for "
                               f"{100 * np.mean(adjusted):.2f}% of events")
        out = (np.random.default_rng(s_bern).random(n) < p).astype(float)
    return EventStream(t, out, meta)
