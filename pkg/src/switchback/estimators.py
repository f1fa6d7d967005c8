"""Horvitz-Thompson estimation, the burn-in variant, and randomization inference."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
import numpy.typing as npt

from .designs import AssignmentPlan, DesignSampler, DesignSpec
from .model import EventDensity, FloatArray, seed_sequence
from .outcomes import EventStream


class EstimationError(RuntimeError):
    """Raised when an estimate cannot be formed; ``details`` carries diagnostics."""

    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message)
        self.details = details


@dataclass(frozen=True)
class GateEstimate:
    value: float
    n_used: int
    pi: float = 0.5
    burnin_h: float = 0.0

    def to_json(self) -> dict[str, Any]:
        return {"value": self.value, "n_used": self.n_used, "pi": self.pi, "burnin_h": self.burnin_h}


@dataclass(frozen=True, eq=False)
class RandomizationResult:
    p_value: float
    draws: int
    null_distribution: FloatArray = field(repr=False)
    ci: tuple[float, float] | None = None

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"p_value": self.p_value, "draws": self.draws}
        if self.ci is not None:
            out["ci"] = list(self.ci)
        return out


def _ordered(stream: EventStream) -> tuple[FloatArray, FloatArray]:
    # a canonical order makes the floating-point sum independent of input order
    order = np.lexsort((stream.outcomes, stream.times))
    return stream.times[order], stream.outcomes[order]


def _ht_value(w: npt.NDArray[np.int8], y: FloatArray, pi: float) -> float:
    terms = np.where(w == 1, y / pi, -y / (1.0 - pi))
    return float(np.sum(terms) / len(y))


def ht_estimate(stream: EventStream, plan: AssignmentPlan) -> GateEstimate:
    """(1/n) sum [W Y / pi - (1 - W) Y / (1 - pi)]."""
    if stream.n == 0:
        raise ValueError("empty stream")
    t, y = _ordered(stream)
    w = plan.treatment_at(t)
    return GateEstimate(_ht_value(w, y, plan.pi), stream.n, plan.pi, 0.0)


def joint_probabilities(plan: AssignmentPlan, t: FloatArray, h: float) -> tuple[FloatArray, FloatArray]:
    """P(W_t = W_{t-h} = 1) and P(W_t = W_{t-h} = 0) under the plan's assignment law.

    Requires t >= h.
    """
    part = plan.partition
    m_now = part.interval_index(t)
    m_lag = part.interval_index(t - h)
    same = m_now == m_lag
    pi = plan.pi
    if plan.law == "iid":
        p11 = np.where(same, pi, pi * pi)
        p00 = np.where(same, 1 - pi, (1 - pi) ** 2)
    else:
        n1 = plan.n_first
        opposite = (m_now >= n1) & (m_lag < n1) & (m_now - n1 == m_lag)
        p11 = np.where(same, 0.5, np.where(opposite, 0.0, 0.25))
        p00 = p11.copy()
    return p11, p00


def ht_burnin_estimate(stream: EventStream, plan: AssignmentPlan, h: float) -> GateEstimate:
    """HT restricted to events whose treatment has been held for at least h minutes.

    Events before time h have no in-experiment lag and are left out of both
    arms; the average runs over the remaining events.
    """
    if h < 0:
        raise ValueError("h must be nonnegative")
    if h == 0:
        return ht_estimate(stream, plan)
    if stream.n == 0:
        raise ValueError("empty stream")
    t, y = _ordered(stream)
    eligible = t >= h
    t, y = t[eligible], y[eligible]
    if len(t) == 0:
        raise EstimationError("no events after the burn-in window", n=stream.n, h=h)
    w = plan.treatment_at(t)
    w_lag = plan.treatment_at(t - h)
    p11, p00 = joint_probabilities(plan, t, h)
    treated = (w == 1) & (w_lag == 1) & (p11 > 0)
    control = (w == 0) & (w_lag == 0) & (p00 > 0)
    if not treated.any() or not control.any():
        raise EstimationError("an arm has no qualifying events", n=stream.n,
                              n_eligible=len(t), n_treated=int(treated.sum()),
                              n_control=int(control.sum()), h=h)
    terms = np.zeros_like(y)
    terms[treated] = y[treated] / p11[treated]
    terms[control] = -y[control] / p00[control]
    value = float(np.sum(terms) / len(t))
    return GateEstimate(value, int(treated.sum() + control.sum()), plan.pi, float(h))


def _null_draws(stream: EventStream, spec: DesignSpec, J: int, seed: Any,
                density: EventDensity | None, columns: list[FloatArray], h: float) -> FloatArray:
    """HT of each column of outcomes under J fresh plans drawn from the design."""
    horizon = stream.horizon
    if horizon is None:
        raise ValueError("stream metadata lacks the horizon")
    sampler = DesignSampler(spec, float(horizon), density)
    t, _ = _ordered(stream)
    children = seed_sequence(seed).spawn(J)
    out = np.empty((J, len(columns)))
    for j, child in enumerate(children):
        plan = sampler.draw(child)
        if h > 0:
            for c, col in enumerate(columns):
                try:
                    out[j, c] = ht_burnin_estimate(EventStream(t, col), plan, h).value
                except EstimationError:
                    out[j, c] = 0.0
        else:
            w = plan.treatment_at(t)
            for c, col in enumerate(columns):
                out[j, c] = _ht_value(w, col, plan.pi)
    return out


def randomization_pvalue(stream: EventStream, spec: DesignSpec, observed: GateEstimate, J: int = 1000,
                         seed: Any = None, density: EventDensity | None = None) -> RandomizationResult:
    """Sharp-null test: share of redrawn designs with |estimate| >= |observed|."""
    if J < 100:
        raise ValueError("J must be at least 100")
    _, y = _ordered(stream)
    null = _null_draws(stream, spec, J, seed, density, [y], observed.burnin_h)[:, 0]
    obs = abs(observed.value)
    # treat estimates equal up to rounding as ties
    tol = 1e-12 * max(1.0, obs)
    p = float(np.mean(np.abs(null) >= obs - tol))
    return RandomizationResult(p, J, null)


def randomization_ci(stream: EventStream, spec: DesignSpec, J: int = 1000, alpha: float = 0.05,
                     seed: Any = None, *, plan: AssignmentPlan, density: EventDensity | None = None,
                     grid_size: int = 201, span: float = 4.0) -> tuple[float, float]:
    """Invert the sharp-null test over constant additive effects delta0.

    Under delta0 the control outcomes are Y - delta0 * W_obs.  The grid is
    centred on the point estimate and spans ``span`` null standard deviations.
    """
    if not 0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 0.5)")
    if J < 1:
        raise ValueError("J must be positive")
    t, y = _ordered(stream)
    w_obs = plan.treatment_at(t).astype(float)
    draws = _null_draws(stream, spec, J, seed, density, [y, w_obs], 0.0)
    a, b = draws[:, 0], draws[:, 1]
    a_obs = _ht_value(w_obs.astype(np.int8), y, plan.pi)
    b_obs = _ht_value(w_obs.astype(np.int8), w_obs, plan.pi)
    sd = float(np.std(a))
    if sd == 0.0:
        grid = np.array([a_obs])
    else:
        grid = a_obs + np.linspace(-span * sd, span * sd, grid_size)
    stat_null = np.abs(a[None, :] - grid[:, None] * b[None, :])
    stat_obs = np.abs(a_obs - grid * b_obs)
    tol = 1e-12 * np.maximum(1.0, stat_obs)
    pvals = np.mean(stat_null >= (stat_obs - tol)[:, None], axis=1)
    keep = grid[pvals > alpha]
    if len(keep) == 0:
        raise EstimationError("no grid value is accepted", grid=grid.tolist(), p_values=pvals.tolist())
    return float(keep.min()), float(keep.max())
