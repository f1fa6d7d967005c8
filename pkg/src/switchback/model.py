"""Continuous-time primitives: event densities, carryover kernels, covariance kernels.

Every density is piecewise constant on the one-minute grid (the value in
minute ``j`` is the midpoint value ``f(j + 0.5)``), so integrals against it
reduce to exact sums plus partial-cell corrections.  Times before 0 belong to
the pre-experiment period: the density is extended periodically there and
treatment is always off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import numpy.typing as npt

FloatArray = npt.NDArray[np.float64]

# Geometric kernels are cut where the weight drops below this level.
GEOMETRIC_CUTOFF = 1e-12


def seed_sequence(seed: Any) -> np.random.SeedSequence:
    """Fresh SeedSequence for an int, None, or an existing SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key)
    return np.random.SeedSequence(seed)


def _readonly(a: npt.ArrayLike) -> FloatArray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MinuteGrid:
    """Integer minute grid 0, 1, ..., T-1 with unit step."""

    horizon_minutes: int
    step: int = 1

    def __post_init__(self) -> None:
        if int(self.horizon_minutes) != self.horizon_minutes or self.horizon_minutes <= 0:
            raise ValueError("horizon_minutes must be a positive integer")
        if self.step != 1:
            raise ValueError("the grid step is fixed at one minute")

    @property
    def points(self) -> npt.NDArray[np.int64]:
        return np.arange(self.horizon_minutes)

    @property
    def midpoints(self) -> FloatArray:
        return np.arange(self.horizon_minutes) + 0.5


class StepFunction:
    """Piecewise-constant function with exact running integrals.

    ``breaks`` has one more entry than ``values``.  ``m0(x)`` is the integral
    of the function from ``breaks[0]`` to ``x``, ``m1(x)`` the integral of
    ``u * phi(u)``, and ``expo(x, c)`` the exponentially filtered integral
    ``int exp(-c (x - u)) phi(u) du``.
    """

    def __init__(self, breaks: npt.ArrayLike, values: npt.ArrayLike) -> None:
        self.breaks = np.asarray(breaks, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.breaks.ndim != 1 or len(self.breaks) != len(self.values) + 1:
            raise ValueError("breaks must have exactly one more entry than values")
        lo, hi = self.breaks[:-1], self.breaks[1:]
        self._m0 = np.concatenate([[0.0], np.cumsum(self.values * (hi - lo))])
        self._m1 = np.concatenate(
            [[0.0], np.cumsum(self.values * (hi - lo) * (hi + lo) / 2.0)]
        )
        self._expo: dict[float, FloatArray] = {}

    def _locate(self, x: npt.ArrayLike) -> tuple[FloatArray, npt.NDArray[np.int64]]:
        x = np.clip(np.asarray(x, dtype=float), self.breaks[0], self.breaks[-1])
        k = np.searchsorted(self.breaks, x, side="right") - 1
        k = np.clip(k, 0, len(self.values) - 1)
        return x, k

    def __call__(self, x: npt.ArrayLike) -> FloatArray:
        _, k = self._locate(x)
        return self.values[k]

    def m0(self, x: npt.ArrayLike) -> FloatArray:
        x, k = self._locate(x)
        return self._m0[k] + self.values[k] * (x - self.breaks[k])

    def m1(self, x: npt.ArrayLike) -> FloatArray:
        x, k = self._locate(x)
        b = self.breaks[k]
        return self._m1[k] + self.values[k] * (x - b) * (x + b) / 2.0

    def expo(self, x: npt.ArrayLike, rate: float) -> FloatArray:
        nodes = self._expo.get(rate)
        if nodes is None:
            decay = np.exp(-rate * np.diff(self.breaks))
            gain = self.values * (-np.expm1(-rate * np.diff(self.breaks))) / rate
            nodes = np.empty(len(self.breaks))
            nodes[0] = 0.0
            acc = 0.0
            for i in range(len(decay)):
                acc = acc * decay[i] + gain[i]
                nodes[i + 1] = acc
            self._expo[rate] = nodes
        x, k = self._locate(x)
        dt = x - self.breaks[k]
        return np.exp(-rate * dt) * nodes[k] + self.values[k] * (-np.expm1(-rate * dt)) / rate


@dataclass(frozen=True, eq=False)
class EventDensity:
    """Event density f(t) on [0, T], stored as per-minute masses summing to 1."""

    variant: str
    horizon: int
    params: tuple[float, ...] = ()
    raw_weights: FloatArray | None = None
    cell_mass: FloatArray = field(init=False, repr=False)
    _cdf: FloatArray = field(init=False, repr=False)
    _ext: dict = field(init=False, repr=False)

    def __post_init__(self) -> None:
        T = self.horizon
        if int(T) != T or T <= 0:
            raise ValueError("horizon must be a positive integer number of minutes")
        mid = np.arange(T) + 0.5
        if self.variant == "uniform":
            w = np.ones(T)
        elif self.variant == "sinusoid":
            a1, a2, a3, a4 = self.params
            w = a1 * np.sin(a2 * mid + a3) + a4
            if np.any(w <= 0):
                raise ValueError("sinusoid density must be strictly positive on [0, T]")
        elif self.variant == "empirical":
            if self.raw_weights is None or len(self.raw_weights) != T:
                raise ValueError("empirical density needs one weight per minute")
            w = np.asarray(self.raw_weights, dtype=float)
            if np.any(~np.isfinite(w)) or np.any(w < 0) or w.sum() <= 0:
                raise ValueError("empirical weights must be finite, nonnegative, not all zero")
        else:
            raise ValueError(f"unknown density variant {self.variant!r}")
        mass = w / w.sum()
        object.__setattr__(self, "cell_mass", _readonly(mass))
        cdf = np.concatenate([[0.0], np.cumsum(mass)])
        cdf[-1] = 1.0
        object.__setattr__(self, "_cdf", _readonly(cdf))
        object.__setattr__(self, "_ext", {})

    @classmethod
    def uniform(cls, horizon: int) -> EventDensity:
        return cls("uniform", int(horizon))

    @classmethod
    def sinusoid(cls, horizon: int, a1: float, a2: float, a3: float, a4: float) -> EventDensity:
        return cls("sinusoid", int(horizon), (float(a1), float(a2), float(a3), float(a4)))

    @classmethod
    def empirical(cls, weights: npt.ArrayLike) -> EventDensity:
        w = _readonly(weights)
        return cls("empirical", len(w), (), w)

    @property
    def grid(self) -> MinuteGrid:
        return MinuteGrid(self.horizon)

    def __call__(self, t: npt.ArrayLike) -> FloatArray:
        """Density value (per minute) at time t."""
        j = np.clip(np.floor(np.asarray(t, dtype=float)).astype(np.int64), 0, self.horizon - 1)
        return self.cell_mass[j]

    def cdf(self, x: npt.ArrayLike) -> FloatArray:
        return np.interp(x, np.arange(self.horizon + 1, dtype=float), self._cdf)

    def quantile(self, p: npt.ArrayLike) -> FloatArray:
        """Inverse CDF; exact for the piecewise-constant density."""
        p = np.asarray(p, dtype=float)
        j = np.searchsorted(self._cdf, p, side="right") - 1
        j = np.clip(j, 0, self.horizon - 1)
        m = self.cell_mass[j]
        frac = np.where(m > 0, (p - self._cdf[j]) / np.where(m > 0, m, 1.0), 0.0)
        return j + np.clip(frac, 0.0, 1.0)

    def extended(self, lookback: float) -> StepFunction:
        """Step function of f on [-E, T] with the pre-period filled periodically."""
        E = int(math.ceil(max(lookback, 0.0)))
        step = self._ext.get(E)
        if step is None:
            idx = np.arange(-E, self.horizon) % self.horizon
            step = StepFunction(np.arange(-E, self.horizon + 1, dtype=float), self.cell_mass[idx])
            self._ext[E] = step
        return step

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"variant": self.variant, "horizon": self.horizon}
        if self.variant == "sinusoid":
            out.update(zip(("a1", "a2", "a3", "a4"), self.params))
        elif self.variant == "empirical":
            out["weights"] = [float(x) for x in self.raw_weights]
        return out

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> EventDensity:
        variant = obj.get("variant")
        if variant == "uniform":
            return cls.uniform(obj["horizon"])
        if variant == "sinusoid":
            return cls.sinusoid(obj["horizon"], obj["a1"], obj["a2"], obj["a3"], obj["a4"])
        if variant == "empirical":
            d = cls.empirical(obj["weights"])
            if "horizon" in obj and obj["horizon"] != d.horizon:
                raise ValueError("empirical weights do not match the horizon")
            return d
        raise ValueError(f"unknown density variant {variant!r}")


def density_mass(f: EventDensity, a: float, b: float) -> float:
    """Integral of f over [a, b]."""
    if not (0 <= a <= b <= f.horizon):
        raise ValueError(f"need 0 <= a <= b <= T, got a={a}, b={b}, T={f.horizon}")
    return float(f.cdf(b) - f.cdf(a))


def sample_event_times(f: EventDensity, n: int, seed: Any) -> FloatArray:
    """Draw n sorted event times: a minute by its mass, then a uniform jitter."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    cells = np.searchsorted(f._cdf[1:], rng.random(n), side="right")
    cells = np.minimum(cells, f.horizon - 1)
    times = cells + rng.random(n)
    return np.sort(times)


@dataclass(frozen=True)
class CarryoverKernel:
    """Unnormalized carryover shape r(lag) on lags in [0, support].

    ``uniform``: r = 1 on [0, h].  ``linear``: r = h - lag on [0, h].
    ``geometric``: r = exp(-rate * lag), cut at weight 1e-12.
    """

    variant: str
    h: float = 0.0
    rate: float = 0.0

    def __post_init__(self) -> None:
        if self.variant in ("uniform", "linear"):
            if not self.h > 0:
                raise ValueError("window kernels need h > 0")
        elif self.variant == "geometric":
            if not self.rate > 0:
                raise ValueError("geometric kernel needs rate > 0")
        else:
            raise ValueError(f"unknown kernel variant {self.variant!r}")

    @classmethod
    def uniform_window(cls, h: float) -> CarryoverKernel:
        return cls("uniform", h=float(h))

    @classmethod
    def linear_decay(cls, h: float) -> CarryoverKernel:
        return cls("linear", h=float(h))

    @classmethod
    def geometric(cls, rate: float) -> CarryoverKernel:
        return cls("geometric", rate=float(rate))

    @property
    def support(self) -> float:
        if self.variant == "geometric":
            return -math.log(GEOMETRIC_CUTOFF) / self.rate
        return self.h

    def raw(self, lag: npt.ArrayLike) -> FloatArray:
        lag = np.asarray(lag, dtype=float)
        inside = (lag >= 0) & (lag <= self.support)
        if self.variant == "uniform":
            r = np.ones_like(lag)
        elif self.variant == "linear":
            r = self.h - lag
        else:
            r = np.exp(-self.rate * lag)
        return np.where(inside, r, 0.0)

    def window_integral(
        self, step: StepFunction, t: npt.ArrayLike, lo: npt.ArrayLike, hi: npt.ArrayLike
    ) -> FloatArray:
        """int_{lo}^{hi} r(t - u) phi(u) du, with [lo, hi] clipped to the lookback window."""
        t = np.asarray(t, dtype=float)
        lo = np.maximum(np.asarray(lo, dtype=float), t - self.support)
        hi = np.minimum(np.asarray(hi, dtype=float), t)
        hi = np.maximum(hi, lo)
        if self.variant == "uniform":
            return step.m0(hi) - step.m0(lo)
        if self.variant == "linear":
            return (self.h - t) * (step.m0(hi) - step.m0(lo)) + (step.m1(hi) - step.m1(lo))
        c = self.rate
        inner = step.expo(hi, c) - np.exp(-c * (hi - lo)) * step.expo(lo, c)
        return np.exp(-c * (t - hi)) * inner

    def normalizer(self, f: EventDensity, t: npt.ArrayLike) -> FloatArray:
        """Z(t) = int r(t - u) f(u) du over the whole lookback window."""
        t = np.asarray(t, dtype=float)
        return self.window_integral(f.extended(self.support), t, t - self.support, t)

    def to_json(self) -> dict[str, Any]:
        if self.variant == "geometric":
            return {"variant": "geometric", "rate": self.rate}
        return {"variant": self.variant, "h": self.h}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> CarryoverKernel:
        if obj.get("variant") == "geometric":
            return cls.geometric(obj["rate"])
        return cls(obj.get("variant", ""), h=float(obj.get("h", 0.0)))


def carryover_weight(k: CarryoverKernel, f: EventDensity, t: float, t_prime: float) -> float:
    """Normalized kernel d_t(t'), so that int d_t(t') f(t') dt' = 1 over the window."""
    for x in (t, t_prime):
        if not 0 <= x <= f.horizon:
            raise ValueError("t and t_prime must lie in [0, T]")
    r = float(k.raw(t - t_prime))
    if r == 0.0:
        return 0.0
    z = float(k.normalizer(f, t))
    return r / z if z > 0 else 0.0


@dataclass(frozen=True, eq=False)
class CovarianceKernel:
    """Measurement-error covariance: none, or sigma2 * (h - |dt|)/h inside the window.

    ``scale`` is an optional per-minute profile v(t); the covariance becomes
    sigma2 * sqrt(v(t) v(t')) * (h - |dt|)/h.
    """

    variant: str = "none"
    sigma2: float = 0.0
    h: float = 0.0
    scale: FloatArray | None = None

    def __post_init__(self) -> None:
        if self.variant == "linear":
            if self.h <= 0 or self.sigma2 < 0:
                raise ValueError("linear covariance needs h > 0 and sigma2 >= 0")
        elif self.variant != "none":
            raise ValueError(f"unknown covariance variant {self.variant!r}")
        if self.scale is not None:
            s = _readonly(self.scale)
            if np.any(s < 0) or np.any(~np.isfinite(s)):
                raise ValueError("scale profile must be finite and nonnegative")
            object.__setattr__(self, "scale", s)

    @classmethod
    def none(cls) -> CovarianceKernel:
        return cls("none")

    @classmethod
    def linear_decay(cls, sigma2: float, h: float, scale: npt.ArrayLike | None = None) -> CovarianceKernel:
        return cls("linear", float(sigma2), float(h), None if scale is None else np.asarray(scale, float))

    def scale_at(self, t: npt.ArrayLike) -> FloatArray:
        t = np.asarray(t, dtype=float)
        if self.scale is None:
            return np.ones_like(t)
        j = np.clip(np.floor(t).astype(np.int64), 0, len(self.scale) - 1)
        return self.scale[j]

    def diag(self, t: npt.ArrayLike) -> FloatArray:
        """cov(t, t)."""
        t = np.asarray(t, dtype=float)
        if self.variant == "none":
            return np.zeros_like(t)
        return self.sigma2 * self.scale_at(t)

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"variant": self.variant}
        if self.variant == "linear":
            out.update(sigma2=self.sigma2, h=self.h)
            if self.scale is not None:
                out["scale"] = [float(x) for x in self.scale]
        return out

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> CovarianceKernel:
        if obj.get("variant", "none") == "none":
            return cls.none()
        return cls.linear_decay(obj["sigma2"], obj["h"], obj.get("scale"))


def covariance_eval(c: CovarianceKernel, t_i: npt.ArrayLike, t_j: npt.ArrayLike) -> FloatArray | float:
    """cov(eps_i, eps_j) given the two event times."""
    ti = np.asarray(t_i, dtype=float)
    tj = np.asarray(t_j, dtype=float)
    if c.variant == "none":
        out = np.zeros(np.broadcast(ti, tj).shape)
    else:
        tri = np.maximum(c.h - np.abs(ti - tj), 0.0) / c.h
        # the product is symmetric in its factors, so swapping arguments is exact
        out = c.sigma2 * np.sqrt(c.scale_at(ti) * c.scale_at(tj)) * tri
    return float(out) if out.ndim == 0 else out
