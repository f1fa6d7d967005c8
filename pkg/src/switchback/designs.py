"""Switchback designs: interval partitions and treatment assignments."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
import numpy.typing as npt

from .model import EventDensity, FloatArray

FAMILIES = ("fixed", "poisson", "change_of_measure")
FAMILY_ORDER = {"fixed": 0, "poisson": 1, "change_of_measure": 2}


@dataclass(frozen=True, eq=False)
class IntervalPartition:
    """Endpoints 0 = e_0 <= e_1 <= ... <= e_M = T.

    Interval m (0-based) is [e_m, e_{m+1}); the last one also holds T.
    """

    endpoints: FloatArray
    horizon: float

    def __post_init__(self) -> None:
        e = np.array(self.endpoints, dtype=float)
        if e.ndim != 1 or len(e) < 2:
            raise ValueError("a partition needs at least two endpoints")
        if np.any(np.diff(e) < 0):
            raise ValueError("endpoints must be nondecreasing")
        if e[0] != 0:
            raise ValueError("the first endpoint must be 0")
        if e[-1] != self.horizon:
            raise ValueError("the last endpoint must equal the horizon")
        e.setflags(write=False)
        object.__setattr__(self, "endpoints", e)

    @property
    def M(self) -> int:
        return len(self.endpoints) - 1

    @property
    def lengths(self) -> FloatArray:
        return np.diff(self.endpoints)

    def interval_index(self, t: npt.ArrayLike) -> npt.NDArray[np.int64]:
        """Index of the interval holding t (right-open, last interval closed)."""
        k = np.searchsorted(self.endpoints, t, side="right") - 1
        return np.clip(k, 0, self.M - 1)

    def left_index(self, t: npt.ArrayLike) -> npt.NDArray[np.int64]:
        """Index of the interval (e_m, e_{m+1}] holding t; -1 for t <= 0."""
        k = np.searchsorted(self.endpoints, t, side="left") - 1
        return np.minimum(k, self.M - 1)

    def is_mirrored(self, period: float) -> bool:
        # positional: zero-length intervals may repeat the endpoint at the period
        e = self.endpoints
        if not math.isclose(2 * period, self.horizon) or self.M % 2:
            return False
        n = self.M // 2
        if not math.isclose(e[n], period):
            return False
        return bool(np.allclose(e[n:] - period, e[: n + 1], rtol=0, atol=1e-9))

    def to_json(self) -> dict[str, Any]:
        return {"endpoints": [float(x) for x in self.endpoints], "horizon": float(self.horizon)}


@dataclass(frozen=True, eq=False)
class AssignmentPlan:
    """Partition plus one treatment bit per interval.

    ``law`` records how the bits were drawn ("iid" or "balanced"); burn-in
    weights need it.  For balanced plans ``n_first`` is the number of
    intervals in the first half.
    """

    partition: IntervalPartition
    bits: npt.NDArray[np.int8]
    pi: float = 0.5
    law: str = "iid"
    n_first: int = 0

    def __post_init__(self) -> None:
        b = np.array(self.bits, dtype=np.int8)
        if b.shape != (self.partition.M,):
            raise ValueError("need one bit per interval")
        if np.any((b != 0) & (b != 1)):
            raise ValueError("bits must be 0 or 1")
        if not 0 < self.pi < 1:
            raise ValueError("pi must lie in (0, 1)")
        if self.law not in ("iid", "balanced"):
            raise ValueError("law must be 'iid' or 'balanced'")
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def horizon(self) -> float:
        return self.partition.horizon

    def treatment_at(self, t: npt.ArrayLike) -> npt.NDArray[np.int8] | int:
        ta = np.asarray(t, dtype=float)
        if np.any(ta < 0) or np.any(ta > self.horizon):
            raise ValueError("t must lie in [0, T]")
        w = self.bits[self.partition.interval_index(ta)]
        return int(w) if w.ndim == 0 else w

    def treated_before(self, t: npt.ArrayLike) -> npt.NDArray[np.int8]:
        """Left limit of the treatment path; 0 at and before the start."""
        k = self.partition.left_index(t)
        return np.where(k >= 0, self.bits[np.maximum(k, 0)], 0).astype(np.int8)

    def switch_times(self) -> tuple[FloatArray, npt.NDArray[np.int8]]:
        """Times where the treatment path changes and the signed change (+1/-1)."""
        nonempty = self.partition.lengths > 0
        full = np.concatenate([[0], self.bits[nonempty].astype(np.int8)])
        delta = np.diff(full)
        starts = self.partition.endpoints[:-1][nonempty]
        keep = delta != 0
        return starts[keep], delta[keep].astype(np.int8)

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "endpoints": [float(x) for x in self.partition.endpoints],
            "bits": [int(x) for x in self.bits],
            "pi": float(self.pi),
        }
        if self.law != "iid":
            out["law"] = self.law
            out["n_first"] = int(self.n_first)
        return out

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> AssignmentPlan:
        e = np.asarray(obj["endpoints"], dtype=float)
        part = IntervalPartition(e, float(e[-1]))
        return cls(part, np.asarray(obj["bits"]), float(obj.get("pi", 0.5)),
                   obj.get("law", "iid"), int(obj.get("n_first", 0)))


@dataclass(frozen=True)
class DesignSpec:
    """A design family with its average interval length.

    For change-of-measure designs ``avg_length`` sets the per-interval mass
    avg_length / T.
    """

    family: str
    avg_length: float
    offset: float = 0.0
    balanced: bool = False
    balance_period: float | None = None

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")
        if not self.avg_length > 0:
            raise ValueError("avg_length must be positive")
        if self.offset < 0:
            raise ValueError("offset must be nonnegative")
        if self.family == "fixed" and not self.offset < self.avg_length:
            raise ValueError("fixed designs need 0 <= offset < avg_length")

    @property
    def label(self) -> str:
        name = {"fixed": "FD", "poisson": "Poisson", "change_of_measure": "CM"}[self.family]
        tag = f"{name}-{self.avg_length:g}"
        if self.offset:
            tag += f"+{self.offset:g}"
        return ("bal-" + tag) if self.balanced else tag

    def key(self) -> int:
        """Stable 63-bit identity used to derive per-design seeds."""
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") >> 1

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> DesignSpec:
        return cls(obj["family"], float(obj["avg_length"]), float(obj.get("offset", 0.0)),
                   bool(obj.get("balanced", False)),
                   None if obj.get("balance_period") is None else float(obj["balance_period"]))


def _close_at(points: FloatArray, stop: float) -> FloatArray:
    """Drop points at or numerically at ``stop`` and append ``stop``."""
    points = points[points < stop - 1e-9 * max(1.0, stop)]
    return np.concatenate([points, [stop]])


def _fixed_endpoints(stop: float, p: float, q: float) -> FloatArray:
    count = int(math.floor((stop - q) / p + 1e-9)) + 1
    pts = q + p * np.arange(count)
    lead = [0.0] if q > 0 else []
    return _close_at(np.concatenate([lead, pts]), stop)


def build_fixed(T: float, p: float, q: float = 0.0) -> IntervalPartition:
    """Intervals of length p starting at q, with a leading [0, q] when q > 0."""
    if not p > 0:
        raise ValueError("p must be positive")
    if p > T:
        raise ValueError("p must not exceed T")
    if not 0 <= q < p:
        raise ValueError("need 0 <= q < p")
    return IntervalPartition(_fixed_endpoints(float(T), float(p), float(q)), float(T))


def _poisson_endpoints(stop: float, lam: float, q: float, rng: np.random.Generator) -> FloatArray:
    count = max(1, int(round(stop / lam)))
    ends = q + np.cumsum(rng.poisson(lam, size=count).astype(float))
    ends = np.minimum(ends, stop)
    ends[-1] = stop
    lead = [0.0, q] if q > 0 else [0.0]
    # clipping at the stop can leave zero-length intervals; they are kept
    return np.concatenate([lead, ends])


def build_poisson(T: float, lam: float, q: float = 0.0, seed: Any = None) -> IntervalPartition:
    """round(T / lam) Poisson(lam) lengths after the offset q.

    Endpoints past T are set to T, which keeps zero-length tail intervals; the
    last endpoint is T.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if not 0 <= q < T:
        raise ValueError("need 0 <= q < T")
    rng = np.random.default_rng(seed)
    return IntervalPartition(_poisson_endpoints(float(T), float(lam), float(q), rng), float(T))


def _com_endpoints(f: EventDensity, stop: float, mass: float, q: float) -> FloatArray:
    start = float(f.cdf(q))
    end = float(f.cdf(stop))
    targets = start + mass * np.arange(1, int(math.floor((end - start) / mass + 1e-9)) + 1)
    pts = f.quantile(targets)
    lead = [0.0, q] if q > 0 else [0.0]
    return _close_at(np.concatenate([lead, pts]), stop)


def build_change_of_measure(T: float, M: int, q: float, f: EventDensity) -> IntervalPartition:
    """Intervals after the offset each carry density mass 1/M."""
    if int(M) != M or M < 1:
        raise ValueError("M must be a positive integer")
    if T != f.horizon:
        raise ValueError("density horizon differs from T")
    if not 0 <= q <= T or float(f.cdf(q)) >= 1.0 / M:
        raise ValueError("the offset must carry less than 1/M of the density mass")
    return IntervalPartition(_com_endpoints(f, float(T), 1.0 / M, float(q)), float(T))


def assign_iid(partition: IntervalPartition, pi: float = 0.5, seed: Any = None) -> AssignmentPlan:
    if not 0 < pi < 1:
        raise ValueError("pi must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    bits = (rng.random(partition.M) < pi).astype(np.int8)
    return AssignmentPlan(partition, bits, pi, "iid")


def assign_balanced(partition: IntervalPartition, balance_period: float, seed: Any = None) -> AssignmentPlan:
    """First-half bits are fair coins; the second half takes their complements."""
    if not partition.is_mirrored(balance_period):
        raise ValueError("partition is not mirrored around the balance period")
    n_first = partition.M // 2
    rng = np.random.default_rng(seed)
    first = (rng.random(n_first) < 0.5).astype(np.int8)
    bits = np.concatenate([first, 1 - first])
    return AssignmentPlan(partition, bits, 0.5, "balanced", n_first)


def mirror(endpoints_first: FloatArray, period: float) -> IntervalPartition:
    e = np.concatenate([endpoints_first, endpoints_first[1:] + period])
    return IntervalPartition(e, 2.0 * period)


@dataclass
class DesignSampler:
    """Draws plans from a DesignSpec; deterministic partitions are built once."""

    spec: DesignSpec
    horizon: float
    density: EventDensity | None = None
    _cached: IntervalPartition | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.spec.family == "change_of_measure":
            if self.density is None:
                raise ValueError("change-of-measure designs need the event density")
            if self.density.horizon != self.horizon:
                raise ValueError("density horizon differs from the design horizon")
        if self.spec.balanced:
            if not math.isclose(2 * self.period, self.horizon):
                raise ValueError("balanced designs need T equal to twice the balance period")

    @property
    def period(self) -> float:
        bp = self.spec.balance_period
        return self.horizon / 2.0 if bp is None else float(bp)

    @property
    def random_partition(self) -> bool:
        return self.spec.family == "poisson"

    def partition(self, rng: np.random.Generator | None = None) -> IntervalPartition:
        if not self.random_partition and self._cached is not None:
            return self._cached
        spec = self.spec
        stop = self.period if spec.balanced else float(self.horizon)
        if spec.family == "fixed":
            e = _fixed_endpoints(stop, min(spec.avg_length, stop), spec.offset)
        elif spec.family == "poisson":
            e = _poisson_endpoints(stop, spec.avg_length, spec.offset, rng)
        else:
            mass = spec.avg_length / self.horizon
            if float(self.density.cdf(spec.offset)) >= mass:
                raise ValueError("the offset must carry less than one interval of mass")
            e = _com_endpoints(self.density, stop, mass, spec.offset)
        part = mirror(e, stop) if spec.balanced else IntervalPartition(e, float(self.horizon))
        if not self.random_partition:
            self._cached = part
        return part

    def draw(self, seed: Any = None) -> AssignmentPlan:
        rng = np.random.default_rng(seed)
        part = self.partition(rng)
        if self.spec.balanced:
            return assign_balanced(part, self.period, rng)
        return assign_iid(part, 0.5, rng)


def draw_design(spec: DesignSpec, horizon: float, density: EventDensity | None = None,
                seed: Any = None) -> AssignmentPlan:
    """One plan from a design spec."""
    return DesignSampler(spec, float(horizon), density).draw(seed)
