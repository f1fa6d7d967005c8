"""Cumulative-effect curves: estimation, constrained spline smoothing, CV, ensembles."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import numpy.typing as npt
from scipy.linalg import null_space

from .designs import AssignmentPlan
from .model import FloatArray, seed_sequence
from .outcomes import EventStream

KNOT = 0.5


class CecError(ValueError):
    """A curve cannot be estimated or fitted; ``details`` carries diagnostics."""

    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message)
        self.details = details


@dataclass(frozen=True, eq=False)
class CecCurve:
    """Cumulative effect at durations 1..H minutes; the value at 0 is 0."""

    values: FloatArray
    variance: FloatArray | None = None

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float)
        if v.ndim != 1 or len(v) == 0 or not np.all(np.isfinite(v)):
            raise ValueError("CEC values must be a nonempty finite vector")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.variance is not None:
            var = np.array(self.variance, dtype=float)
            if var.shape != v.shape:
                raise ValueError("variance must match the values")
            var.setflags(write=False)
            object.__setattr__(self, "variance", var)

    @property
    def H(self) -> int:
        return len(self.values)

    @property
    def gate(self) -> float:
        return float(self.values[-1])

    def at(self, dt: npt.ArrayLike) -> FloatArray:
        """Value at integer durations; 0 at dt <= 0, the last value beyond H."""
        dt = np.asarray(dt)
        g = np.concatenate([[0.0], self.values])
        return g[np.clip(dt, 0, self.H)]

    def to_csv(self, path: str | Path) -> None:
        cols = ["dt_min", "delta_cum"] + (["variance"] if self.variance is not None else [])
        lines = [",".join(cols)]
        for j in range(self.H):
            row = [str(j + 1), repr(float(self.values[j]))]
            if self.variance is not None:
                row.append(repr(float(self.variance[j])))
            lines.append(",".join(row))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> CecCurve:
        rows = [r for r in Path(path).read_text().splitlines() if r.strip()]
        header = [h.strip() for h in rows[0].split(",")]
        if header[:2] != ["dt_min", "delta_cum"] or len(header) > 3 or (
                len(header) == 3 and header[2] != "variance"):
            raise ValueError(f"{path}: expected header dt_min,delta_cum[,variance]")
        data = np.array([[float(x) for x in r.split(",")] for r in rows[1:]]).reshape(-1, len(header))
        if not np.array_equal(data[:, 0], np.arange(1, len(data) + 1)):
            raise ValueError(f"{path}: dt_min must run 1..H")
        return cls(data[:, 1], data[:, 2] if len(header) == 3 else None)


def _cell_sums(stream: EventStream, plan: AssignmentPlan, H: int) -> tuple[FloatArray, FloatArray]:
    """Per-interval, per-offset outcome sums and event counts for offsets 1..H."""
    part = plan.partition
    t, y = stream.times, stream.outcomes
    m = part.interval_index(t)
    j = np.floor(t - part.endpoints[m]).astype(np.int64)
    keep = (j >= 0) & (j < H)
    m, j, y = m[keep], j[keep], y[keep]
    shape = (part.M, H)
    s = np.zeros(shape)
    c = np.zeros(shape)
    np.add.at(s, (m, j), y)
    np.add.at(c, (m, j), 1.0)
    return s, c


def _arm_difference(s: FloatArray, c: FloatArray, bits: npt.NDArray[np.int8],
                    ) -> tuple[FloatArray, FloatArray, list[int]]:
    """Treated-minus-control ratio means with interval-clustered variances.

    Cell means differ between intervals (the carryover state at a switch
    depends on the preceding intervals), so the variance is taken across
    intervals rather than across events.
    """
    diff = np.zeros(s.shape[1])
    var = np.zeros(s.shape[1])
    missing: set[int] = set()
    for sign, arm in ((1.0, 1), (-1.0, 0)):
        sa, ca = s[bits == arm], c[bits == arm]
        total = ca.sum(axis=0)
        missing |= set((np.flatnonzero(total == 0) + 1).tolist())
        mean = sa.sum(axis=0) / np.maximum(total, 1.0)
        k = len(sa)
        resid = ((sa - mean * ca) ** 2).sum(axis=0) / np.maximum(total, 1.0) ** 2
        diff += sign * mean
        var += resid * (k / (k - 1) if k > 1 else 1.0)
    return diff, var, sorted(int(x) for x in missing)


def estimate_cec(stream: EventStream, plan: AssignmentPlan, H: int) -> CecCurve:
    """Treated-minus-control mean outcome at each minute since the interval start."""
    if H < 1:
        raise ValueError("H must be positive")
    s, c = _cell_sums(stream, plan, H)
    diff, var, missing = _arm_difference(s, c, plan.bits)
    if missing:
        raise CecError("offsets with an empty arm", missing=missing)
    return CecCurve(diff, var)


def _constraint_matrix(k: float = KNOT) -> FloatArray:
    """Rows: g'(1) = 0, value and slope continuity at k, g''(0) = 0; columns a0..a3, b0..b3."""
    return np.array([
        [0, 0, 0, 0, 0, 1, 2, 3],
        [1, k, k * k, k ** 3, -1, -k, -k * k, -k ** 3],
        [0, 1, 2 * k, 3 * k * k, 0, -1, -2 * k, -3 * k * k],
        [0, 0, 2, 0, 0, 0, 0, 0],
    ], dtype=float)


_NULL = null_space(_constraint_matrix())


def spline_design(x: npt.ArrayLike, k: float = KNOT) -> FloatArray:
    """Rows [1, x, x^2, x^3] placed in the a- or b-block by side of the knot."""
    x = np.asarray(x, dtype=float)
    powers = x[:, None] ** np.arange(4)[None, :]
    left = (x < k)[:, None]
    return np.hstack([np.where(left, powers, 0.0), np.where(left, 0.0, powers)])


@dataclass(frozen=True, eq=False)
class SplineFit:
    """Two-piece cubic on the rescaled duration x = dt / H with a knot at 1/2."""

    a: FloatArray
    b: FloatArray
    H: int
    knot: float = KNOT

    @property
    def coefficients(self) -> FloatArray:
        return np.concatenate([self.a, self.b])

    def evaluate(self, x: npt.ArrayLike) -> FloatArray | float:
        xa = np.asarray(x, dtype=float)
        out = spline_design(np.atleast_1d(xa), self.knot) @ self.coefficients
        return float(out[0]) if xa.ndim == 0 else out

    def values(self) -> FloatArray:
        return self.evaluate(np.arange(1, self.H + 1) / self.H)

    def curve(self) -> CecCurve:
        return CecCurve(self.values())

    @property
    def gate(self) -> float:
        return self.evaluate(1.0)

    def constraint_residuals(self) -> FloatArray:
        return _constraint_matrix(self.knot) @ self.coefficients

    def to_json(self) -> dict[str, Any]:
        return {"a": self.a.tolist(), "b": self.b.tolist(), "H": self.H, "knot": self.knot,
                "gate": self.gate}


def fit_natural_cubic(curve: CecCurve) -> SplineFit:
    """Least squares over two-piece cubics satisfying the four shape constraints.

    The constraints are eliminated through a basis of their null space, which
    leaves an unconstrained four-parameter problem.
    """
    H = curve.H
    if H < 8:
        raise CecError("need at least 8 points", H=H)
    x = np.arange(1, H + 1) / H
    reduced = spline_design(x) @ _NULL
    if np.linalg.matrix_rank(reduced) < _NULL.shape[1]:
        raise CecError("rank-deficient spline system", H=H)
    beta, *_ = np.linalg.lstsq(reduced, curve.values, rcond=None)
    theta = _NULL @ beta
    return SplineFit(theta[:4].copy(), theta[4:].copy(), H)


@dataclass(frozen=True)
class Smoother:
    """``natural-cubic``, ``polynomial`` of a degree, or tricube ``local`` regression."""

    kind: str = "natural-cubic"
    degree: int = 0
    span: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in ("natural-cubic", "polynomial", "local"):
            raise ValueError(f"unknown smoother {self.kind!r}")
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        if not 0 < self.span <= 1:
            raise ValueError("span must lie in (0, 1]")

    @classmethod
    def parse(cls, text: str | Smoother) -> Smoother:
        if isinstance(text, Smoother):
            return text
        text = text.strip()
        if text == "natural-cubic":
            return cls()
        hit = re.fullmatch(r"(polynomial|local)\((\d+)\)", text)
        if not hit:
            raise ValueError(f"cannot parse smoother {text!r}")
        return cls(hit.group(1), int(hit.group(2)))

    @property
    def label(self) -> str:
        return self.kind if self.kind == "natural-cubic" else f"{self.kind}({self.degree})"

    def fit_at_end(self, values: FloatArray) -> float:
        """Smoothed value at the last duration H."""
        H = len(values)
        x = np.arange(1, H + 1) / H
        if self.kind == "natural-cubic":
            return fit_natural_cubic(CecCurve(values)).gate
        if self.kind == "polynomial":
            coef = np.polynomial.polynomial.polyfit(x, values, self.degree)
            return float(np.polynomial.polynomial.polyval(1.0, coef))
        k = max(self.degree + 1, int(np.ceil(self.span * H)))
        dist = 1.0 - x
        radius = np.sort(dist)[k - 1] * 1.000001 + 1e-12
        w = np.clip(1 - (dist / radius) ** 3, 0, None) ** 3
        sw = np.sqrt(w)
        X = (x - 1.0)[:, None] ** np.arange(self.degree + 1)[None, :]
        beta, *_ = np.linalg.lstsq(X * sw[:, None], values * sw, rcond=None)
        return float(beta[0])


@dataclass(frozen=True, eq=False)
class CvResult:
    cv_mse: float
    folds: int
    errors: FloatArray = field(repr=False)
    skipped: int = 0

    def to_json(self) -> dict[str, Any]:
        return {"cv_mse": self.cv_mse, "folds": self.folds, "skipped": self.skipped}


def leave_two_out_cv(stream: EventStream, plan: AssignmentPlan, smoother: str | Smoother, H: int) -> CvResult:
    """Hold out each mirrored pair of intervals in turn.

    The training curve is smoothed and its value at H compared with the
    holdout pair's raw difference at H.  Pairs with no events at offset H in
    one arm are skipped and counted.
    """
    sm = Smoother.parse(smoother)
    part = plan.partition
    half = part.horizon / 2.0
    if plan.law != "balanced" or not part.is_mirrored(half):
        raise ValueError("leave-two-out CV needs a balanced mirrored plan")
    n1 = plan.n_first
    s, c = _cell_sums(stream, plan, H)
    bits = plan.bits
    sums = np.stack([s[bits == a].sum(axis=0) for a in (1, 0)])
    counts = np.stack([c[bits == a].sum(axis=0) for a in (1, 0)])
    errors = []
    skipped = 0
    for i in range(n1):
        pair = (i, i + n1)
        hs, hc = np.zeros_like(sums), np.zeros_like(counts)
        for m in pair:
            arm = 0 if bits[m] == 1 else 1
            hs[arm] += s[m]
            hc[arm] += c[m]
        train_c = counts - hc
        if np.any(train_c == 0):
            raise CecError("training set has an empty cell", fold=i)
        train = (sums[0] - hs[0]) / train_c[0] - (sums[1] - hs[1]) / train_c[1]
        if hc[0, -1] == 0 or hc[1, -1] == 0:
            skipped += 1
            continue
        hold = hs[0, -1] / hc[0, -1] - hs[1, -1] / hc[1, -1]
        errors.append(hold - sm.fit_at_end(train))
    if not errors:
        raise CecError("no holdout pair has events at the last offset", pairs=n1)
    err = np.array(errors)
    return CvResult(float(np.mean(err ** 2)), len(err), err, skipped)


@dataclass(frozen=True, eq=False)
class CecEnsemble:
    curves: list[CecCurve]
    labels: list[str] = field(default_factory=list)
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.labels:
            object.__setattr__(self, "labels", [f"curve-{i}" for i in range(len(self.curves))])
        if len(self.labels) != len(self.curves):
            raise ValueError("one label per curve")

    def __len__(self) -> int:
        return len(self.curves)

    @classmethod
    def from_fits(cls, fits: Sequence[SplineFit], labels: Sequence[str] = ()) -> CecEnsemble:
        return cls([f.curve() for f in fits], list(labels), {"source": "spline fits"})

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (curve, label) in enumerate(zip(self.curves, self.labels)):
            name = f"cec_{i:04d}.csv"
            curve.to_csv(d / name)
            entries.append({"file": name, "label": label})
        manifest = {"curves": entries, "provenance": self.provenance}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory: str | Path) -> CecEnsemble:
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        curves = [CecCurve.from_csv(d / e["file"]) for e in manifest["curves"]]
        return cls(curves, [e["label"] for e in manifest["curves"]], manifest.get("provenance", {}))


def sample_cec(ensemble: CecEnsemble, seed: Any = None) -> CecCurve:
    """Uniform draw from the ensemble."""
    if len(ensemble) == 0:
        raise ValueError("cannot sample from an empty ensemble")
    rng = np.random.default_rng(seed)
    return ensemble.curves[int(rng.integers(len(ensemble)))]


@dataclass(frozen=True)
class CecGenerator:
    """Random constraint-satisfying curves.

    Each curve is the spline through 0 at x = 0, random values at x = 1/2
    and x = 1, and a random initial slope; the value at 1 is centred on
    ``gate_mean``.  Curves
    are redrawn until they land in the requested sign-change and monotonicity
    classes.
    """

    sign_change_fraction: float = 0.68
    nonmonotone_fraction: float = 0.8
    gate_mean: float = 0.0
    gate_sd: float = 1.0
    scale: float = 1.0
    flat: bool = False
    max_tries: int = 10_000

    def to_json(self) -> dict[str, Any]:
        return dict(self.__dict__)


def is_sign_changing(values: FloatArray, tol: float = 0.0) -> bool:
    return bool(values.min() < -tol and values.max() > tol)


def is_nonmonotone(values: FloatArray, tol: float = 0.0) -> bool:
    d = np.diff(values)
    return bool(d.min() < -tol and d.max() > tol)


def _spline_through(g0: float, gk: float, g1: float, slope0: float, H: int) -> SplineFit:
    rows = np.vstack([
        _constraint_matrix(),
        spline_design(np.array([0.0, KNOT, 1.0])),
        [0, 1, 0, 0, 0, 0, 0, 0],
    ])
    rhs = np.array([0, 0, 0, 0, g0, gk, g1, slope0], dtype=float)
    theta = np.linalg.solve(rows, rhs)
    return SplineFit(theta[:4], theta[4:], H)


def synth_cec_ensemble(spec: CecGenerator, count: int, H: int, seed: Any = None) -> CecEnsemble:
    """Synthetic ensemble standing in for a library of historical curves."""
    if count < 1:
        raise ValueError("count must be at least 1")
    if H < 8:
        raise ValueError("H must be at least 8")
    # curves start at 0, so a sign change forces non-monotonicity
    if not spec.flat and spec.nonmonotone_fraction < spec.sign_change_fraction:
        raise ValueError("nonmonotone_fraction must be at least sign_change_fraction")
    extra_nonmono = 0.0
    if spec.sign_change_fraction < 1:
        extra_nonmono = ((spec.nonmonotone_fraction - spec.sign_change_fraction)
                         / (1.0 - spec.sign_change_fraction))
    rng = np.random.default_rng(seed_sequence(seed))
    curves, labels = [], []
    for i in range(count):
        gate = spec.gate_mean + spec.gate_sd * rng.standard_normal()
        if spec.flat:
            curves.append(CecCurve(np.full(H, gate)))
            labels.append(f"synth-{i}:flat")
            continue
        want_sign = bool(rng.random() < spec.sign_change_fraction)
        want_nonmono = want_sign or bool(rng.random() < extra_nonmono)
        for _ in range(spec.max_tries):
            gk = spec.scale * rng.standard_normal()
            slope0 = 2.0 * spec.scale * rng.standard_normal()
            values = _spline_through(0.0, gk, gate, slope0, H).values()
            if (is_sign_changing(values) == want_sign and is_nonmonotone(values) == want_nonmono):
                break
            gate = spec.gate_mean + spec.gate_sd * rng.standard_normal()
        else:
            raise CecError("generator could not reach the requested curve class",
                           sign_change=want_sign, nonmonotone=want_nonmono)
        curves.append(CecCurve(values))
        labels.append(f"synth-{i}:sign_change={int(want_sign)}:nonmonotone={int(want_nonmono)}")
    realized = {
        "sign_change": float(np.mean([is_sign_changing(c.values) for c in curves])),
        "nonmonotone": float(np.mean([is_nonmonotone(c.values) for c in curves])),
    }
    return CecEnsemble(curves, labels, {"generator": spec.to_json(), "count": count, "H": H,
                                        "seed": None if seed is None else str(seed),
                                        "realized": realized})
