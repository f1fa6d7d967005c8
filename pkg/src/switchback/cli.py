"""Command-line interface.

Every subcommand reads one JSON run configuration (``--config``) and writes
machine-readable CSV/JSON into ``--out``.  Exit codes: 0 success, 2
configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import jsonschema
import numpy as np

from .cec import CecCurve, CecEnsemble, CecError, CecGenerator, Smoother, fit_natural_cubic, synth_cec_ensemble
from .decomposition import (
    SWEEP_COLUMNS,
    MonteCarloConfig,
    SimulSpec,
    UnsupportedModelError,
    interval_stats,
    mse_closed_form,
    mse_monte_carlo,
    sweep_fixed,
)
from .designs import AssignmentPlan, DesignSampler, DesignSpec
from .ebdesign import (
    EcosystemSpec,
    SyntheticConfig,
    default_candidates,
    rank_designs,
    write_error_matrix,
    write_ranking,
)
from .estimators import EstimationError, ht_burnin_estimate, ht_estimate, randomization_ci, randomization_pvalue
from .model import CarryoverKernel, CovarianceKernel, EventDensity
from .outcomes import CecEffect, ControlProfile, EffectModel, EventStream, KernelEffect, NoiseModel, simulate_stream

SCHEMA_VERSION = 1

_NUM_OR_LIST = {"oneOf": [{"type": "number"}, {"type": "array", "items": {"type": "number"}}]}
_DESIGN = {
    "type": "object",
    "required": ["family", "avg_length"],
    "properties": {
        "family": {"enum": ["fixed", "poisson", "change_of_measure"]},
        "avg_length": {"type": "number", "exclusiveMinimum": 0},
        "offset": {"type": "number", "minimum": 0},
        "balanced": {"type": "boolean"},
        "balance_period": {"type": ["number", "null"]},
    },
    "additionalProperties": False,
}
_EFFECT = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["kernel", "cec"]},
        "delta_inst": _NUM_OR_LIST,
        "delta_co": _NUM_OR_LIST,
        "kernel": {
            "type": "object",
            "required": ["variant"],
            "properties": {"variant": {"enum": ["uniform", "linear", "geometric"]},
                           "h": {"type": "number"}, "rate": {"type": "number"}},
        },
        "values": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "csv": {"type": "string"},
    },
}

RUN_CONFIG_SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "model"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "model": {
            "type": "object",
            "required": ["horizon"],
            "properties": {
                "horizon": {"type": "integer", "minimum": 1},
                "density": {"type": "object", "properties": {"variant": {"enum": ["uniform", "sinusoid", "empirical"]}}},
                "ctrl": {"type": "object"},
                "noise": {
                    "type": "object",
                    "properties": {"variance": _NUM_OR_LIST, "covariance": {"type": "object"}},
                },
            },
        },
        "designs": {
            "type": "object",
            "properties": {
                "primary": _DESIGN,
                "simultaneous": {
                    "type": "array",
                    "items": {"type": "object", "required": ["effect"],
                              "properties": {"design": _DESIGN, "coupled": {"type": "boolean"}, "effect": _EFFECT}},
                },
            },
        },
        "outcomes": {
            "type": "object",
            "properties": {
                "primary_effect": _EFFECT,
                "compound": {"type": "object", "additionalProperties": {"type": "number"}},
                "n": {"type": "integer", "minimum": 1},
                "mode": {"enum": ["continuous", "binary"]},
            },
        },
        "estimator": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["ht", "burnin"]},
                "burnin_h": {"type": "number", "minimum": 0},
                "J": {"type": "integer", "minimum": 100},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
                "stream": {"type": "string"},
                "plan": {"type": "string"},
            },
        },
        "decomposition": {
            "type": "object",
            "properties": {
                "Ms": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "n": {"type": "integer", "minimum": 1},
                "R": {"type": "integer", "minimum": 1},
            },
        },
        "cec": {"type": "object", "properties": {"H": {"type": "integer", "minimum": 8},
                                                 "method": {"type": "string"}}},
        "eb": {
            "type": "object",
            "properties": {
                "candidates": {"oneOf": [{"const": "default"}, {"type": "array", "items": _DESIGN, "minItems": 1}]},
                "lengths": {"type": "array", "items": {"type": "number"}},
                "R": {"type": "integer", "minimum": 1},
                "simul_mode": {"enum": ["none", "one-concurrent"]},
                "estimator": {"enum": ["ht", "burnin"]},
                "burnin_h": {"type": "number", "minimum": 0},
                "ecosystem": {"type": "object"},
                "ensemble": {"type": "object"},
                "base_streams": {"type": "array", "items": {"type": "string"}},
            },
        },
    },
}


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    def __init__(self, message: str, details: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.details = details or {}


class RunConfig:
    """Validated configuration plus the directory that relative paths resolve against."""

    def __init__(self, data: dict[str, Any], base: Path, seed: int | None = None) -> None:
        try:
            jsonschema.validate(data, RUN_CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"config: {exc.message} at /{'/'.join(map(str, exc.path))}") from exc
        self.data = data
        self.base = base
        self.seed = int(seed if seed is not None else data.get("seed", 0))

    @classmethod
    def load(cls, path: str | Path, seed: int | None = None) -> RunConfig:
        p = Path(path)
        try:
            data = json.loads(p.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        return cls(data, p.parent, seed)

    def section(self, name: str) -> dict[str, Any]:
        return dict(self.data.get(name, {}))

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base / p

    @property
    def horizon(self) -> int:
        return int(self.data["model"]["horizon"])

    def density(self) -> EventDensity:
        obj = dict(self.section("model").get("density", {"variant": "uniform"}))
        obj.setdefault("horizon", self.horizon)
        return EventDensity.from_json(obj)

    def ctrl(self) -> ControlProfile:
        obj = self.section("model").get("ctrl", {"constant": 0.0})
        T = self.horizon
        if "constant" in obj:
            return ControlProfile.constant(T, obj["constant"])
        if "periodic" in obj:
            p = obj["periodic"]
            return ControlProfile.periodic(T, p["base"], p["amplitude"], p["period"], p.get("phase", 0.0))
        if "values" in obj:
            return ControlProfile(np.asarray(obj["values"], dtype=float))
        raise ConfigError("model.ctrl needs 'constant', 'periodic' or 'values'")

    def noise(self) -> NoiseModel:
        obj = self.section("model").get("noise", {})
        cov = CovarianceKernel.from_json(obj.get("covariance", {"variant": "none"}))
        var = obj.get("variance", 0.0)
        return NoiseModel(cov, np.asarray(var, dtype=float) if isinstance(var, list) else float(var))

    def effect(self, obj: dict[str, Any]) -> EffectModel:
        if obj["kind"] == "cec":
            if "csv" in obj:
                return CecEffect(CecCurve.from_csv(self.path(obj["csv"])))
            return CecEffect(CecCurve(obj["values"]))
        kernel = CarryoverKernel.from_json(obj.get("kernel", {"variant": "uniform", "h": 1.0}))

        def arr(v: Any) -> Any:
            return np.asarray(v, dtype=float) if isinstance(v, list) else float(v)

        return KernelEffect(arr(obj.get("delta_inst", 0.0)), arr(obj.get("delta_co", 0.0)), kernel)

    def primary_effect(self) -> EffectModel:
        obj = self.section("outcomes").get("primary_effect")
        if obj is None:
            raise ConfigError("outcomes.primary_effect is required")
        return self.effect(obj)

    def primary_design(self) -> DesignSpec:
        obj = self.section("designs").get("primary")
        if obj is None:
            raise ConfigError("designs.primary is required")
        return DesignSpec.from_json(obj)

    def simuls(self) -> list[SimulSpec]:
        out = []
        for item in self.section("designs").get("simultaneous", []):
            design = DesignSpec.from_json(item["design"]) if "design" in item else None
            out.append(SimulSpec(self.effect(item["effect"]), design, bool(item.get("coupled", False))))
        return out

    def compound(self) -> dict[int, float]:
        return {int(k): float(v) for k, v in self.section("outcomes").get("compound", {}).items()}


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _child(seed: int, tag: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, tag])


def cmd_gen_data(cfg: RunConfig, out: Path, threads: int) -> dict[str, Any]:
    """Historical stream: control outcomes, noise and any simultaneous interventions."""
    f = cfg.density()
    T = cfg.horizon
    ss = _child(cfg.seed, 0)
    s_plans, s_stream = ss.spawn(2)
    simuls = []
    for spec, s in zip(cfg.simuls(), s_plans.spawn(max(len(cfg.simuls()), 1))):
        if spec.coupled:
            raise ConfigError("gen-data has no primary plan to couple to")
        simuls.append((spec.effect, DesignSampler(spec.design, float(T), f).draw(s)))
    oc = cfg.section("outcomes")
    stream = simulate_stream(f, cfg.ctrl(), cfg.noise(), None, simuls, None, int(oc.get("n", 1000)),
                             oc.get("mode", "continuous"), s_stream)
    stream.to_csv(out / "stream.csv")
    return {"stream": str(out / "stream.csv"), "n": stream.n}


def cmd_design(cfg: RunConfig, out: Path, threads: int) -> dict[str, Any]:
    spec = cfg.primary_design()
    plan = DesignSampler(spec, float(cfg.horizon), cfg.density()).draw(_child(cfg.seed, 1))
    _write_json(out / "plan.json", plan.to_json())
    return {"plan": str(out / "plan.json"), "M": plan.partition.M, "label": spec.label}


def _draw_plans(cfg: RunConfig) -> tuple[AssignmentPlan, list[AssignmentPlan]]:
    T = float(cfg.horizon)
    f = cfg.density()
    plan = DesignSampler(cfg.primary_design(), T, f).draw(_child(cfg.seed, 1))
    simul_plans = []
    for i, spec in enumerate(cfg.simuls()):
        simul_plans.append(plan if spec.coupled
                           else DesignSampler(spec.design, T, f).draw(_child(cfg.seed, 100 + i)))
    return plan, simul_plans


def cmd_simulate(cfg: RunConfig, out: Path, threads: int) -> dict[str, Any]:
    """Stream under a drawn primary plan with the configured effects."""
    f = cfg.density()
    plan, simul_plans = _draw_plans(cfg)
    oc = cfg.section("outcomes")
    simuls = [(s.effect, p) for s, p in zip(cfg.simuls(), simul_plans)]
    stream = simulate_stream(f, cfg.ctrl(), cfg.noise(), (cfg.primary_effect(), plan), simuls,
                             cfg.compound(), int(oc.get("n", 1000)), oc.get("mode", "continuous"),
                             _child(cfg.seed, 2))
    stream.to_csv(out / "stream.csv")
    _write_json(out / "plan.json", plan.to_json())
    report = {"stream": str(out / "stream.csv"), "plan": str(out / "plan.json"), "n": stream.n}
    if "warning" in stream.metadata:
        report["warning"] = stream.metadata["warning"]
    return report


def cmd_estimate(cfg: RunConfig, out: Path, threads: int, stream_path: str | None = None,
                 plan_path: str | None = None) -> dict[str, Any]:
    est = cfg.section("estimator")
    sp = stream_path or est.get("stream")
    pp = plan_path or est.get("plan")
    if not sp or not pp:
        raise ConfigError("estimate needs a stream and a plan (estimator.stream/plan or --stream/--plan)")
    stream = EventStream.from_csv(cfg.path(sp) if stream_path is None else Path(sp))
    plan = AssignmentPlan.from_json(json.loads((cfg.path(pp) if plan_path is None else Path(pp)).read_text()))
    if stream.horizon is None:
        stream = EventStream(stream.times, stream.outcomes, {**stream.metadata, "horizon": plan.horizon})
    h = float(est.get("burnin_h", 0.0))
    g = ht_burnin_estimate(stream, plan, h) if est.get("kind", "ht") == "burnin" else ht_estimate(stream, plan)
    report: dict[str, Any] = {"estimate": g.to_json()}
    if "primary" in cfg.section("designs"):
        spec = cfg.primary_design()
        J = int(est.get("J", 1000))
        f = cfg.density()
        rr = randomization_pvalue(stream, spec, g, J, _child(cfg.seed, 3), f)
        report["randomization"] = rr.to_json()
        if g.burnin_h == 0:
            lo, hi = randomization_ci(stream, spec, J, float(est.get("alpha", 0.05)), _child(cfg.seed, 4),
                                      plan=plan, density=f)
            report["randomization"]["ci"] = [lo, hi]
    _write_json(out / "estimate.json", report)
    return report


def _closed_form_inputs(cfg: RunConfig) -> tuple[KernelEffect, list[tuple[KernelEffect, Any]]]:
    primary = cfg.primary_effect()
    if not isinstance(primary, KernelEffect):
        raise UnsupportedModelError("closed forms need kernel effects; run 'mc' instead")
    if cfg.compound():
        raise UnsupportedModelError("compound effects are not additive; run 'mc' instead")
    simuls = []
    for i, s in enumerate(cfg.simuls()):
        if s.coupled or not isinstance(s.effect, KernelEffect):
            raise UnsupportedModelError("closed forms need independent kernel-effect simultaneous designs; run 'mc'")
        sampler = DesignSampler(s.design, float(cfg.horizon), cfg.density())
        if sampler.random_partition:
            raise UnsupportedModelError("closed forms need deterministic simultaneous partitions; run 'mc'")
        simuls.append((s.effect, sampler.partition()))
    return primary, simuls


def cmd_decompose(cfg: RunConfig, out: Path, threads: int) -> dict[str, Any]:
    primary, simuls = _closed_form_inputs(cfg)
    dec = cfg.section("decomposition")
    Ms = dec.get("Ms", list(range(4, 97, 4)))
    n = int(dec.get("n", cfg.section("outcomes").get("n", 1000)))
    rows = sweep_fixed(cfg.horizon, Ms, cfg.density(), cfg.ctrl(), cfg.noise(), primary, n, simuls)
    with open(out / "components.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    best = min(rows, key=lambda r: r["total"])
    report: dict[str, Any] = {"components": str(out / "components.csv"), "argmin_M": best["M"],
                              "min_total": best["total"]}
    if "primary" in cfg.section("designs"):
        sampler = DesignSampler(cfg.primary_design(), float(cfg.horizon), cfg.density())
        if not sampler.random_partition:
            st = interval_stats(sampler.partition(), cfg.density(), cfg.ctrl(), cfg.noise(), primary, simuls)
            report["primary_design"] = mse_closed_form(st, n).to_json()
    _write_json(out / "decompose.json", report)
    return report


def cmd_mc(cfg: RunConfig, out: Path, threads: int) -> dict[str, Any]:
    dec = cfg.section("decomposition")
    est = cfg.section("estimator")
    oc = cfg.section("outcomes")
    mc = MonteCarloConfig(
        cfg.density(), cfg.ctrl(), cfg.noise(), cfg.primary_effect(), cfg.primary_design(),
        cfg.simuls(), cfg.compound(), est.get("kind", "ht"), float(est.get("burnin_h", 0.0)),
        int(dec.get("n", oc.get("n", 1000))), int(dec.get("R", 100)), oc.get("mode", "continuous"),
    )
    res = mse_monte_carlo(mc, _child(cfg.seed, 5), threads)
    report = res.to_json()
    _write_json(out / "mc.json", report)
    return report


def cmd_fit_cec(cfg: RunConfig | None, out: Path, threads: int, in_csv: str | None = None,
                method: str | None = None) -> dict[str, Any]:
    sec = cfg.section("cec") if cfg else {}
    src = in_csv or sec.get("csv")
    if not src:
        raise ConfigError("fit-cec needs --in or cec.csv")
    path = Path(src) if in_csv or cfg is None else cfg.path(src)
    curve = CecCurve.from_csv(path)
    sm = Smoother.parse(method or sec.get("method", "natural-cubic"))
    report: dict[str, Any] = {"method": sm.label, "H": curve.H}
    if sm.kind == "natural-cubic":
        fit = fit_natural_cubic(curve)
        report.update(fit.to_json())
        report["constraint_residuals"] = fit.constraint_residuals().tolist()
        report["max_abs_residual"] = float(np.max(np.abs(fit.constraint_residuals())))
        fit.curve().to_csv(out / "fitted.csv")
    else:
        report["gate"] = sm.fit_at_end(curve.values)
    _write_json(out / "fit.json", report)
    return report


def cmd_select(cfg: RunConfig, out: Path, threads: int) -> dict[str, Any]:
    eb = cfg.section("eb")
    eco = EcosystemSpec(**eb.get("ecosystem", {}))
    ens_cfg = eb.get("ensemble", {"synth": {}})
    if "dir" in ens_cfg:
        ensemble = CecEnsemble.load(cfg.path(ens_cfg["dir"]))
    else:
        syn = dict(ens_cfg.get("synth", {}))
        count = int(syn.pop("count", 50))
        H = int(syn.pop("H", 56))
        ensemble = synth_cec_ensemble(CecGenerator(**syn), count, H, _child(cfg.seed, 6))
    cands = eb.get("candidates", "default")
    if cands == "default":
        candidates = default_candidates(eb.get("lengths", [28.0, 56.0, 112.0]))
    else:
        candidates = [DesignSpec.from_json(c) for c in cands]
    base = [EventStream.from_csv(cfg.path(f)) for f in eb.get("base_streams", [])]
    sc = SyntheticConfig(candidates, ensemble, eco, base, eb.get("simul_mode", "none"),
                         eb.get("estimator", "ht"), float(eb.get("burnin_h", 0.0)), int(eb.get("R", 100)),
                         cfg.seed)
    scores, selected = rank_designs(sc, threads)
    write_ranking(scores, selected, out / "ranking.json")
    write_error_matrix(scores, out / "errors.csv")
    return {"selected": selected.label, "ranking": str(out / "ranking.json"), "errors": str(out / "errors.csv")}


COMMANDS: dict[str, Callable[..., dict[str, Any]]] = {
    "gen-data": cmd_gen_data,
    "design": cmd_design,
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "decompose": cmd_decompose,
    "mc": cmd_mc,
    "fit-cec": cmd_fit_cec,
    "select": cmd_select,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="switchback", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=1)
        if name == "estimate":
            p.add_argument("--stream", help="event stream CSV")
            p.add_argument("--plan", help="assignment plan JSON")
        if name == "fit-cec":
            p.add_argument("--in", dest="in_csv", help="CEC CSV")
            p.add_argument("--method", help="natural-cubic, polynomial(d) or local(d)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg = RunConfig.load(args.config, args.seed) if args.config else None
        if cfg is None and args.command != "fit-cec":
            raise ConfigError(f"{args.command} needs --config")
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
        kwargs: dict[str, Any] = {}
        if args.command == "estimate":
            kwargs = {"stream_path": args.stream, "plan_path": args.plan}
        elif args.command == "fit-cec":
            kwargs = {"in_csv": args.in_csv, "method": args.method}
        report = COMMANDS[args.command](cfg, out, args.threads, **kwargs)
    except (ConfigError, UnsupportedModelError, KeyError, TypeError, ValueError, OSError) as exc:
        if isinstance(exc, (EstimationError, CecError)):
            return _fail(exc)
        # unreadable inputs named by the config count as config errors
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    except (EstimationError, CecError, NumericalFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
        return _fail(exc)
    print(json.dumps(report, indent=2, sort_keys=True, default=str))
    return 0


def _fail(exc: Exception) -> int:
    payload = {"error": "numerical", "message": str(exc), "details": getattr(exc, "details", {})}
    print(json.dumps(payload, default=str), file=sys.stderr)
    return 3
