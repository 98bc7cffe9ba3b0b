"""Run configuration: JSON schema, loading, and the built-in example corpus."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import jsonschema

from .hamcore import PerturbedSystem, SystemDefinitionError, locate_start
from . import expr as ex

MAX_ORDER = 12

_TERM = {
    "type": "object",
    "required": ["k", "expr"],
    "additionalProperties": False,
    "properties": {"k": {"type": "integer", "minimum": 1}, "expr": {"type": "string", "minLength": 1}},
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "system"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": 1},
        "system": {
            "type": "object",
            "required": ["H0", "q", "E0"],
            "additionalProperties": False,
            "properties": {
                "H0": {"type": "string", "minLength": 1},
                "q": {"type": "integer", "minimum": 1},
                "E0": {"type": "number", "exclusiveMinimum": 0},
                "H": {"type": "array", "items": _TERM},
                "F": {"type": "array", "items": _TERM},
                "params": {"type": "object", "additionalProperties": {"type": "number"}},
            },
        },
        "chart": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "nE": {"type": "integer", "minimum": 8},
                "nPhi": {"type": "integer", "minimum": 64, "multipleOf": 2},
            },
        },
        "averaging": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"N": {"type": "integer", "minimum": 1, "maximum": MAX_ORDER}},
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seeds": {"type": "array", "items": {"type": "array", "items": {"type": "number"},
                                                     "minItems": 2, "maxItems": 2}},
                "t_end": {"type": "number", "exclusiveMinimum": 1},
                "tol": {"type": "number", "exclusiveMinimum": 0, "maximum": 1e-3},
            },
        },
        "output": {"type": "string"},
    },
}


class ConfigError(ValueError):
    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer}: {message}" if pointer else message)
        self.pointer = pointer


@dataclass(frozen=True)
class RunConfig:
    h0: str
    q: int
    e0: float
    h_terms: tuple[tuple[int, str], ...] = ()
    f_terms: tuple[tuple[int, str], ...] = ()
    params: tuple[tuple[str, float], ...] = ()
    n_energies: int = 48
    n_phi: int = 256
    order: int | None = None
    seeds: tuple[tuple[float, float], ...] = ()
    t_end: float = 1e4
    tol: float = 1e-10
    output: str = "asymham-out"
    name: str = "config"

    def system(self) -> PerturbedSystem:
        try:
            return PerturbedSystem(self.h0, self.q, dict(self.h_terms), dict(self.f_terms),
                                   self.e0, dict(self.params))
        except ex.ParseError as exc:
            raise ConfigError(str(exc)) from None
        except SystemDefinitionError as exc:
            raise ConfigError(str(exc), "/system") from None

    def default_seeds(self, sys: PerturbedSystem) -> list[tuple[float, float]]:
        if self.seeds:
            return [tuple(s) for s in self.seeds]
        return [locate_start(sys, self.e0 * r) for r in (1e-3, 1e-2, 1e-1)]

    def to_json(self) -> dict:
        out = {
            "version": 1,
            "system": {
                "H0": self.h0, "q": self.q, "E0": self.e0,
                "H": [{"k": k, "expr": e} for k, e in self.h_terms],
                "F": [{"k": k, "expr": e} for k, e in self.f_terms],
                "params": dict(self.params),
            },
            "chart": {"nE": self.n_energies, "nPhi": self.n_phi},
            "simulation": {"seeds": [list(s) for s in self.seeds], "t_end": self.t_end, "tol": self.tol},
            "output": self.output,
        }
        if self.order is not None:
            out["averaging"] = {"N": self.order}
        return out


def _pointer(err: jsonschema.ValidationError) -> str:
    return "/" + "/".join(str(p) for p in err.absolute_path)


def parse_config(data: dict, name: str = "config") -> RunConfig:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ConfigError(err.message, _pointer(err))
    sysd = data["system"]
    terms = {}
    for kind in ("H", "F"):
        seen = set()
        lst = []
        for i, t in enumerate(sysd.get(kind, [])):
            if t["k"] in seen:
                raise ConfigError(f"duplicate index k={t['k']}", f"/system/{kind}/{i}/k")
            seen.add(t["k"])
            try:
                ex.parse(t["expr"])
            except ex.ParseError as exc:
                raise ConfigError(str(exc), f"/system/{kind}/{i}/expr") from None
            lst.append((t["k"], t["expr"]))
        terms[kind] = tuple(lst)
    chart = data.get("chart", {})
    sim = data.get("simulation", {})
    cfg = RunConfig(
        h0=sysd["H0"], q=sysd["q"], e0=float(sysd["E0"]),
        h_terms=terms["H"], f_terms=terms["F"],
        params=tuple(sorted((k, float(v)) for k, v in sysd.get("params", {}).items())),
        n_energies=chart.get("nE", 48), n_phi=chart.get("nPhi", 256),
        order=data.get("averaging", {}).get("N"),
        seeds=tuple(tuple(map(float, s)) for s in sim.get("seeds", [])),
        t_end=float(sim.get("t_end", 1e4)), tol=float(sim.get("tol", 1e-10)),
        output=data.get("output", "asymham-out"), name=name,
    )
    cfg.system()  # structural checks
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return parse_config(data, p.stem)


# ---------------------------------------------------------------------------
# Built-in examples

PENDULUM = "1-cos(x)+y^2/2"
HARMONIC = "(x^2+y^2)/2"


def _wkb(p):
    kappa = Fraction(p["kappa"]).limit_denominator(64)
    if kappa <= 0:
        raise ConfigError("kappa must be positive", "/params/kappa")
    return dict(h0=HARMONIC, q=kappa.denominator, e0=2.0, f_terms=((kappa.numerator, "gamma*y"),),
                params=(("gamma", p["gamma"]),), seeds=((0.5, 0.0), (0.1, 0.0), (1.0, 0.0)))


def _ex1(p):
    f = ((p["l"], "kap*y*sin(x)"), (p["n"], "lam*y"))
    return dict(h0=PENDULUM, q=p["q"], e0=1.5, f_terms=f, params=(("kap", p["kap"]), ("lam", p["lam"])),
                seeds=((0.5, 0.0), (0.1, 0.0), (0.02, 0.0)))


def _ex2(p):
    f = ((p["m"], "alpha*x^2*y"), (p["n"], "lam*y"))
    return dict(h0=PENDULUM, q=p["q"], e0=1.5, f_terms=f, params=(("alpha", p["alpha"]), ("lam", p["lam"])),
                seeds=((0.5, 0.0), (0.1, 0.0), (1.0, 0.0)))


def _ex3(p):
    f = ((p["m"], "delta*x^4*y"), (p["n"], "alpha*x^2*y"))
    return dict(h0=PENDULUM, q=p["q"], e0=1.5, f_terms=f, params=(("alpha", p["alpha"]), ("delta", p["delta"])),
                seeds=((0.5, 0.0), (0.1414, 0.0), (1.0, 0.0)))


def _ex4(p):
    f = ((p["n"], "y*(lam + kap*x - mu*(x^2+y^2)/2)"),)
    seeds = tuple((-math.sqrt(2 * E), 0.0) for E in (0.2, 0.9, 1.8))
    return dict(h0=HARMONIC, q=p["q"], e0=2.5, f_terms=f,
                params=(("kap", p["kap"]), ("lam", p["lam"]), ("mu", p["mu"])), seeds=seeds)


# builder, default parameters, parameters that must be integers
EXAMPLES = {
    "wkb-linear": (_wkb, {"gamma": -0.5, "kappa": 1.0}, ()),
    "ex1-pendulum-linear": (_ex1, {"q": 4, "l": 1, "n": 2, "kap": 1.0, "lam": -1.0}, ("q", "l", "n")),
    "ex2-pendulum-x2y": (_ex2, {"q": 2, "m": 1, "n": 2, "alpha": -2.0, "lam": 0.4}, ("q", "m", "n")),
    "ex3-pendulum-x4y-x2y": (_ex3, {"q": 2, "m": 1, "n": 2, "delta": -0.3, "alpha": -0.3}, ("q", "m", "n")),
    "ex4-harmonic-cycle": (_ex4, {"q": 1, "n": 1, "lam": 0.5, "mu": 0.5, "kap": 0.0}, ("q", "n")),
}

ALIASES = {"wkb": "wkb-linear", "ex1": "ex1-pendulum-linear", "ex2": "ex2-pendulum-x2y",
           "ex3": "ex3-pendulum-x4y-x2y", "ex4": "ex4-harmonic-cycle"}


def resolve_example(name: str) -> str:
    key = ALIASES.get(name, name)
    if key not in EXAMPLES:
        raise ConfigError(f"unknown example {name!r}; choose from {', '.join(sorted(EXAMPLES))}")
    return key


def example_config(name: str, params: dict | None = None) -> RunConfig:
    """Expand a built-in example, overriding its default parameters."""
    key = resolve_example(name)
    build, defaults, integers = EXAMPLES[key]
    p = dict(defaults)
    for k, v in (params or {}).items():
        if k not in p:
            raise ConfigError(f"example {key} has no parameter {k!r} (has {', '.join(sorted(p))})")
        p[k] = v
    for k in integers:
        if float(p[k]) != int(p[k]) or int(p[k]) < 1:
            raise ConfigError(f"{k} must be a positive integer, got {p[k]!r}", f"/params/{k}")
        p[k] = int(p[k])
    parts = build(p)
    orders = [k for k, _ in parts["f_terms"]]
    if len(set(orders)) != len(orders):
        raise ConfigError(f"perturbation orders collide: {orders}")
    cfg = RunConfig(name=key, output=f"asymham-out/{key}", **parts)
    cfg.system()
    return cfg


def with_overrides(cfg: RunConfig, t_end=None, tol=None, output=None) -> RunConfig:
    changes = {}
    if t_end is not None:
        changes["t_end"] = float(t_end)
    if tol is not None:
        changes["tol"] = float(tol)
    if output is not None:
        changes["output"] = output
    return replace(cfg, **changes)
