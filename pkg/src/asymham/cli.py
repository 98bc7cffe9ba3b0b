"""Command-line entry point: ``asymham <subcommand> (--config PATH | --example ID) [options]``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import sys as _sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import averaging, classify as cl, hamcore, sim
from . import expr as ex
from .config import ConfigError, RunConfig, example_config, load_config, with_overrides

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_MODEL = 0, 1, 2, 3

MODULE_ERRORS = (hamcore.SystemDefinitionError, hamcore.GeometryError, hamcore.ChartRangeError,
                 averaging.UnsupportedOrderError, averaging.FitQualityError, ex.EvalError, ex.ParseError)


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return "" if v is None else str(v)


def _clean(obj):
    """Make a structure JSON-safe with plain Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


class ArtifactWriter:
    """Single writer for every file a run produces; keeps a manifest of what got written."""

    def __init__(self, root: Path, command: str):
        self.root = Path(root)
        self.command = command
        self.entries: dict[str, str] = {}
        self.lock = threading.Lock()
        self.root.mkdir(parents=True, exist_ok=True)

    def _put(self, name: str, text: str):
        with self.lock:
            path = self.root / name
            path.write_text(text, encoding="utf-8", newline="")
            self.entries[name] = hashlib.sha256(text.encode()).hexdigest()

    def csv(self, name: str, header, rows):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])
        self._put(name, buf.getvalue())

    def json(self, name: str, obj):
        self._put(name, json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")

    def text(self, name: str, text: str):
        self._put(name, text if text.endswith("\n") else text + "\n")

    def manifest(self, complete: bool, error: str | None = None):
        lines = [f"command: {self.command}", f"status: {'complete' if complete else 'partial'}"]
        if error:
            lines.append(f"error: {error}")
        lines += [f"{digest}  {name}" for name, digest in sorted(self.entries.items())]
        (self.root / "MANIFEST").write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Pipeline pieces

def parse_params(text: str | None) -> dict[str, float]:
    out = {}
    if not text:
        return out
    for item in text.split(","):
        if not item.strip():
            continue
        if "=" not in item:
            raise ConfigError(f"bad --param entry {item!r}; expected name=value")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise ConfigError(f"bad value for parameter {k.strip()!r}: {v!r}") from None
    return out


def parse_grid(text: str) -> list[tuple[str, np.ndarray]]:
    """``name=lo:hi:count[,...]`` into evenly spaced axes."""
    axes = []
    for item in text.split(","):
        try:
            name, rng = item.split("=", 1)
            lo, hi, count = rng.split(":")
            vals = np.linspace(float(lo), float(hi), int(count))
        except ValueError:
            raise ConfigError(f"bad --grid entry {item!r}; expected name=lo:hi:count") from None
        if int(count) < 1:
            raise ConfigError(f"grid axis {name!r} needs at least one point")
        axes.append((name.strip(), vals))
    return axes


def _with_params(cfg: RunConfig, params: dict) -> RunConfig:
    """Bind parameters of a config file (examples rebuild from their own defaults)."""
    have = dict(cfg.params)
    for k in params:
        if k not in have:
            raise ConfigError(f"config has no parameter {k!r}", "/system/params")
    have.update(params)
    return replace(cfg, params=tuple(sorted(have.items())))


def make_config(args, params: dict | None = None) -> RunConfig:
    params = dict(parse_params(args.param), **(params or {}))
    if args.config:
        cfg = _with_params(load_config(args.config), params)
    else:
        cfg = example_config(args.example, params)
    return with_overrides(cfg, args.tend, args.tol, args.out)


_chart_cache: dict = {}
_chart_lock = threading.Lock()


def chart_for(cfg: RunConfig, system: hamcore.PerturbedSystem) -> hamcore.ActionAngleChart:
    """Charts depend only on the limiting system, so sweeps share them."""
    used = sorted(ex.free_params(system.h0))
    key = (cfg.h0, cfg.e0, cfg.n_energies, cfg.n_phi, tuple((p, system.env[p]) for p in used))
    with _chart_lock:
        if key not in _chart_cache:
            _chart_cache[key] = hamcore.build_chart(system, cfg.n_energies, cfg.n_phi)
        return _chart_cache[key]


def analyse(cfg: RunConfig):
    system = cfg.system()
    chart = chart_for(cfg, system)
    model = averaging.build_model(system, chart, cfg.order)
    verdict = cl.classify(model)
    return system, chart, model, verdict


def _theorem_reports(system, chart):
    out = []
    for thm in (1, 2, 3):
        try:
            out.append(cl.check_theorem_conditions(system, chart, thm).as_dict())
        except MODULE_ERRORS + (ValueError,) as exc:
            out.append({"theorem": thm, "passed": False, "error": str(exc)})
    return out


# ---------------------------------------------------------------------------
# Subcommands

def cmd_chart(cfg, w, args):
    system = cfg.system()
    chart = chart_for(cfg, system)
    w.csv("chart.csv", ["E", "j", "phi", "X", "Y"], chart.csv_rows())
    w.csv("omega.csv", ["E", "omega"], chart.omega_rows())
    print(f"chart: {chart.n_energies} energies x {chart.n_phi} angles, "
          f"energy error {chart.energy_error(system):.2e}, jacobian defect {chart.jacobian_defect():.2e}")
    return EXIT_OK


def cmd_lambda(cfg, w, args):
    _, _, model, _ = analyse(cfg)
    header, rows = model.lambda_rows()
    w.csv("lambda.csv", header, rows)
    w.json("leading.json", {"leading": [model.leading[k].as_dict() for k in sorted(model.leading)],
                            "fit_errors": {str(k): v for k, v in sorted(model.fit_errors.items())},
                            "truncated_at": model.truncated_at})
    for k in sorted(model.leading):
        f = model.leading[k]
        print(f"Lambda_{k} ~ {f.coeff:.6g} E^{f.power:.6g} (r2={f.r2:.6f})")
    if not model.leading:
        print("all computed Lambda_k vanish")
    return EXIT_OK


def cmd_classify(cfg, w, args):
    system, chart, model, verdict = analyse(cfg)
    w.json("verdict.json", verdict.as_dict())
    w.text("verdict.txt", verdict.to_text())
    w.json("conditions.json", _theorem_reports(system, chart))
    print(verdict.to_text())
    return EXIT_OK


def cmd_cycles(cfg, w, args):
    _, _, model, _ = analyse(cfg)
    cycles = cl.find_cycles(model)
    w.csv("cycles.csv", ["energy", "stability", "derivative", "boundary"], cycles.rows())
    if not len(cycles):
        print("no limit cycles")
    for c in cycles:
        print(f"cycle E={c.energy:.10g} {c.stability} (dLambda/dE={c.derivative:.4g})")
    return EXIT_OK


def cmd_simulate(cfg, w, args):
    system = cfg.system()
    seeds = cfg.default_seeds(system)
    with ThreadPoolExecutor(max_workers=4) as pool:
        trajs = list(pool.map(lambda s: sim.integrate(system, s[0], s[1], 1.0, cfg.t_end, cfg.tol,
                                                      e_stop=10.0 * cfg.e0), seeds))
    summary = []
    for i, tr in enumerate(trajs):
        w.csv(f"trajectory_{i}.csv", ["t", "x", "y", "E"], tr.rows())
        summary.append({"seed": list(seeds[i]), "E_start": tr.E[0], "E_end": tr.E[-1], "t_end": tr.t_end,
                        "blowup": tr.blowup, "escaped": tr.escaped})
        print(f"seed {i}: E {tr.E[0]:.6g} -> {tr.E[-1]:.6g} at t={tr.t_end:.6g} {tr.message}")
    w.json("simulate.json", summary)
    return EXIT_OK


def cmd_verify(cfg, w, args):
    system, chart, model, verdict = analyse(cfg)
    cycles = cl.find_cycles(model) if model.n is not None else None
    report = sim.verify(system, verdict, cfg.default_seeds(system), model=model, cycles=cycles,
                        t_end=cfg.t_end, tol=cfg.tol)
    w.json("verdict.json", verdict.as_dict())
    if cycles is not None:
        w.csv("cycles.csv", ["energy", "stability", "derivative", "boundary"], cycles.rows())
    out = report.as_dict()
    out["cycles"] = [c.energy for c in cycles] if cycles is not None else []
    w.json("verify.json", out)
    text = report.to_text()
    if cycles is not None and len(cycles):
        text += "\n" + "\n".join(f"cycle energy {c.energy:.10g} ({c.stability})" for c in cycles)
    w.text("verify.txt", text)
    print(text)
    return EXIT_OK if report.passed else EXIT_FAIL


def _sweep_cell(args, names, point):
    params = dict(zip(names, map(float, point)))
    try:
        _, _, _, v = analyse(make_config(args, params))
        rate = v.rate
        return list(point) + [v.regime, v.weight_exponent, rate.kind, rate.exponent, v.source, v.note]
    except (ConfigError, *MODULE_ERRORS, ValueError, ArithmeticError) as exc:
        return list(point) + ["Error", None, None, None, None, f"{type(exc).__name__}: {exc}"]


def cmd_sweep(cfg, w, args):
    if not args.grid:
        raise ConfigError("sweep needs --grid name=lo:hi:count[,...]")
    axes = parse_grid(args.grid)
    names = [n for n, _ in axes]
    points = list(itertools.product(*(vals for _, vals in axes)))
    chart_for(cfg, cfg.system())
    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        rows = list(pool.map(lambda p: _sweep_cell(args, names, p), points))
    header = names + ["regime", "weight_exponent", "rate_kind", "rate_exponent", "source", "note"]
    w.csv("sweep.csv", header, rows)
    counts: dict[str, int] = {}
    for r in rows:
        counts[r[len(names)]] = counts.get(r[len(names)], 0) + 1
    print(f"{len(rows)} grid points: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return EXIT_OK


COMMANDS = {"chart": cmd_chart, "lambda": cmd_lambda, "classify": cmd_classify, "cycles": cmd_cycles,
            "simulate": cmd_simulate, "verify": cmd_verify, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asymham", description="Stability analysis of asymptotically "
                                "Hamiltonian planar systems with power-law decaying perturbations.")
    p.add_argument("command", choices=sorted(COMMANDS))
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", metavar="PATH", help="JSON run configuration")
    src.add_argument("--example", metavar="ID", help="built-in example (wkb-linear, ex1..ex4 or full id)")
    p.add_argument("--param", metavar="K=V[,K=V]", help="parameter overrides")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--tend", type=float, metavar="T", help="simulation end time")
    p.add_argument("--tol", type=float, metavar="X", help="integrator tolerance")
    p.add_argument("--grid", metavar="SPEC", help="sweep grid, name=lo:hi:count[,...]")
    p.add_argument("--workers", type=int, default=4, help="sweep worker threads")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = make_config(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_USAGE
    command = " ".join([args.command] + (["--config", args.config] if args.config else
                                         ["--example", args.example]))
    w = ArtifactWriter(Path(cfg.output), command)
    try:
        status = COMMANDS[args.command](cfg, w, args)
    except ConfigError as exc:
        w.manifest(False, str(exc))
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_USAGE
    except MODULE_ERRORS as exc:
        w.manifest(False, f"{type(exc).__name__}: {exc}")
        print(f"error: {type(exc).__name__}: {exc}", file=_sys.stderr)
        return EXIT_MODEL
    w.manifest(True)
    return status


if __name__ == "__main__":
    raise SystemExit(main())
