"""Direct integration of the full non-autonomous system and rate estimation.

The right-hand side is ``x' = dH/dy``, ``y' = -dH/dx + F`` with the
perturbation series truncated at the orders present in the system. Energies
along a trajectory are always measured with the limiting ``H0``.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from . import expr as ex
from .classify import CycleSet, RatePrediction, StabilityVerdict
from .hamcore import PerturbedSystem, locate_start

BLOWUP = 1e6
MAX_SAMPLES = 100_000
DEFAULT_SAMPLES = 20_000
E_FLOOR = 1e-18


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    E: np.ndarray
    meta: dict = field(default_factory=dict)
    blowup: bool = False
    escaped: bool = False
    message: str = ""

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    def rows(self):
        return zip(self.t, self.x, self.y, self.E)


@dataclass
class RateFit:
    kind: str
    exponent: float | None
    r2: float
    window: tuple[float, float]
    mean: float | None = None
    drift: float | None = None

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "exponent": self.exponent, "r2": self.r2,
                           "window": list(self.window)}, sort_keys=True)


def make_rhs(sys: PerturbedSystem):
    """Right-hand side ``f(t, [x, y])`` generated as a single Python function."""
    d = sys.h0_derivs
    env = sys.env

    def src(e):
        return f"({ex.to_python(e, env)})"

    dx = [f"+ {src(d['y'])}"]
    dy = [f"- {src(d['x'])}"]
    lines = ["def rhs(t, s):", "    x = s[0]", "    y = s[1]"]
    for k in sys.orders:
        hk, fk = sys.h(k), sys.f(k)
        if hk is None and fk is None:
            continue
        lines.append(f"    c{k} = t ** {-k / sys.q!r}")
        if hk is not None:
            dx.append(f"+ c{k} * {src(ex.differentiate(hk, 'y'))}")
            dy.append(f"- c{k} * {src(ex.differentiate(hk, 'x'))}")
        if fk is not None:
            dy.append(f"+ c{k} * {src(fk)}")
    lines.append(f"    return [{' '.join(dx)}, {' '.join(dy)}]")
    ns = ex.namespace("math")
    exec("\n".join(lines), ns)  # noqa: S102 - source generated from validated ASTs
    return ns["rhs"]


def _blowup_event(t, s):
    return BLOWUP - max(abs(s[0]), abs(s[1]))


_blowup_event.terminal = True


def propagate(sys: PerturbedSystem, x0: float, y0: float, t0: float, t1: float,
              tol: float = 1e-10) -> tuple[float, float]:
    """State at ``t1`` (forward or backward in time)."""
    sol = solve_ivp(make_rhs(sys), (t0, t1), [x0, y0], method="DOP853", rtol=tol, atol=tol * 1e-2)
    if sol.status < 0:
        raise RuntimeError(sol.message)
    return float(sol.y[0, -1]), float(sol.y[1, -1])


def integrate(sys: PerturbedSystem, x0: float, y0: float, t_start: float = 1.0,
              t_end: float = 1e4, tol: float = 1e-10, n_samples: int = DEFAULT_SAMPLES,
              e_stop: float | None = None) -> Trajectory:
    """Adaptive DOP853 run sampled on a log-spaced time grid.

    Escaping ``|x|`` or ``|y|`` beyond 1e6 stops the run and sets ``blowup``.
    With ``e_stop`` the run also stops once ``H0`` exceeds that level and sets
    ``escaped``; past the analysed energy range the dynamics (for instance
    rotation beyond a separatrix) can get stiff without telling anything new.
    The partial trajectory is returned either way.
    """
    if not t_start > 0:
        raise ValueError("t_start must be positive")
    if not t_end > t_start:
        raise ValueError("t_end must exceed t_start")
    n_samples = int(min(max(n_samples, 16), MAX_SAMPLES))
    t_eval = np.geomspace(t_start, t_end, n_samples)
    t_eval[0], t_eval[-1] = t_start, t_end
    events = [_blowup_event]
    if e_stop is not None:
        h0 = sys.compiled(sys.h0, "math")

        def leave(t, s):
            return e_stop - h0(s[0], s[1])
        leave.terminal = True
        events.append(leave)
    sol = solve_ivp(make_rhs(sys), (t_start, t_end), [x0, y0], method="DOP853",
                    t_eval=t_eval, rtol=tol, atol=tol * 1e-2, events=events)
    t, x, y = sol.t, sol.y[0], sol.y[1]
    hit = [i for i, te in enumerate(sol.t_events) if te.size] if sol.status == 1 else []
    blowup, escaped = 0 in hit, 1 in hit
    for i in hit[:1]:
        t = np.append(t, sol.t_events[i][0])
        x = np.append(x, sol.y_events[i][0][0])
        y = np.append(y, sol.y_events[i][0][1])
    with np.errstate(over="ignore", invalid="ignore"):
        E = np.asarray(sys.H0(x, y), dtype=float) * np.ones_like(x)
    meta = {"x0": x0, "y0": y0, "t_start": t_start, "t_end": t_end, "tol": tol}
    msg = "blow-up" if blowup else "escape" if escaped else ("" if sol.status == 0 else sol.message)
    return Trajectory(t, x, y, E, meta, blowup, escaped, msg)


def seed_at_energy(sys: PerturbedSystem, E: float) -> tuple[float, float]:
    """Point ``(x, 0)``, ``x < 0``, on the level ``H0 = E``."""
    return locate_start(sys, E)


# ---------------------------------------------------------------------------
# Rate estimation

def _linfit(u, v):
    slope, icpt = np.polyfit(u, v, 1)
    resid = v - (slope * u + icpt)
    sst = np.sum((v - v.mean()) ** 2)
    r2 = float(max(0.0, 1.0 - np.sum(resid ** 2) / sst)) if sst > 0 else 1.0
    return float(slope), float(icpt), r2


def _window(traj: Trajectory, window):
    if window is None:
        hi = traj.t_end
        window = (max(traj.t[0], hi / 10.0), hi)
    sel = (traj.t >= window[0]) & (traj.t <= window[1])
    return window, sel


def fit_rate(traj: Trajectory, hypothesis: RatePrediction | str, n_over_q: float | None = None,
             window=None, e_floor: float = E_FLOOR) -> RateFit:
    """Fit the asymptotic law named by ``hypothesis`` over the last decade in t.

    StretchedExponential needs ``n_over_q``; its window is moved back so that
    it ends where ``E`` is still above ``e_floor``.
    """
    kind = hypothesis if isinstance(hypothesis, str) else hypothesis.kind
    if kind == "StretchedExponential":
        if n_over_q is None:
            if isinstance(hypothesis, RatePrediction) and hypothesis.exponent is not None:
                n_over_q = 1.0 - hypothesis.exponent
            else:
                raise ValueError("StretchedExponential fit needs n/q")
        beta = 1.0 - n_over_q
        if window is None:
            ok = np.nonzero(traj.E > e_floor)[0]
            hi = float(traj.t[ok[-1]]) if ok.size else float(traj.t[1])
            window = (max(traj.t[0], hi / 10.0), hi)
        window, sel = _window(traj, window)
        sel &= traj.E > e_floor
        t, E = traj.t[sel], traj.E[sel]
        if t.size < 3:
            return RateFit(kind, None, 0.0, window)
        slope, _, r2 = _linfit(t ** beta, np.log(E))
        return RateFit(kind, slope, r2, window)
    window, sel = _window(traj, window)
    t, E = traj.t[sel], traj.E[sel]
    if kind == "ConvergesToCycle":
        if t.size < 2:
            return RateFit(kind, None, 0.0, window)
        half = t.size // 2
        mean = float(np.mean(E[half:]))
        drift = float(np.mean(E[half:]) - np.mean(E[:half]))
        return RateFit(kind, None, 1.0, window, mean, drift)
    sel2 = E > e_floor
    t, E = t[sel2], E[sel2]
    if t.size < 3:
        return RateFit(kind, None, 0.0, window)
    slope, _, r2 = _linfit(np.log(t), np.log(E))
    return RateFit(kind, slope, r2, window)


def envelope_exponent(traj: Trajectory, window=None, component: str = "x", bins: int = 40) -> RateFit:
    """Power-law exponent of the envelope of ``|x|`` (or ``|y|``).

    The window is split into log-spaced bins; the bin maxima are fitted
    against the bin centres on log-log axes.
    """
    window, sel = _window(traj, window)
    t = traj.t[sel]
    v = np.abs(traj.x if component == "x" else traj.y)[sel]
    edges = np.geomspace(window[0], window[1], bins + 1)
    tc, vm = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        m = (t >= a) & (t < b)
        if m.sum() >= 4:
            tc.append(math.sqrt(a * b))
            vm.append(v[m].max())
    if len(tc) < 3:
        return RateFit("PowerLaw", None, 0.0, window)
    slope, _, r2 = _linfit(np.log(tc), np.log(vm))
    return RateFit("PowerLaw", slope, r2, window)


def weighted_instability_check(traj: Trajectory, nu: float, eps: float = 1e-3,
                               min_span: float = 100.0) -> tuple[bool | None, float | None]:
    """Whether ``E t^nu`` rises above ``eps`` and stays there.

    Returns ``(None, None)`` when the run covers less than ``min_span`` in
    ``t_end/t_start``. Only meaningful when the verdict is WeightedUnstable:
    any run with non-decaying ``E`` passes trivially.
    """
    if traj.t_end / traj.t[0] < min_span and not (traj.blowup or traj.escaped):
        return None, None
    w = traj.E * traj.t ** nu
    above = w >= eps
    if not above[-1]:
        return False, None
    below = np.nonzero(~above)[0]
    i = below[-1] + 1 if below.size else 0
    return True, float(traj.t[i])


# ---------------------------------------------------------------------------
# Predict-then-simulate

@dataclass
class SeedResult:
    seed: tuple[float, float]
    e_start: float
    expectation: str
    measured: float | None
    predicted: float | None
    tolerance: float | None
    passed: bool
    detail: str = ""


@dataclass
class VerifyReport:
    verdict: StabilityVerdict
    results: list[SeedResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def as_dict(self):
        return {"regime": self.verdict.regime, "passed": self.passed,
                "seeds": [{"seed": list(r.seed), "E_start": r.e_start, "expectation": r.expectation,
                           "measured": r.measured, "predicted": r.predicted, "tolerance": r.tolerance,
                           "result": "PASS" if r.passed else "FAIL", "detail": r.detail}
                          for r in self.results]}

    def to_text(self) -> str:
        lines = [f"verdict: {self.verdict.regime}"]
        for r in self.results:
            meas = "-" if r.measured is None else f"{r.measured:.6g}"
            pred = "-" if r.predicted is None else f"{r.predicted:.6g}"
            tol = "-" if r.tolerance is None else f"{r.tolerance:g}"
            lines.append(f"{'PASS' if r.passed else 'FAIL'} seed=({r.seed[0]:.6g},{r.seed[1]:.6g}) "
                         f"E1={r.e_start:.4g} {r.expectation}: measured={meas} predicted={pred} tol={tol} {r.detail}")
        return "\n".join(lines)


def _flow_prediction(energies, lam, q, n, e1, t_start, t_end):
    """Integrate the averaged equation ``v' = t^(-n/q) Lambda_n(v)`` from ``e1``.

    Returns ``(v_end, escaped)``; leaving the sampled range upwards counts as
    escape.
    """
    spl = CubicSpline(energies, lam)
    lo, hi = energies[0], energies[-1]

    def g(t, v):
        vv = min(max(v[0], lo), hi)
        return [t ** (-n / q) * float(spl(vv)) * (v[0] / vv if v[0] < lo else 1.0)]

    def leave(t, v):
        return hi * 1.001 - v[0]
    leave.terminal = True
    sol = solve_ivp(g, (t_start, t_end), [e1], method="LSODA", rtol=1e-10, atol=1e-14, events=leave)
    return float(sol.y[0, -1]), sol.status == 1


def _check(regime, rate, traj, e1, weight, tol_rate):
    Ee = float(traj.E[-1])
    if regime == "ExponentiallyStable":
        nq = 1.0 - rate.exponent
        fit = fit_rate(traj, rate, nq)
        ok = fit.exponent is not None and fit.exponent < 0 and fit.r2 >= 0.95
        pred = -rate.coefficient if rate.coefficient is not None else None
        return "stretched-exponential decay", fit.exponent, pred, None, ok, f"r2={fit.r2:.4f}"
    if regime == "PolynomiallyStable":
        if rate.kind == "PowerLaw" and rate.exponent is not None:
            fit = fit_rate(traj, "PowerLaw")
            ok = fit.exponent is not None and abs(fit.exponent - rate.exponent) <= tol_rate
            return "power-law decay", fit.exponent, rate.exponent, tol_rate, ok, f"r2={fit.r2:.4f}"
        return "decay", Ee, e1, None, Ee < e1, ""
    if regime in ("Stable", "NeutrallyStable", "Undetermined"):
        peak = float(np.max(traj.E))
        ok = not (traj.blowup or traj.escaped) and peak <= 2.0 * e1
        what = "bounded" if regime != "Stable" else "bounded, non-increasing"
        if regime == "Stable":
            ok = ok and Ee <= 1.05 * e1
        return what, peak / e1, None, 2.0, ok, f"E_end/E1={Ee / e1:.4g}"
    if regime == "Unstable":
        ok = traj.blowup or traj.escaped or Ee >= 1.01 * e1
        return "growth", Ee / e1, None, 1.01, ok, traj.message
    if regime == "WeightedUnstable":
        res, tc = weighted_instability_check(traj, 2.0 * weight)
        return ("weighted growth", tc, None, None, bool(res),
                "inconclusive" if res is None else f"nu={2 * weight:g}")
    return "none", None, None, None, True, ""


def verify(sys: PerturbedSystem, verdict: StabilityVerdict, seeds, model=None,
           cycles: CycleSet | None = None, t_end: float = 1e4, tol: float = 1e-10,
           t_start: float = 1.0, tol_rate: float = 0.15, cycle_tol: float = 0.02,
           workers: int = 4, escape_factor: float = 10.0) -> VerifyReport:
    """Simulate each seed and test it against the verdict.

    With limit cycles present the expectation for a seed follows the averaged
    one-dimensional flow: toward the origin (checked with the verdict's own
    estimator), toward a cycle (final energy within ``cycle_tol`` of the
    averaged flow's prediction at ``t_end``) or away past every cycle.
    """
    seeds = [tuple(map(float, s)) for s in seeds]

    def run(seed):
        return integrate(sys, seed[0], seed[1], t_start, t_end, tol, e_stop=escape_factor * sys.e0)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        trajs = list(pool.map(run, seeds))

    results = []
    n = model.n if model is not None and model.n is not None else None
    have_cycles = cycles is not None and len(cycles) > 0 and n is not None
    for seed, traj in zip(seeds, trajs):
        e1 = float(traj.E[0])
        regime, rate = verdict.regime, verdict.rate
        if have_cycles:
            lam = model.orders[n].lam
            e_pred, escaped = _flow_prediction(model.energies, lam, sys.q, n, e1, t_start, t_end)
            roots = sorted(c.energy for c in cycles)
            Ee = float(traj.E[-1])
            if escaped or e_pred > roots[-1] + cycle_tol and e_pred > e1:
                ok = traj.blowup or traj.escaped or (Ee > e1 and Ee > roots[-1])
                results.append(SeedResult(seed, e1, "escape", Ee, e_pred, None, ok,
                                          traj.message))
                continue
            near = [c for c in cycles if abs(e_pred - c.energy) <= 0.5 * abs(e1 - c.energy) + cycle_tol
                    and c.stable]
            if near and e_pred > cycle_tol:
                ok = not (traj.blowup or traj.escaped) and abs(Ee - e_pred) <= cycle_tol
                results.append(SeedResult(seed, e1, f"toward cycle E={near[0].energy:.6g}", Ee, e_pred,
                                          cycle_tol, ok))
                continue
            what, meas, pred, tl, ok, det = _check(regime, rate, traj, e1, verdict.weight_exponent, tol_rate)
            results.append(SeedResult(seed, e1, "toward origin: " + what, meas, pred, tl, ok, det))
            continue
        what, meas, pred, tl, ok, det = _check(regime, rate, traj, e1, verdict.weight_exponent, tol_rate)
        results.append(SeedResult(seed, e1, what, meas, pred, tl, ok, det))
    return VerifyReport(verdict, results)
