"""Stability verdicts, limit cycles and structural condition checks.

The verdict depends only on a handful of leading-order constants of the
averaged model: the first nonzero order and its power law, and possibly a
second order. ``classify_leading`` is the pure decision tree on those
constants; ``classify`` pulls them out of an :class:`AveragedModel`.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from . import expr as ex
from .averaging import AveragedModel, average_phi, loop_integral
from .hamcore import ActionAngleChart, PerturbedSystem

REGIMES = ("ExponentiallyStable", "PolynomiallyStable", "Stable", "NeutrallyStable",
           "Unstable", "WeightedUnstable", "Undetermined")
RATE_KINDS = ("PowerLaw", "StretchedExponential", "ConvergesToCycle", "None")
DEGENERATE_REL = 1e-8


@dataclass(frozen=True)
class RatePrediction:
    kind: str = "None"
    exponent: float | None = None
    coefficient: float | None = None
    cycle_energy: float | None = None

    def __post_init__(self):
        if self.kind not in RATE_KINDS:
            raise ValueError(f"unknown rate kind {self.kind!r}")


@dataclass(frozen=True)
class StabilityVerdict:
    regime: str
    source: str
    rate: RatePrediction = field(default_factory=RatePrediction)
    weight_exponent: float | None = None
    inputs: dict = field(default_factory=dict)
    note: str = ""

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.regime == "WeightedUnstable" and not (self.weight_exponent and self.weight_exponent > 0):
            raise ValueError("WeightedUnstable needs a positive weight exponent")

    def as_dict(self) -> dict:
        return {
            "regime": self.regime,
            "weight_exponent": self.weight_exponent,
            "rate": {"kind": self.rate.kind, "exponent": self.rate.exponent,
                     "cycle_energy": self.rate.cycle_energy},
            "source": self.source,
            "inputs": self.inputs,
            "note": self.note,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"regime: {self.regime}  ({self.source})"]
        if self.weight_exponent is not None:
            lines.append(f"weight: t^{self.weight_exponent:g} in (x, y)")
        r = self.rate
        if r.kind == "PowerLaw":
            lines.append(f"rate: E ~ t^{r.exponent:g}")
        elif r.kind == "StretchedExponential":
            lines.append(f"rate: E <~ exp(-{r.coefficient:g} t^{r.exponent:g})")
        elif r.kind == "ConvergesToCycle":
            lines.append(f"rate: E -> {r.cycle_energy:g}")
        ins = ", ".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in self.inputs.items() if v is not None)
        if ins:
            lines.append(f"inputs: {ins}")
        if self.note:
            lines.append(f"note: {self.note}")
        return "\n".join(lines)


def _undetermined(note, inputs, source="none"):
    return StabilityVerdict("Undetermined", source, inputs=inputs, note=note)


def classify_leading(q: int, n: int | None, lam: float | None = None, m: int | None = None,
                     s: float | None = None, gamma: float | None = None,
                     d: float | None = None, gamma_nd: float | None = None) -> StabilityVerdict:
    """Decision tree on leading-order constants.

    ``n``/``lam``: order and slope of the linear term; ``m``/``s``/``gamma``:
    earlier nonlinear order, its power and coefficient; ``d``/``gamma_nd``:
    power and coefficient at ``n`` when that order is also nonlinear.
    Zero values of ``lam``/``gamma`` count as critical and give Undetermined.
    """
    inputs = {"q": q, "n": n, "m": m, "s": s, "d": d, "lambda_n": lam,
              "gamma_ms": gamma, "gamma_nd": gamma_nd}
    if n is None:
        return _undetermined("no nonzero averaged coefficient found", inputs)

    # (a) linear leading term
    if m is None:
        if lam is None:
            return _undetermined(f"order {n} is not linear and has no partner order", inputs)
        if lam == 0:
            return _undetermined("lambda_n at the critical value 0", inputs, "lemma-1")
        if lam > 0:
            rate = RatePrediction("PowerLaw", lam) if n == q else RatePrediction()
            return StabilityVerdict("Unstable", "lemma-1", rate, inputs=inputs)
        if n < q:
            beta = 1.0 - n / q
            return StabilityVerdict("ExponentiallyStable", "lemma-1",
                                    RatePrediction("StretchedExponential", beta, abs(lam) / beta), inputs=inputs)
        if n == q:
            return StabilityVerdict("PolynomiallyStable", "lemma-1", RatePrediction("PowerLaw", lam), inputs=inputs)
        return StabilityVerdict("Stable", "lemma-1", inputs=inputs, note="marginal: bounded, no decay rate")

    if s is None or gamma is None or s < 2 or n <= m:
        return _undetermined("inconsistent leading orders", inputs)
    if gamma == 0:
        return _undetermined("gamma_ms at the critical value 0", inputs)

    # (b) nonlinear order m followed by a linear order n
    if d is None:
        if lam is None:
            return _undetermined(f"order {n} has no usable leading term", inputs)
        if lam == 0:
            return _undetermined("lambda_n at the critical value 0", inputs, "lemma-2")
        nu = (n - m) / (q * (s - 1))
        eta = (q - m) / (q * (s - 1))
        inputs.update(nu=nu, eta=eta)
        if n < q:
            if lam < 0:
                beta = 1.0 - n / q
                return StabilityVerdict("ExponentiallyStable", "lemma-2",
                                        RatePrediction("StretchedExponential", beta, abs(lam) / beta), inputs=inputs)
            if gamma < 0:
                return StabilityVerdict("PolynomiallyStable", "lemma-2", RatePrediction("PowerLaw", -nu), inputs=inputs)
            return StabilityVerdict("Unstable", "lemma-02", inputs=inputs)
        if n == q:
            if lam + nu < 0:
                return StabilityVerdict("PolynomiallyStable", "lemma-2", RatePrediction("PowerLaw", lam),
                                        inputs=inputs, note="exponent is lambda_n up to an arbitrarily small margin")
            if lam + nu == 0:
                return _undetermined("lambda_n + nu at the critical value 0", inputs, "lemma-2")
            if gamma < 0:
                return StabilityVerdict("PolynomiallyStable", "lemma-2", RatePrediction("PowerLaw", -nu), inputs=inputs)
            return StabilityVerdict("WeightedUnstable", "lemma-2", weight_exponent=nu / 2, inputs=inputs)
        if m < q:
            if gamma < 0:
                return StabilityVerdict("PolynomiallyStable", "lemma-2", RatePrediction("PowerLaw", -eta), inputs=inputs)
            return StabilityVerdict("WeightedUnstable", "lemma-2", weight_exponent=eta / 2, inputs=inputs)
        if gamma < 0:
            return StabilityVerdict("NeutrallyStable", "lemma-2", inputs=inputs)
        if lam > 0:
            return StabilityVerdict("Unstable", "lemma-02", inputs=inputs)
        return _undetermined("q <= m with gamma > 0 and lambda_n < 0 is not covered", inputs)

    # (c) two nonlinear orders
    if gamma_nd is None or gamma_nd == 0 or d < 2:
        return _undetermined("inconsistent second nonlinear order", inputs)
    if s <= d:
        return StabilityVerdict("Stable" if gamma < 0 else "Unstable", "lemma-22", inputs=inputs)
    if gamma < 0 and gamma_nd < 0:
        return StabilityVerdict("Stable", "lemma-22", inputs=inputs)
    if gamma > 0 and gamma_nd > 0:
        return StabilityVerdict("Unstable", "lemma-22", inputs=inputs)
    return _undetermined("s > d with mixed signs is not covered", inputs, "lemma-22")


def _degenerate(model: AveragedModel, k: int, coeff: float, power: float) -> bool:
    """Coefficient negligible against the size of the curve it was fitted to."""
    e = model.energies
    lam = model.orders[k].lam
    scale = float(np.max(np.abs(lam) / e ** power))
    return abs(coeff) < DEGENERATE_REL * scale


def classify(model: AveragedModel, q: int | None = None) -> StabilityVerdict:
    q = model.q if q is None else q
    lam, gamma, gamma_nd = model.lam_n, model.gamma_ms, model.gamma_nd
    if model.n is not None and lam is not None and _degenerate(model, model.n, lam, 1):
        lam = 0.0
    verdict = classify_leading(q, model.n, lam, model.m, model.s, gamma, model.d, gamma_nd)
    if verdict.regime == "Undetermined" and model.note and not verdict.note.startswith("lambda"):
        verdict = StabilityVerdict("Undetermined", verdict.source, inputs=verdict.inputs,
                                   note=f"{verdict.note}; {model.note}")
    return verdict


# ---------------------------------------------------------------------------
# Limit cycles

@dataclass(frozen=True)
class Cycle:
    energy: float
    stable: bool
    derivative: float
    boundary: bool = False
    degenerate: bool = False

    @property
    def stability(self) -> str:
        return "stable" if self.stable else "unstable"


@dataclass(frozen=True)
class CycleSet:
    order: int | None
    cycles: tuple[Cycle, ...] = ()

    def __len__(self):
        return len(self.cycles)

    def __iter__(self):
        return iter(self.cycles)

    def rows(self):
        return [(c.energy, c.stability, c.derivative, int(c.boundary)) for c in self.cycles]


def find_cycles_in_curve(energies, curve, order: int | None = None) -> CycleSet:
    """Roots of a sampled ``Lambda_n`` with the stability given by its slope."""
    e = np.asarray(energies, dtype=float)
    lam = np.asarray(curve, dtype=float)
    spl = CubicSpline(e, lam)
    dspl = spl.derivative()
    sg = np.sign(lam)
    out = []
    for i in range(e.size - 1):
        if sg[i] * sg[i + 1] < 0:
            root = brentq(spl, e[i], e[i + 1], xtol=1e-12, rtol=1e-14)
        elif sg[i + 1] == 0 and i + 2 < e.size and sg[i] * sg[i + 2] < 0:
            root = e[i + 1]
        else:
            continue
        slope = float(dspl(root))
        degenerate = abs(slope) < 1e-8
        if degenerate:
            warnings.warn(f"degenerate cycle at E={root:.6g}: slope {slope:.2e}", stacklevel=2)
        boundary = i == 0 or i + 1 >= e.size - 1
        out.append(Cycle(float(root), slope < 0, slope, boundary, degenerate))
    return CycleSet(order, tuple(out))


def find_cycles(model: AveragedModel, order: int | None = None) -> CycleSet:
    k = order if order is not None else (model.n if model.n is not None else model.first_nonzero)
    if k is None:
        return CycleSet(None)
    return find_cycles_in_curve(model.energies, model.orders[k].lam, k)


# ---------------------------------------------------------------------------
# Structural conditions

@dataclass
class ConditionResult:
    name: str
    passed: bool
    residual: float
    detail: str = ""


@dataclass
class TheoremReport:
    theorem: int
    conditions: list[ConditionResult]
    extracted: dict

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions)

    def as_dict(self):
        return {"theorem": self.theorem, "passed": self.passed,
                "conditions": [asdict(c) for c in self.conditions], "extracted": self.extracted}


def taylor_coefficients(sys: PerturbedSystem, e: ex.Expr, degree: int = 6,
                        r_min: float = 1e-3, r_max: float = 1e-2) -> dict[tuple[int, int], float]:
    """Coefficients of ``x^i y^j`` near the origin from a least-squares fit on circles."""
    fn = sys.compiled(e)
    radii = np.geomspace(r_min, r_max, 6)
    th = 2 * np.pi * np.arange(48) / 48
    rr, tt = np.meshgrid(radii, th, indexing="ij")
    x, y = (rr * np.cos(tt)).ravel(), (rr * np.sin(tt)).ravel()
    vals = np.broadcast_to(fn(x, y), x.shape)
    u, w = x / r_max, y / r_max
    powers = [(i, k - i) for k in range(degree + 1) for i in range(k, -1, -1)]
    A = np.stack([u ** i * w ** j for i, j in powers], axis=1)
    c, *_ = np.linalg.lstsq(A, vals, rcond=None)
    return {p: float(ci / r_max ** (p[0] + p[1])) for p, ci in zip(powers, c)}


def _loop_residual(sys, chart, e: ex.Expr, energies, scale_expr: ex.Expr | None = None) -> float:
    """Max of |<F H0_y>| relative to <|G H0_y>| over ``energies`` (``G`` defaults to ``F``)."""
    fn = sys.compiled(e if scale_expr is None else scale_expr)
    hy = sys.compiled(sys.h0_derivs["y"])
    idx = [int(np.argmin(np.abs(chart.energies - E))) for E in energies]
    scale = average_phi(np.abs(fn(chart.X[idx], chart.Y[idx]) * hy(chart.X[idx], chart.Y[idx])))
    vals = np.array([loop_integral(sys, e, float(E)) for E in chart.energies[idx]])
    scale = np.where(scale > 0, scale, 1.0)
    return float(np.max(np.abs(vals) / scale))


def _check_energies(chart, count=8):
    idx = np.unique(np.linspace(0, chart.n_energies - 1, count).round().astype(int))
    return chart.energies[idx]


def check_theorem_conditions(sys: PerturbedSystem, chart: ActionAngleChart, thm: int,
                             loop_tol: float = 1e-8, coef_tol: float = 1e-7) -> TheoremReport:
    """Verify the structural hypotheses behind the closed-form leading constants."""
    if thm not in (1, 2, 3):
        raise ValueError("thm must be 1, 2 or 3")
    energies = _check_energies(chart)
    conds: list[ConditionResult] = []
    extracted: dict = {}
    f_orders = sorted(k for k in sys.f_terms if sys.f(k) is not None)
    h_orders = sorted(k for k in sys.h_terms if sys.h(k) is not None)
    h = h_orders[0] if h_orders else math.inf
    l = f_orders[0] if f_orders else math.inf
    extracted.update(h=h if h != math.inf else None, l=l if l != math.inf else None)

    loops = {k: _loop_residual(sys, chart, sys.f(k), energies) for k in f_orders}
    taylor = {k: taylor_coefficients(sys, sys.f(k)) for k in f_orders}

    def lin(k):
        t = taylor[k]
        return t[(1, 0)], t[(0, 1)], max(abs(t[(0, 0)]), abs(t[(1, 0)]), abs(t[(0, 1)]))

    if thm == 3:
        return _check_th3(sys, chart, energies, f_orders, loops, conds, extracted, loop_tol)

    # first order whose loop integral does not vanish
    nonzero = [k for k in f_orders if loops[k] > loop_tol]
    if thm == 1:
        n = next((k for k in nonzero if abs(lin(k)[1]) > coef_tol), None)
        extracted["n"] = n
        if n is None:
            conds.append(ConditionResult("F_n = lambda y + O(r^2)", False, math.nan, "no order with a linear y term"))
            return TheoremReport(1, conds, extracted)
        for k in f_orders:
            if l <= k < n:
                conds.append(ConditionResult(f"loop(F_{k} dH0/dy) = 0", loops[k] <= loop_tol, loops[k]))
                conds.append(ConditionResult(f"F_{k} = O(r^2)", lin(k)[2] <= coef_tol, lin(k)[2]))
        cx, cy, _ = lin(n)
        extracted["lambda_n"] = cy
        conds.append(ConditionResult(f"F_{n} linear part is lambda y", abs(cx) <= coef_tol and abs(cy) > coef_tol,
                                     abs(cx), f"lambda_n={cy:.12g}"))
        conds.append(ConditionResult("l + h >= n", l + h >= n, float(l + h - n)))
        return TheoremReport(1, conds, extracted)

    # theorem 2
    m = nonzero[0] if nonzero else None
    extracted["m"] = m
    if m is None:
        conds.append(ConditionResult("nonzero order m exists", False, math.nan))
        return TheoremReport(2, conds, extracted)
    n = next((k for k in f_orders if k > m and abs(lin(k)[1]) > coef_tol), None)
    extracted["n"] = n
    for k in f_orders:
        if l <= k < m:
            conds.append(ConditionResult(f"loop(F_{k} dH0/dy) = 0", loops[k] <= loop_tol, loops[k]))
        if l <= k < (n if n is not None else math.inf) and k != n:
            conds.append(ConditionResult(f"F_{k} = O(r^2)", lin(k)[2] <= coef_tol, lin(k)[2]))
    t = taylor[m]
    quad = max(abs(t[(2, 0)]), abs(t[(1, 1)]), abs(t[(0, 2)]))
    stray = max(abs(t[(3, 0)]), abs(t[(1, 2)]))
    alpha, beta = t[(2, 1)], t[(0, 3)]
    extracted.update(alpha_m=alpha, beta_m=beta, gamma_ms=(alpha + 3 * beta) / 2)
    conds.append(ConditionResult(f"F_{m} = y(alpha x^2 + beta y^2) + O(r^4)",
                                 quad <= coef_tol and stray <= 1e-5 * max(1.0, abs(alpha), abs(beta)),
                                 max(quad, stray)))
    if n is None:
        conds.append(ConditionResult("F_n = lambda y + O(r^2) with n > m", False, math.nan))
    else:
        cx, cy, _ = lin(n)
        extracted["lambda_n"] = cy
        conds.append(ConditionResult(f"F_{n} linear part is lambda y", abs(cx) <= coef_tol, abs(cx),
                                     f"lambda_n={cy:.12g}"))
        conds.append(ConditionResult("l + h >= n", l + h >= n, float(l + h - n)))
    return TheoremReport(2, conds, extracted)


def _check_th3(sys, chart, energies, f_orders, loops, conds, extracted, loop_tol):
    n = f_orders[0] if f_orders else None
    extracted["n"] = n
    if n is None:
        conds.append(ConditionResult("F_n present", False, math.nan))
        return TheoremReport(3, conds, extracted)
    conds.append(ConditionResult("1 <= n <= q", 1 <= n <= sys.q, float(n - sys.q)))
    hy = sys.h0_derivs["y"]
    fn = sys.f(n)
    e = chart.energies
    num = np.array([loop_integral(sys, fn, float(E)) for E in e])
    den = np.array([loop_integral(sys, hy, float(E)) for E in e])
    # loop(F_n) / <H0_y^2> = lambda - mu E
    slope, icpt = np.polyfit(e, num / den, 1)
    lam, mu = float(icpt), float(-slope)
    extracted.update(lambda_n=lam, mu_n=mu)
    if lam * mu > 0 and lam / mu < sys.e0:
        extracted["cycle_energy"] = lam / mu
    fhat = ex.substitute(ex.sub(fn, ex.mul(hy, ex.sub(ex.Num(lam), ex.mul(ex.Num(mu), sys.h0)))), {})
    extracted["F_hat"] = ex.to_source(fhat)
    res = _loop_residual(sys, chart, fhat, energies, scale_expr=fn)
    conds.append(ConditionResult("loop(F_hat dH0/dy) = 0", res <= max(loop_tol, 1e-7), res))
    conds.append(ConditionResult("lambda_n, mu_n nonzero", abs(lam) > 1e-9 and abs(mu) > 1e-9,
                                 min(abs(lam), abs(mu))))
    return TheoremReport(3, conds, extracted)
