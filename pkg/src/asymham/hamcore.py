"""Limiting-system geometry: perturbed-system model and action-angle charts.

A chart stores, for each energy ``E`` of a geometric grid, the periodic orbit
of the limiting Hamiltonian system resampled on a uniform phase grid,
``X(phi, E)``, ``Y(phi, E)``, together with the frequency ``omega(E)``.

Phase origin: ``phi = 0`` is the crossing of the level curve with the negative
x half-axis, so that ``X ~ -sqrt(2E) cos(phi)`` and ``Y ~ sqrt(2E) sin(phi)``
for small ``E``. Any other origin would be equally valid; this one is fixed so
that charts of different systems line up.

Derivatives with respect to ``phi`` come straight from the orbit equations
(``omega dX/dphi = dH0/dy``); derivatives with respect to ``E`` come from the
variational equations integrated alongside each orbit, corrected for the
change of period. Both are therefore as accurate as the orbit itself.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq, minimize_scalar

from . import expr as ex

ORIGIN_TOL = 1e-12
HESSIAN_TOL = 1e-6


class SystemDefinitionError(ValueError):
    """The system violates a structural assumption (fixed point, q, ...)."""


class GeometryError(RuntimeError):
    """A level curve could not be traced as a closed orbit."""


class ChartRangeError(ValueError):
    """Lookup outside the energy range covered by a chart."""


def _as_expr(e) -> ex.Expr:
    return ex.parse(e) if isinstance(e, str) else e


@dataclass(frozen=True)
class PerturbedSystem:
    """``H = H0 + sum t^(-k/q) H_k``, ``F = sum t^(-k/q) F_k``."""

    h0: ex.Expr
    q: int
    h_terms: Mapping[int, ex.Expr] = field(default_factory=dict)
    f_terms: Mapping[int, ex.Expr] = field(default_factory=dict)
    e0: float = 1.0
    env: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "h0", _as_expr(self.h0))
        object.__setattr__(self, "h_terms", {int(k): _as_expr(v) for k, v in dict(self.h_terms).items()})
        object.__setattr__(self, "f_terms", {int(k): _as_expr(v) for k, v in dict(self.f_terms).items()})
        object.__setattr__(self, "env", {k: float(v) for k, v in dict(self.env).items()})
        self._validate()

    @classmethod
    def from_strings(cls, h0: str, q: int, e0: float, h: Mapping[int, str] | None = None,
                     f: Mapping[int, str] | None = None, params: Mapping[str, float] | None = None):
        return cls(h0=h0, q=q, h_terms=h or {}, f_terms=f or {}, e0=e0, env=params or {})

    # -- validation -----------------------------------------------------------

    def _validate(self):
        if isinstance(self.q, bool) or not isinstance(self.q, (int, np.integer)) or self.q < 1:
            raise SystemDefinitionError(f"q must be a positive integer, got {self.q!r}")
        if not self.e0 > 0:
            raise SystemDefinitionError(f"E0 must be positive, got {self.e0!r}")
        for k in list(self.h_terms) + list(self.f_terms):
            if k < 1:
                raise SystemDefinitionError(f"perturbation index must be >= 1, got {k}")
        exprs = [self.h0, *self.h_terms.values(), *self.f_terms.values()]
        missing = set().union(*(ex.free_params(e) for e in exprs)) - set(self.env)
        if missing:
            raise SystemDefinitionError(f"unbound parameter(s): {', '.join(sorted(missing))}")

        def at0(e):
            return ex.evaluate(e, 0.0, 0.0, self.env)

        if abs(at0(self.h0)) > ORIGIN_TOL:
            raise SystemDefinitionError("H0(0,0) must vanish")
        hx, hy = ex.differentiate(self.h0, "x"), ex.differentiate(self.h0, "y")
        if abs(at0(hx)) > ORIGIN_TOL or abs(at0(hy)) > ORIGIN_TOL:
            raise SystemDefinitionError("(0,0) must be a critical point of H0")
        hess = np.array([[at0(ex.differentiate(hx, "x")), at0(ex.differentiate(hx, "y"))],
                         [at0(ex.differentiate(hy, "x")), at0(ex.differentiate(hy, "y"))]])
        if np.max(np.abs(hess - np.eye(2))) > HESSIAN_TOL:
            warnings.warn(f"Hessian of H0 at the origin is {hess.tolist()}, not the identity; "
                          "coordinates are used as given", stacklevel=3)
        for k, hk in self.h_terms.items():
            if (abs(at0(ex.differentiate(hk, "x"))) > ORIGIN_TOL
                    or abs(at0(ex.differentiate(hk, "y"))) > ORIGIN_TOL):
                raise SystemDefinitionError(f"H_{k} moves the fixed point: its gradient at (0,0) is nonzero")
        for k, fk in self.f_terms.items():
            if abs(at0(fk)) > ORIGIN_TOL:
                raise SystemDefinitionError(f"F_{k}(0,0) = {at0(fk)!r} != 0: perturbation must preserve the fixed point")

    # -- derived callables ----------------------------------------------------

    @property
    def orders(self) -> list[int]:
        return sorted(set(self.h_terms) | set(self.f_terms))

    @property
    def max_order(self) -> int:
        return max(self.orders, default=0)

    def h(self, k: int) -> ex.Expr | None:
        e = self.h_terms.get(k)
        return None if e is None or ex.is_zero(e) else e

    def f(self, k: int) -> ex.Expr | None:
        e = self.f_terms.get(k)
        return None if e is None or ex.is_zero(e) else e

    @cached_property
    def h0_derivs(self) -> dict[str, ex.Expr]:
        hx = ex.differentiate(self.h0, "x")
        hy = ex.differentiate(self.h0, "y")
        return {"x": hx, "y": hy, "xx": ex.differentiate(hx, "x"),
                "xy": ex.differentiate(hx, "y"), "yy": ex.differentiate(hy, "y")}

    def compiled(self, e: ex.Expr, backend: str = "numpy"):
        return ex.compile_expr(e, self.env, backend)

    @cached_property
    def _h0_np(self):
        d = self.h0_derivs
        return {"h": self.compiled(self.h0), **{k: self.compiled(v) for k, v in d.items()}}

    @cached_property
    def _h0_math(self):
        d = self.h0_derivs
        return {"h": self.compiled(self.h0, "math"), **{k: self.compiled(v, "math") for k, v in d.items()}}

    def H0(self, x, y):
        return self._h0_np["h"](x, y)

    def grad_h0(self, x, y):
        f = self._h0_np
        return f["x"](x, y), f["y"](x, y)

    def limiting_rhs(self):
        hx, hy = self._h0_math["x"], self._h0_math["y"]

        def rhs(t, s):
            x, y = s[0], s[1]
            return [hy(x, y), -hx(x, y)]
        return rhs


# ---------------------------------------------------------------------------
# Starting point on the level curve

def _axis_crossing(sys: PerturbedSystem, E: float, sign: float) -> float:
    h = sys._h0_math["h"]
    hx = sys._h0_math["x"]

    def g(x):
        return h(x, 0.0) - E

    step = math.sqrt(2.0 * E) / 8.0
    x_prev, g_prev = 0.0, -E
    for i in range(1, 20000):
        x = sign * step * i
        try:
            gx = g(x)
        except ex.EvalError as exc:
            raise GeometryError(f"H0 undefined on the axis at x={x:g}: {exc}") from None
        if gx >= 0.0:
            break
        if gx < g_prev - 1e-15 * max(1.0, E):
            # stepped over a maximum of H0 on the axis; it may still reach E
            lo, hi = sorted((x_prev - sign * step, x))
            res = minimize_scalar(lambda u: -g(u), bounds=(lo, hi), method="bounded",
                                  options={"xatol": 1e-14})
            if -res.fun < 0.0:
                raise GeometryError(f"H0 does not increase along the x-axis up to level E={E:g}; "
                                    "the level curve is not a closed orbit around the origin")
            x_peak = res.x
            if (x_peak - x_prev) * sign < 0:
                x_prev = x_prev - sign * step
            x = x_peak
            break
        x_prev, g_prev = x, gx
    else:
        raise GeometryError(f"no sign change of H0(x,0)-E found on the axis for E={E:g}")
    root = brentq(g, x_prev, x, xtol=1e-16, rtol=4 * np.finfo(float).eps, maxiter=200)
    # Newton polish
    for _ in range(3):
        d = hx(root, 0.0)
        if d == 0.0:
            break
        nxt = root - g(root) / d
        if not (min(x_prev, x) <= nxt <= max(x_prev, x)):
            break
        root = nxt
    return root


def locate_start(sys: PerturbedSystem, E: float) -> tuple[float, float]:
    """Point ``(x, 0)`` with ``x < 0`` on the level curve ``H0 = E``."""
    if not (0.0 < E <= sys.e0 * (1 + 1e-12)):
        raise GeometryError(f"energy {E!r} outside (0, E0={sys.e0}]")
    return _axis_crossing(sys, E, -1.0), 0.0


# ---------------------------------------------------------------------------
# Orbits

@dataclass
class Orbit:
    energy: float
    period: float
    dperiod: float  # dT/dE
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    wx: np.ndarray  # variation of the flow w.r.t. E at fixed time
    wy: np.ndarray
    closure: float


def trace_orbit(sys: PerturbedSystem, E: float, n_phi: int, rtol: float = 3e-14,
                atol: float = 1e-16, t_max: float = 2e4) -> Orbit:
    x0, _ = locate_start(sys, E)
    f = sys._h0_math
    hx, hy, hxx, hxy, hyy = f["x"], f["y"], f["xx"], f["xy"], f["yy"]

    def rhs(t, s):
        x, y, wx, wy = s
        a, b, c = hxx(x, y), hxy(x, y), hyy(x, y)
        return [hy(x, y), -hx(x, y), b * wx + c * wy, -a * wx - b * wy]

    fx0 = hx(x0, 0.0)
    if not fx0 < 0.0:
        raise GeometryError(f"flow at the start point does not cross the axis upwards (E={E:g})")
    s0 = [x0, 0.0, 1.0 / fx0, 0.0]
    scale = abs(x0)
    span = 4.0 * math.pi
    while True:
        sol = solve_ivp(rhs, (0.0, span), s0, method="DOP853", rtol=rtol,
                        atol=[atol * min(scale, 1.0)] * 2 + [atol] * 2,
                        dense_output=True)
        if sol.status < 0:
            raise GeometryError(f"orbit integration failed at E={E:g}: {sol.message}")
        yv = sol.y[1]
        idx = np.nonzero((yv[:-1] < 0.0) & (yv[1:] >= 0.0))[0]
        if idx.size:
            i = idx[0]
            break
        if np.max(np.abs(sol.y[:2])) > 1e6 * max(scale, 1.0):
            raise GeometryError(f"orbit escapes at E={E:g}; level curve is not closed")
        span *= 2.0
        if span > t_max:
            raise GeometryError(f"no return to the start section within t={t_max:g} at E={E:g}")
    ta, tb = sol.t[i], sol.t[i + 1]
    T = brentq(lambda t: sol.sol(t)[1], ta, tb, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    end = sol.sol(T)
    closure = math.hypot(end[0] - x0, end[1])
    tj = T * np.arange(n_phi) / n_phi
    pts = sol.sol(tj)
    ydot = -hx(end[0], end[1])
    dT = -end[3] / ydot
    return Orbit(E, T, dT, tj, pts[0], pts[1], pts[2], pts[3], closure)


@dataclass
class ActionAngleChart:
    """Sampled action-angle chart on an ``(E, phi)`` lattice."""

    energies: np.ndarray
    phi: np.ndarray
    omega: np.ndarray
    domega: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    X_phi: np.ndarray
    Y_phi: np.ndarray
    X_E: np.ndarray
    Y_E: np.ndarray
    closure: np.ndarray

    @property
    def n_energies(self) -> int:
        return self.energies.size

    @property
    def n_phi(self) -> int:
        return self.phi.size

    @property
    def period(self) -> np.ndarray:
        return 2.0 * np.pi / self.omega

    @cached_property
    def _interp(self):
        s = np.sqrt(self.energies)
        amp = np.sqrt(2.0 * self.energies)[:, None]
        cx = np.fft.rfft(self.X / amp, axis=1)
        cy = np.fft.rfft(self.Y / amp, axis=1)
        return s, cx, cy, CubicSpline(s, self.omega)

    def lookup(self, E: float, phi: float) -> tuple[float, float, float]:
        """Interpolated ``(X, Y, omega)``: trigonometric in phi, cubic in sqrt(E)."""
        lo, hi = self.energies[0], self.energies[-1]
        if not (lo * (1 - 1e-12) <= E <= hi * (1 + 1e-12)):
            raise ChartRangeError(f"E={E!r} outside chart range [{lo:g}, {hi:g}]")
        s, cx, cy, om = self._interp
        m = self.n_phi
        phi = math.fmod(phi, 2.0 * math.pi)
        k = np.arange(cx.shape[1])
        w = np.full(k.size, 2.0)
        w[0] = 1.0
        if m % 2 == 0:
            w[-1] = 1.0
        basis = w * np.exp(1j * k * phi) / m
        xs = (cx @ basis).real
        ys = (cy @ basis).real
        se = math.sqrt(E)
        amp = math.sqrt(2.0 * E)
        X = float(CubicSpline(s, xs)(se)) * amp
        Y = float(CubicSpline(s, ys)(se)) * amp
        return X, Y, float(om(se))

    def energy_error(self, sys: PerturbedSystem) -> float:
        """Max relative deviation of ``H0(X, Y)`` from the row energy."""
        h = sys.H0(self.X, self.Y)
        return float(np.max(np.abs(h - self.energies[:, None]) / self.energies[:, None]))

    def jacobian_defect(self) -> float:
        """Max relative deviation of ``X_phi Y_E - Y_phi X_E`` from ``1/omega``."""
        det = self.X_phi * self.Y_E - self.Y_phi * self.X_E
        return float(np.max(np.abs(det * self.omega[:, None] - 1.0)))

    def csv_rows(self):
        for i, E in enumerate(self.energies):
            for j, p in enumerate(self.phi):
                yield (E, j, p, self.X[i, j], self.Y[i, j])

    def omega_rows(self):
        return list(zip(self.energies, self.omega))


def energy_grid(e0: float, n: int, ratio: float = 1e-4) -> np.ndarray:
    return np.geomspace(e0 * ratio, e0, n)


def build_chart(sys: PerturbedSystem, n_energies: int = 48, n_phi: int = 256,
                energies=None, e_min_ratio: float = 1e-4, rtol: float = 3e-14,
                atol: float = 1e-16) -> ActionAngleChart:
    """Trace the limiting orbit at every grid energy and resample it in phase.

    ``energies`` overrides the default geometric grid ``[E0*e_min_ratio, E0]``.
    """
    if n_phi < 64 or n_phi % 2:
        raise ValueError("n_phi must be even and >= 64")
    if energies is None:
        if n_energies < 8:
            raise ValueError("n_energies must be >= 8")
        energies = energy_grid(sys.e0, n_energies, e_min_ratio)
    energies = np.asarray(energies, dtype=float)
    if np.any(np.diff(energies) <= 0) or energies[0] <= 0 or energies[-1] > sys.e0 * (1 + 1e-12):
        raise ValueError("energies must be ascending and inside (0, E0]")

    orbits = [trace_orbit(sys, float(E), n_phi, rtol, atol) for E in energies]
    T = np.array([o.period for o in orbits])
    dT = np.array([o.dperiod for o in orbits])
    omega = 2.0 * np.pi / T
    domega = -2.0 * np.pi * dT / T ** 2
    X = np.array([o.x for o in orbits])
    Y = np.array([o.y for o in orbits])
    WX = np.array([o.wx for o in orbits])
    WY = np.array([o.wy for o in orbits])
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    hx, hy = sys.grad_h0(X, Y)
    X_phi = hy / omega[:, None]
    Y_phi = -hx / omega[:, None]
    shift = (dT / T)[:, None] * phi[None, :]
    X_E = WX + shift * X_phi
    Y_E = WY + shift * Y_phi
    closure = np.array([o.closure for o in orbits])
    bad = closure > 1e-8 * np.maximum(1.0, np.sqrt(2 * energies))
    if np.any(bad):
        raise GeometryError(f"orbit does not close at E={energies[bad][0]:g} (gap {closure[bad][0]:.2e})")
    return ActionAngleChart(energies, phi, omega, domega, X, Y, X_phi, Y_phi, X_E, Y_E, closure)


# ---------------------------------------------------------------------------
# Level-curve quadrature in x (independent of the time-parametrised chart)

def _vertical_root(sys: PerturbedSystem, x: float, E: float, sign: float) -> float:
    h = sys._h0_math["h"]

    def g(y):
        return h(x, y) - E

    hi = max(math.sqrt(2.0 * E), 1e-8)
    while g(sign * hi) < 0.0:
        hi *= 2.0
        if hi > 1e8:
            raise GeometryError(f"level curve E={E:g} not bounded above x={x:g}")
    return brentq(g, 0.0, sign * hi, xtol=1e-16, rtol=4 * np.finfo(float).eps)


def level_curve_nodes(sys: PerturbedSystem, E: float, n: int = 96):
    """Quadrature nodes for ``oint F dx`` over the level curve ``H0 = E``.

    Returns ``(x, y_up, y_down, w)``: the curve is split into an upper and a
    lower branch over ``x`` and ``x = c - a cos(theta)`` removes the square-root
    behaviour at the turning points, so Gauss-Legendre in ``theta`` converges
    fast for smooth integrands.
    """
    x_left = _axis_crossing(sys, E, -1.0)
    x_right = _axis_crossing(sys, E, +1.0)
    c, a = 0.5 * (x_left + x_right), 0.5 * (x_right - x_left)
    u, wu = np.polynomial.legendre.leggauss(n)
    theta = 0.5 * np.pi * (u + 1.0)
    x = c - a * np.cos(theta)
    w = 0.5 * np.pi * wu * a * np.sin(theta)
    y_up = np.array([_vertical_root(sys, xi, E, +1.0) for xi in x])
    y_dn = np.array([_vertical_root(sys, xi, E, -1.0) for xi in x])
    return x, y_up, y_dn, w


def circulation(sys: PerturbedSystem, F, E: float, n: int = 96) -> tuple[float, float]:
    """``(oint F dx, T)`` along the orbit of energy ``E`` (flow orientation)."""
    x, yu, yd, w = level_curve_nodes(sys, E, n)
    hy = sys._h0_np["y"]
    fu = F(x, yu) if F is not None else np.zeros_like(x)
    fd = F(x, yd) if F is not None else np.zeros_like(x)
    circ = float(np.sum(w * (fu - fd)))
    T = float(np.sum(w * (1.0 / hy(x, yu) - 1.0 / hy(x, yd))))
    return circ, T
