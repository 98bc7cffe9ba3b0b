"""Averaged drift coefficients and the near-identity energy transform.

On a chart lattice this module evaluates

    f_k = -omega dH_k/dphi + F_k dH0/dy
    g_k =  omega (dH_k/dE - F_k dX/dE)

then runs the chain ``omega dv_k/dphi = Lambda_k - f_k + Z_k`` order by order,
with ``Lambda_k = <f_k> - <Z_k>`` (``<.>`` is the phase average). The
correction fields ``v_k`` define ``V_N = E + sum t^(-k/q) v_k``.

``Z_k`` is written out explicitly through order 3. Beyond that only the terms
that survive when every lower ``Lambda_j`` vanishes are kept (the products
``f_j dv_i/dE + g_j dv_i/dphi`` and the ``v_(k-q)`` shift); that is exact in
the regime where it is needed, namely locating a first nonzero order ``n > 3``,
and such orders are flagged otherwise.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .hamcore import ActionAngleChart, PerturbedSystem, circulation

ZERO_TOL = 1e-12
ROUND_WINDOW = 0.1
MIN_R2 = 0.99
EXPLICIT_Z_ORDER = 3


class UnsupportedOrderError(ValueError):
    """Z_k requested beyond the explicitly implemented orders."""


class FitQualityError(ValueError):
    """A sampled curve does not follow a power law near E = 0."""


# ---------------------------------------------------------------------------
# Lattice helpers

def average_phi(field) -> np.ndarray:
    """Phase average over a uniform periodic grid (last axis)."""
    return np.mean(np.asarray(field, dtype=float), axis=-1)


def periodic_antiderivative(field) -> np.ndarray:
    """Spectral antiderivative in phi, anchored to vanish at phi = 0.

    The mean of ``field`` is discarded; callers pass zero-mean integrands.
    """
    a = np.asarray(field, dtype=float)
    m = a.shape[-1]
    c = np.fft.rfft(a, axis=-1)
    k = np.arange(c.shape[-1])
    c[..., 0] = 0.0
    c[..., 1:] /= 1j * k[1:]
    if m % 2 == 0:
        c[..., -1] = 0.0
    out = np.fft.irfft(c, n=m, axis=-1)
    return out - out[..., :1]


def _stencil(xs, x0):
    """First-derivative weights at ``x0`` for the 3 nodes ``xs``."""
    a, b, c = xs
    return np.array([
        (2 * x0 - b - c) / ((a - b) * (a - c)),
        (2 * x0 - a - c) / ((b - a) * (b - c)),
        (2 * x0 - a - b) / ((c - a) * (c - b)),
    ])


def d_energy(values, energies, zero_at_origin: bool = False) -> np.ndarray:
    """3-point derivative along the (nonuniform) energy axis, axis 0.

    With ``zero_at_origin`` the point ``(E=0, value=0)`` serves as the left
    neighbour of the first grid node, which keeps the stencil centred there.
    """
    v = np.asarray(values, dtype=float)
    e = np.asarray(energies, dtype=float)
    n = e.size
    out = np.empty_like(v)
    for i in range(n):
        if i == 0 and zero_at_origin:
            w = _stencil((0.0, e[0], e[1]), e[0])
            out[0] = w[1] * v[0] + w[2] * v[1]
            continue
        lo = min(max(i - 1, 0), n - 3)
        w = _stencil(e[lo:lo + 3], e[i])
        out[i] = w[0] * v[lo] + w[1] * v[lo + 1] + w[2] * v[lo + 2]
    return out


# ---------------------------------------------------------------------------
# f_k, g_k

def _grad(sys: PerturbedSystem, e: ex.Expr, X, Y):
    fx = sys.compiled(ex.differentiate(e, "x"))(X, Y)
    fy = sys.compiled(ex.differentiate(e, "y"))(X, Y)
    return fx, fy


def _h_derivs(sys, chart, k):
    """``(H_k, dH_k/dphi, dH_k/dE)`` on the lattice, or zeros."""
    hk = sys.h(k)
    if hk is None:
        z = np.zeros_like(chart.X)
        return z, z, z
    hx, hy = _grad(sys, hk, chart.X, chart.Y)
    val = sys.compiled(hk)(chart.X, chart.Y)
    return val, hx * chart.X_phi + hy * chart.Y_phi, hx * chart.X_E + hy * chart.Y_E


def _forcing_power(sys, chart, k):
    """``(F_k dH0/dy, d/dE of it, F_k)`` on the lattice, or zeros."""
    fk = sys.f(k)
    if fk is None:
        z = np.zeros_like(chart.X)
        return z, z, z
    X, Y = chart.X, chart.Y
    d = sys.h0_derivs
    F = sys.compiled(fk)(X, Y)
    fx, fy = _grad(sys, fk, X, Y)
    hy = sys.compiled(d["y"])(X, Y)
    hxy = sys.compiled(d["xy"])(X, Y)
    hyy = sys.compiled(d["yy"])(X, Y)
    p = F * hy
    dp = (fx * hy + F * hxy) * chart.X_E + (fy * hy + F * hyy) * chart.Y_E
    return p, dp, F


def compute_fk(sys: PerturbedSystem, chart: ActionAngleChart, k: int) -> np.ndarray:
    _, hphi, _ = _h_derivs(sys, chart, k)
    p, _, _ = _forcing_power(sys, chart, k)
    return -chart.omega[:, None] * hphi + p


def compute_gk(sys: PerturbedSystem, chart: ActionAngleChart, k: int) -> np.ndarray:
    _, _, hE = _h_derivs(sys, chart, k)
    _, _, F = _forcing_power(sys, chart, k)
    return chart.omega[:, None] * (hE - F * chart.X_E)


def loop_integral(sys: PerturbedSystem, F, E: float, n: int = 96) -> float:
    """Orbit average of ``F dH0/dy`` computed as ``(1/T) oint F dx``.

    The contour is parametrised by ``x`` rather than by time, so this is an
    independent check on the phase-average route.
    """
    if F is None or (not callable(F) and ex.is_zero(F)):
        return 0.0
    fn = F if callable(F) else sys.compiled(F)
    circ, T = circulation(sys, fn, E, n)
    return circ / T


# ---------------------------------------------------------------------------
# Order-by-order chain

@dataclass
class OrderData:
    k: int
    f: np.ndarray
    g: np.ndarray
    z: np.ndarray
    lam: np.ndarray
    dlam: np.ndarray
    v: np.ndarray
    v_phi: np.ndarray
    v_E: np.ndarray
    scale: np.ndarray
    is_zero: bool
    approximate: bool = False


@dataclass
class LeadingFit:
    k: int
    power: float
    coeff: float
    r2: float
    integer: bool = True

    def as_dict(self):
        return {"k": self.k, "power": self.power, "coeff": self.coeff, "r2": self.r2}


def fit_leading(energies, curve, k: int = 0, decades: float = 1.0) -> LeadingFit:
    """Leading power law ``c E^p`` of a sampled curve near ``E = 0``.

    The slope of ``log|curve|`` against ``log E`` over the lowest decade gives
    ``p``; when ``p`` is within 0.1 of an integer it is rounded and ``c`` is the
    intercept of a straight-line fit of ``curve/E^p`` against ``E``, which
    removes the first correction term.
    """
    e = np.asarray(energies, dtype=float)
    lam = np.asarray(curve, dtype=float)
    sel = e <= e[0] * 10.0 ** decades * (1 + 1e-9)
    if sel.sum() < 4:
        sel = np.arange(e.size) < 4
    ew, lw = e[sel], lam[sel]
    if np.any(lw == 0.0) or np.any(np.sign(lw) != np.sign(lw[0])):
        raise FitQualityError(f"order {k}: curve changes sign or vanishes on the fit window")
    lx, ly = np.log(ew), np.log(np.abs(lw))
    slope, icpt = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + icpt)
    sst = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / sst if sst > 0 else 1.0
    if r2 < MIN_R2:
        raise FitQualityError(f"order {k}: log-log fit has R^2={r2:.4f} < {MIN_R2}")
    p_int = round(slope)
    if abs(slope - p_int) <= ROUND_WINDOW:
        b1, b0 = np.polyfit(ew, lw / ew ** p_int, 1)
        return LeadingFit(k, float(p_int), float(b0), float(r2), True)
    warnings.warn(f"order {k}: leading power {slope:.3f} is not an integer", stacklevel=2)
    return LeadingFit(k, float(slope), float(np.sign(lw[0]) * math.exp(icpt)), float(r2), False)


@dataclass
class AveragedModel:
    """Lambda curves, correction fields and leading-order constants."""

    q: int
    energies: np.ndarray
    orders: dict[int, OrderData]
    leading: dict[int, LeadingFit]
    fit_errors: dict[int, str] = field(default_factory=dict)
    truncated_at: int | None = None
    n: int | None = None
    lam_n: float | None = None
    m: int | None = None
    s: float | None = None
    gamma_ms: float | None = None
    d: float | None = None
    gamma_nd: float | None = None
    note: str = ""

    @property
    def N(self) -> int:
        return max(self.orders, default=0)

    @property
    def lambda_curves(self) -> dict[int, np.ndarray]:
        return {k: o.lam for k, o in self.orders.items()}

    @property
    def v_tables(self) -> dict[int, np.ndarray]:
        return {k: o.v for k, o in self.orders.items()}

    @property
    def first_nonzero(self) -> int | None:
        return next((k for k, o in sorted(self.orders.items()) if not o.is_zero), None)

    @property
    def nu(self) -> float | None:
        if self.m is None or self.n is None or self.s is None or self.lam_n is None:
            return None
        return (self.n - self.m) / (self.q * (self.s - 1))

    @property
    def eta(self) -> float | None:
        if self.m is None or self.s is None:
            return None
        return (self.q - self.m) / (self.q * (self.s - 1))

    def transform(self, t: float) -> np.ndarray:
        """``V_N(E, phi, t)`` on the lattice."""
        out = np.repeat(self.energies[:, None], next(iter(self.orders.values())).v.shape[1], axis=1)
        for k, o in self.orders.items():
            out = out + t ** (-k / self.q) * o.v
        return out

    def bounds_time(self, sigma: float = 0.5) -> float:
        """A ``t0`` beyond which ``|V_N - E| <= sigma E`` on the lattice."""
        if not self.orders:
            return 1.0
        vmax = max(float(np.max(np.abs(o.v) / self.energies[:, None])) for o in self.orders.values())
        return max(1.0, (self.N * vmax / sigma) ** self.q)

    def lambda_rows(self):
        ks = sorted(self.orders)
        header = ["E"] + [f"Lambda_{k}" for k in ks]
        rows = [[E] + [self.orders[k].lam[i] for k in ks] for i, E in enumerate(self.energies)]
        return header, rows

    def leading_json(self) -> str:
        return json.dumps([self.leading[k].as_dict() for k in sorted(self.leading)], indent=2)


def _zrecursion(sys, q, orders: dict[int, OrderData], k: int, energies) -> tuple[np.ndarray, bool]:
    if k == 1:
        return None, False
    if k > EXPLICIT_Z_ORDER and not all(orders[j].is_zero for j in range(1, k)):
        raise UnsupportedOrderError(
            f"Z_{k} needs the higher Taylor terms of Lambda_j, only written out for k <= {EXPLICIT_Z_ORDER}")
    z = None

    def add(a):
        nonlocal z
        z = a if z is None else z + a

    for i in range(1, k):
        j = k - i
        oi, oj = orders[i], orders[j]
        add(-(oj.f * oi.v_E + oj.g * oi.v_phi))
    if k - q >= 1:
        add((k - q) / q * orders[k - q].v)
    if k == 2 and not orders[1].is_zero:
        add(orders[1].v * orders[1].dlam[:, None])
    if k == 3:
        o1, o2 = orders[1], orders[2]
        if not o1.is_zero:
            d2 = d_energy(o1.dlam, energies)
            add(o2.v * o1.dlam[:, None] + 0.5 * o1.v ** 2 * d2[:, None])
        if not o2.is_zero:
            add(o1.v * o2.dlam[:, None])
    return z, False


def z_recursion(sys: PerturbedSystem, chart: ActionAngleChart, model: AveragedModel, k: int) -> np.ndarray:
    """``Z_k`` on the lattice from the lower orders already stored in ``model``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > EXPLICIT_Z_ORDER:
        raise UnsupportedOrderError(f"Z_{k}: only orders 1..{EXPLICIT_Z_ORDER} are supported")
    missing = [j for j in range(1, k) if j not in model.orders]
    if missing:
        raise ValueError(f"lower orders {missing} not computed")
    z, _ = _zrecursion(sys, model.q, model.orders, k, chart.energies)
    return np.zeros_like(chart.X) if z is None else z


def lambda_k(fk, zk) -> np.ndarray:
    """``Lambda_k = <f_k> - <Z_k>``."""
    lam = average_phi(fk)
    return lam if zk is None else lam - average_phi(zk)


def _solve_order(sys, chart, orders, k, zero_tol):
    q = sys.q
    E = chart.energies
    om = chart.omega[:, None]
    f = compute_fk(sys, chart, k)
    g = compute_gk(sys, chart, k)
    hval, hphi, hE = _h_derivs(sys, chart, k)
    p, dp, _ = _forcing_power(sys, chart, k)
    z, approx = _zrecursion(sys, q, orders, k, E)
    approx = approx or any(orders[j].approximate for j in range(1, k))
    if k > EXPLICIT_Z_ORDER:
        approx = approx or not all(orders[j].is_zero for j in range(1, k))
    lam = lambda_k(f, z)
    zbar = np.zeros_like(E) if z is None else average_phi(z)
    scale = average_phi(np.abs(f)) + (0.0 if z is None else average_phi(np.abs(z)))
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(scale > 0, np.abs(lam) / scale, 0.0)
    is_zero = bool(np.all(rel <= zero_tol))
    dlam = average_phi(dp) - d_energy(zbar, E, zero_at_origin=True)

    # forcing part: exact E-derivative via the chart's variational fields
    pbar = average_phi(p)
    vF = periodic_antiderivative(pbar[:, None] - p) / om
    dvF = (-(chart.domega[:, None] / om) * vF
           + periodic_antiderivative(average_phi(dp)[:, None] - dp) / om)
    if z is None:
        vZ = np.zeros_like(vF)
        dvZ = vZ
        iz = vZ
    else:
        iz = z - zbar[:, None]
        vZ = periodic_antiderivative(iz) / om
        dvZ = d_energy(vZ, E, zero_at_origin=True)
    rhs_mean = np.abs(average_phi(pbar[:, None] - p + iz))
    if np.any(rhs_mean > 1e-7 * np.maximum(scale, np.finfo(float).tiny)):
        raise ArithmeticError(f"order {k}: right-hand side has nonzero phase average")
    v = hval + vF + vZ
    v_phi = hphi + (pbar[:, None] - p + iz) / om
    v_E = hE + dvF + dvZ
    return OrderData(k, f, g, np.zeros_like(f) if z is None else z, lam, dlam,
                     v, v_phi, v_E, scale, is_zero, approx)


def build_model(sys: PerturbedSystem, chart: ActionAngleChart, N: int | None = None,
                zero_tol: float = ZERO_TOL) -> AveragedModel:
    """Run the chain through order ``N`` (default: highest perturbation order)."""
    N = sys.max_order if N is None else int(N)
    orders: dict[int, OrderData] = {}
    truncated = None
    for k in range(1, N + 1):
        if k > EXPLICIT_Z_ORDER and not all(orders[j].is_zero for j in range(1, k)):
            truncated = k
            break
        orders[k] = _solve_order(sys, chart, orders, k, zero_tol)
    model = AveragedModel(sys.q, chart.energies.copy(), orders, {}, truncated_at=truncated)
    for k, o in orders.items():
        if o.is_zero:
            continue
        try:
            model.leading[k] = fit_leading(chart.energies, o.lam, k)
        except FitQualityError as exc:
            model.fit_errors[k] = str(exc)
    _derive_constants(model)
    return model


def _derive_constants(model: AveragedModel):
    nz = [k for k, o in sorted(model.orders.items()) if not o.is_zero]
    if not nz:
        model.note = f"all Lambda_k vanish up to N={model.N}"
        return
    k1 = nz[0]
    if k1 not in model.leading:
        model.note = model.fit_errors.get(k1, "")
        return
    f1 = model.leading[k1]
    if f1.integer and f1.power == 1:
        model.n, model.lam_n = k1, f1.coeff
        return
    if not f1.integer or f1.power < 2:
        model.note = f"order {k1}: leading power {f1.power:g} is not an integer >= 1"
        return
    model.m, model.s, model.gamma_ms = k1, f1.power, f1.coeff
    if len(nz) < 2:
        model.note = f"no nonzero order after m={k1} up to N={model.N}"
        return
    k2 = nz[1]
    if k2 not in model.leading:
        model.note = model.fit_errors.get(k2, "")
        return
    f2 = model.leading[k2]
    model.n = k2
    if not f2.integer:
        model.note = f"order {k2}: leading power {f2.power:g} is not an integer"
    elif f2.power == 1:
        model.lam_n = f2.coeff
    else:
        model.d, model.gamma_nd = f2.power, f2.coeff
