"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""

import itertools
import math
import time

import numpy as np
import pytest

from asymham import averaging as av
from asymham import classify as cl
from asymham import cli
from asymham import expr as ex
from asymham import hamcore as hc
from asymham import sim
from asymham.config import example_config

RATE_SAMPLES = 20_000


def report(capsys, label, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    assert ok, f"{label}: {detail}"


def analyse(name, **params):
    cfg = example_config(name, params)
    sys = cfg.system()
    chart = hc.build_chart(sys, cfg.n_energies, cfg.n_phi)
    model = av.build_model(sys, chart, cfg.order)
    return sys, chart, model, cl.classify(model)


# 1 ---------------------------------------------------------------------------

def test_c1_wkb_envelope_rates(capsys):
    start = time.perf_counter()
    got = {}
    for gamma, kappa in ((-0.5, 1.0), (0.5, 1.0), (-0.5, 1.5)):
        sys = example_config("wkb", {"gamma": gamma, "kappa": kappa}).system()
        tr = sim.integrate(sys, -1.0, 0.0, 1.0, 1e4, 1e-10, n_samples=RATE_SAMPLES)
        got[(gamma, kappa)] = sim.envelope_exponent(tr, window=(1e2, 1e4)).exponent
    elapsed = time.perf_counter() - start
    ok = (abs(got[(-0.5, 1.0)] + 0.25) <= 0.05 and abs(got[(0.5, 1.0)] - 0.25) <= 0.05
          and abs(got[(-0.5, 1.5)]) <= 0.02 and elapsed < 30)
    detail = ", ".join(f"gamma={g:+g} kappa={k:g}: {v:+.4f}" for (g, k), v in got.items())
    report(capsys, "C1 WKB envelope exponents", ok, f"{detail}; {elapsed:.1f}s")


# 2 ---------------------------------------------------------------------------

def test_c2_theorem2_coefficient(capsys):
    start = time.perf_counter()
    base = hc.PerturbedSystem.from_strings("(x^2+y^2)/2", 1, 1.0)
    chart = hc.build_chart(base)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for a, b in rng.uniform(-2, 2, size=(20, 2)):
        sys = hc.PerturbedSystem.from_strings("(x^2+y^2)/2", 1, 1.0, f={1: "y*(a*x^2+b*y^2)"},
                                              params={"a": a, "b": b})
        lam = av.build_model(sys, chart).orders[1].lam
        fit = av.fit_leading(chart.energies, lam, 1)
        err = abs(fit.coeff - (a + 3 * b) / 2) if fit.power == 2 else math.inf
        worst = max(worst, err)
    elapsed = time.perf_counter() - start
    report(capsys, "C2 gamma=(alpha+3beta)/2", worst <= 2e-3 and elapsed < 60,
           f"max error {worst:.2e} over 20 pairs; {elapsed:.1f}s")


# 3 ---------------------------------------------------------------------------

EX1_CELLS = list(itertools.product((2, 4, 6), (-1.0, 0.3)))


@pytest.mark.parametrize("n, lam", EX1_CELLS)
def test_c3_example1_panel(capsys, n, lam):
    sys, chart, model, verdict = analyse("ex1", n=n, lam=lam)
    tr = sim.integrate(sys, 0.5, 0.0, 1.0, 1e4, 1e-10, e_stop=10 * sys.e0)
    e1, e_end = float(tr.E[0]), float(tr.E[-1])
    if lam < 0 and n == 2:
        fit = sim.fit_rate(tr, verdict.rate, n / 4)
        behaviour = fit.exponent is not None and fit.exponent < 0
        what = f"stretched-exponential slope {fit.exponent:.4g}"
    elif lam < 0 and n == 4:
        fit = sim.fit_rate(tr, "PowerLaw")
        behaviour = abs(fit.exponent + 1) <= 0.15
        what = f"power-law exponent {fit.exponent:.4f}"
    elif lam < 0:
        behaviour = not tr.blowup and float(np.max(tr.E)) <= 2 * e1
        what = f"bounded, max E/E1={np.max(tr.E) / e1:.4g}"
    else:
        behaviour = tr.blowup or tr.escaped or e_end > e1
        what = f"E_end/E1={e_end / e1:.4g}{' (escaped)' if tr.escaped else ''}"
    rep = sim.verify(sys, verdict, [(0.5, 0.0)], model=model, t_end=1e4)
    ok = behaviour and rep.passed
    report(capsys, f"C3 ex1 n/q={n}/4 lambda={lam:+g}", ok, f"{verdict.regime}; {what}; verify "
           f"{'PASS' if rep.passed else 'FAIL'}")


# 4 ---------------------------------------------------------------------------

def test_c4a_example2_polynomially_stable(capsys):
    sys, chart, model, verdict = analyse("ex2", alpha=-2.0, lam=0.4)
    tr = sim.integrate(sys, 0.5, 0.0, 1.0, 1e4, 1e-10, n_samples=RATE_SAMPLES)
    fit = sim.fit_rate(tr, "PowerLaw")
    ok = verdict.regime == "PolynomiallyStable" and abs(fit.exponent + 0.5) <= 0.1
    report(capsys, "C4a ex2 alpha=-2", ok, f"{verdict.regime}, E exponent {fit.exponent:.4f}")


def test_c4b_example2_weighted_instability(capsys):
    nu = 0.5  # (n - m) / (q (s - 1)) with m=1, n=2, q=2, s=2
    sys, chart, model, verdict = analyse("ex2", alpha=0.0, lam=0.4)
    # E grows like t^0.4 here; start low enough to stay inside the separatrix up to t=1e4
    tr = sim.integrate(sys, *sim.seed_at_energy(sys, 1e-3), 1.0, 1e4, 1e-10, n_samples=RATE_SAMPLES)
    check, t_cross = sim.weighted_instability_check(tr, nu)
    env = sim.envelope_exponent(tr, window=(1e2, 1e4)).exponent
    ok = bool(check) and abs(env - nu / 2) <= 0.05
    report(capsys, "C4b ex2 alpha=0", ok,
           f"{verdict.regime}; weighted check {check} (t={t_cross}); x-envelope exponent {env:.4f} vs 0.25")


# 5 ---------------------------------------------------------------------------

def test_c5a_example3_stable(capsys):
    sys, chart, model, verdict = analyse("ex3", delta=-0.3, alpha=-0.3)
    tr = sim.integrate(sys, *sim.seed_at_energy(sys, 1e-2), 1.0, 1e4, 1e-10)
    ok = verdict.regime == "Stable" and tr.E[-1] < tr.E[0]
    report(capsys, "C5a ex3 (-0.3,-0.3)", ok, f"{verdict.regime}; E(1)={tr.E[0]:.4g} E(1e4)={tr.E[-1]:.6g}")


def test_c5b_example3_unstable(capsys):
    sys, chart, model, verdict = analyse("ex3", delta=0.3, alpha=0.3)
    tr = sim.integrate(sys, *sim.seed_at_energy(sys, 1e-2), 1.0, 1e4, 1e-10, e_stop=10 * sys.e0)
    growth = tr.E[-1] / tr.E[0]
    ok = verdict.regime == "Unstable" and (growth >= 10 or tr.blowup or tr.escaped)
    report(capsys, "C5b ex3 (+0.3,+0.3)", ok, f"{verdict.regime}; E(1e4)/E(1)={growth:.4g} (needs >= 10)")


# 6 ---------------------------------------------------------------------------

def test_c6a_example4_cycle_energy(capsys):
    sys, chart, model, verdict = analyse("ex4", lam=0.5, mu=0.5, kap=0.0)
    cs = cl.find_cycles(model)
    ok = len(cs) == 1 and abs(cs.cycles[0].energy - 1) <= 1e-6 and cs.cycles[0].stable
    report(capsys, "C6a ex4 cycle", ok, ", ".join(f"V_c={c.energy:.12g} {c.stability}" for c in cs))


def test_c6b_example4_convergence(capsys):
    sys = example_config("ex4").system()
    finals = {}
    for e1 in (0.2, 0.9, 1.8):
        tr = sim.integrate(sys, *sim.seed_at_energy(sys, e1), 1.0, 1e3, 1e-10)
        finals[e1] = float(tr.E[-1])
    ok = all(abs(v - 1) < 0.02 for v in finals.values())
    report(capsys, "C6b ex4 seeds reach |E-1|<0.02 by t=1e3", ok,
           ", ".join(f"E(1)={k:g} -> {v:.4f}" for k, v in finals.items()))


def test_c6c_example4_unstable_cycle(capsys):
    sys = example_config("ex4", {"lam": -0.5, "mu": -0.5}).system()
    out = {}
    for e1 in (0.2, 0.9, 1.1, 1.8):
        tr = sim.integrate(sys, *sim.seed_at_energy(sys, e1), 1.0, 1e3, 1e-10, e_stop=10 * sys.e0)
        out[e1] = (float(tr.E[-1]), tr.escaped or tr.blowup)
    inner = all(out[e][0] < e for e in (0.2, 0.9))
    outer = all(out[e][1] or out[e][0] > e for e in (1.1, 1.8))
    report(capsys, "C6c ex4 lambda=mu=-0.5", inner and outer,
           ", ".join(f"E(1)={k:g} -> {v[0]:.4g}{' escaped' if v[1] else ''}" for k, v in out.items()))


# 7 ---------------------------------------------------------------------------

def _random_expr(rng, depth=0):
    if depth > 2 or rng.random() < 0.3:
        return str(rng.choice(["x", "y", f"{rng.uniform(0.1, 2):.3f}"]))
    kind = rng.integers(0, 5)
    a = _random_expr(rng, depth + 1)
    if kind == 0:
        return f"{rng.choice(['sin', 'cos'])}({a})"
    if kind == 1:
        return f"exp(({a})/4)"
    if kind == 2:
        return f"({a})^{rng.integers(2, 4)}"
    b = _random_expr(rng, depth + 1)
    return f"({a}){rng.choice(['+', '-', '*'])}({b})" if kind == 3 else f"({a})/(2+cos({b}))"


def test_c7_property_suites(capsys, tmp_path):
    rng = np.random.default_rng(11)
    results = {}

    crashes = 0
    for _ in range(3000):
        data = rng.integers(0, 256, size=rng.integers(0, 40), dtype=np.uint8).tobytes()
        try:
            ex.parse(data)
        except ex.ParseError:
            pass
        except Exception:
            crashes += 1
    results["parser fuzz"] = crashes == 0

    worst = 0.0
    for _ in range(1000):
        e = ex.parse(_random_expr(rng))
        var = str(rng.choice(["x", "y"]))
        x, y = rng.uniform(-1.5, 1.5, 2)
        d = ex.evaluate(ex.differentiate(e, var), x, y)
        h = 1e-5
        dx, dy = (h, 0) if var == "x" else (0, h)
        fp, fm = ex.evaluate(e, x + dx, y + dy), ex.evaluate(e, x - dx, y - dy)
        fd = (fp - fm) / (2 * h)
        tol = (1e-6 * abs(d) if abs(d) > 1e-3 else 1e-8) + 1e-10 * max(abs(fp), abs(fm))
        worst = max(worst, abs(fd - d) / tol)
    results["derivative vs FD"] = worst <= 1

    sys = example_config("ex1").system()
    chart = hc.build_chart(sys)
    results["chart energy 1e-7"] = chart.energy_error(sys) <= 1e-7
    results["Jacobian 1e-4"] = chart.jacobian_defect() <= 1e-4

    phi = chart.phi
    field = 0.7 + np.cos(3 * phi) - 0.2 * np.sin(17 * phi)
    results["averagePhi 1e-10"] = abs(av.average_phi(field) - 0.7) <= 1e-10

    total = True
    for q, n, m, s, d in itertools.product(range(1, 5), range(1, 5), range(1, 5), range(2, 5), range(2, 5)):
        for lam, g, gd in itertools.product((-1.0, 0.0, 1.0), repeat=3):
            for args in ((q, n, lam), (q, n, lam, m, s, g), (q, n, None, m, s, g, d, gd)):
                v = cl.classify_leading(*args)
                total &= v.regime in cl.REGIMES
    results["classifier totality"] = total

    same = True
    for d in ("a", "b"):
        for cmd in ("lambda", "classify", "cycles"):
            same &= cli.main([cmd, "--example", "ex4", "--out", str(tmp_path / d)]) == 0
    for f in (tmp_path / "a").iterdir():
        same &= f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    results["artifact determinism"] = same

    report(capsys, "C7 property suites", all(results.values()),
           ", ".join(f"{k}: {'ok' if v else 'FAIL'}" for k, v in results.items()))


# 8 ---------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["ex1", "ex2", "ex3", "ex4"])
def test_c8_loop_integral_cross_oracle(capsys, name):
    sys, chart, model, _ = analyse(name)
    n = model.n if model.n is not None else model.first_nonzero
    fn = sys.f(n)
    phase = chart.omega * av.average_phi(sys.compiled(fn)(chart.X, chart.Y) * chart.X_phi)
    loop = np.array([av.loop_integral(sys, fn, float(E)) for E in chart.energies])
    rel = float(np.max(np.abs(phase - loop) / np.abs(loop)))
    report(capsys, f"C8 {name} two-route Lambda_{n}", rel <= 1e-6, f"max relative gap {rel:.2e}")
