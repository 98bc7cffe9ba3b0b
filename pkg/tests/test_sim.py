import math

import numpy as np
import pytest

from asymham import classify as cl
from asymham import hamcore as hc
from asymham import sim
from asymham.config import example_config


def synthetic(t, E, x=None):
    x = np.sqrt(2 * E) if x is None else x
    return sim.Trajectory(t, x, np.zeros_like(t), E)


def test_conservative_energy_constant():
    sys = hc.PerturbedSystem.from_strings("1-cos(x)+y^2/2", 1, 1.5)
    tr = sim.integrate(sys, -1.0, 0.2, 1.0, 1e3, 1e-12)
    assert np.max(np.abs(tr.E - tr.E[0])) / tr.E[0] <= 1e-9


def test_power_law_fit_on_synthetic_data():
    t = np.geomspace(1, 1e4, 2000)
    fit = sim.fit_rate(synthetic(t, 0.3 / t), "PowerLaw")
    assert fit.exponent == pytest.approx(-1.0, abs=1e-9) and fit.r2 > 0.999999
    assert fit.window == pytest.approx((1e3, 1e4))
    # oscillation riding on the decay does not move the exponent much
    E = 0.3 / t * (1 + 0.1 * np.cos(t))
    assert sim.fit_rate(synthetic(t, E), "PowerLaw").exponent == pytest.approx(-1.0, abs=0.02)


def test_stretched_exponential_fit_on_synthetic_data():
    t = np.geomspace(1, 1e4, 4000)
    E = 0.2 * np.exp(-0.4 * t ** 0.5)
    pred = cl.RatePrediction("StretchedExponential", 0.5, 0.8)
    fit = sim.fit_rate(synthetic(t, E), pred)
    assert fit.exponent == pytest.approx(-0.4, rel=1e-6) and fit.r2 > 0.9999
    assert np.all(E[(t >= fit.window[0]) & (t <= fit.window[1])] > sim.E_FLOOR)


def test_envelope_exponent_on_synthetic_data():
    t = np.geomspace(1, 1e4, 100000)
    x = t ** 0.25 * np.cos(t)
    fit = sim.envelope_exponent(synthetic(t, x ** 2 / 2, x), window=(1e2, 1e4))
    assert fit.exponent == pytest.approx(0.25, abs=0.01)


def test_weighted_instability_check_synthetic():
    t = np.geomspace(1, 1e4, 5000)
    ok, tc = sim.weighted_instability_check(synthetic(t, 1e-4 * t ** -0.25), 0.5)
    assert ok and tc is not None
    ok, _ = sim.weighted_instability_check(synthetic(t, 1e-4 * t ** -1.0), 0.5)
    assert ok is False
    assert sim.weighted_instability_check(synthetic(t[:100], t[:100]), 0.5)[0] is None


def test_time_reversibility_of_limiting_flow():
    sys = hc.PerturbedSystem.from_strings("1-cos(x)+y^2/2", 1, 1.5)
    x1, y1 = sim.propagate(sys, -0.8, 0.3, 1.0, 51.0, 1e-12)
    x0, y0 = sim.propagate(sys, x1, y1, 51.0, 1.0, 1e-12)
    assert math.hypot(x0 + 0.8, y0 - 0.3) <= 1e-8


def _errors(tols):
    sys = example_config("ex1").system()
    ref = sim.integrate(sys, 0.5, 0.0, 1.0, 100.0, 1e-13, n_samples=400)
    out = []
    for tol in tols:
        tr = sim.integrate(sys, 0.5, 0.0, 1.0, 100.0, tol, n_samples=400)
        out.append(float(np.max(np.hypot(tr.x - ref.x, tr.y - ref.y))))
    return out


def test_error_tracks_tolerance_decade():
    e1, e2 = _errors([1e-8, 1e-9])
    assert e2 * 4 <= e1


def test_halving_tolerance_reduces_error_fourfold():
    e1, e2 = _errors([1e-8, 5e-9])
    assert e2 * 4 <= e1, f"halving tol gave only {e1 / e2:.2f}x"


def test_monotone_envelope_for_lemma1_stable_case():
    sys = example_config("ex1", {"n": 4, "lam": -1.0}).system()
    tr = sim.integrate(sys, 0.5, 0.0, 1.0, 1e3, 1e-10, n_samples=4000)
    t, E = tr.t, tr.E
    # running sup over [2t, end]
    suffix = np.maximum.accumulate(E[::-1])[::-1]
    idx = np.searchsorted(t, 2 * t[t <= t[-1] / 2])
    env = suffix[idx]
    assert np.all(np.diff(env) <= 0)
    assert E[-1] < E[0]


def test_blowup_is_reported_not_raised():
    sys = hc.PerturbedSystem.from_strings("(x^2+y^2)/2", 1, 1.0, f={1: "y^3"})
    tr = sim.integrate(sys, -1.0, 0.0, 1.0, 1e4, 1e-9)
    assert tr.blowup or tr.escaped or tr.E[-1] > tr.E[0]
    tr = sim.integrate(sys, -1.0, 0.0, 1.0, 1e4, 1e-9, e_stop=10.0)
    assert tr.escaped and tr.E[-1] == pytest.approx(10.0, rel=1e-6)


def test_stretched_exponential_verdict_verifies():
    cfg = example_config("ex1", {"n": 2, "lam": -1.0})
    sys = cfg.system()
    verdict = cl.classify_leading(4, 2, -1.0)
    rep = sim.verify(sys, verdict, [(0.5, 0.0)], t_end=1e3)
    assert rep.passed
    r = rep.results[0]
    assert r.measured < 0


def test_integrate_argument_checks():
    sys = hc.PerturbedSystem.from_strings("(x^2+y^2)/2", 1, 1.0)
    with pytest.raises(ValueError):
        sim.integrate(sys, 1, 0, 0.0, 10)
    with pytest.raises(ValueError):
        sim.integrate(sys, 1, 0, 10, 5)
