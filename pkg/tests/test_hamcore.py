import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from asymham import hamcore as hc

PENDULUM = "1-cos(x)+y^2/2"
HARMONIC = "(x^2+y^2)/2"


def agm(a, b):
    for _ in range(40):
        a, b = 0.5 * (a + b), math.sqrt(a * b)
    return a


def pendulum_omega(E):
    k = math.sqrt(E / 2)
    K = math.pi / (2 * agm(1.0, math.sqrt(1 - k * k)))
    return math.pi / (2 * K)


@pytest.fixture(scope="module")
def harmonic():
    sys = hc.PerturbedSystem.from_strings(HARMONIC, 1, 2.0)
    return sys, hc.build_chart(sys, 12, 64)


@pytest.fixture(scope="module")
def pendulum():
    sys = hc.PerturbedSystem.from_strings(PENDULUM, 1, 1.5)
    return sys, hc.build_chart(sys, 24, 128)


def test_harmonic_closed_form(harmonic):
    sys, ch = harmonic
    amp = np.sqrt(2 * ch.energies)[:, None]
    assert np.max(np.abs(ch.omega - 1)) < 1e-8
    assert np.max(np.abs(ch.X + amp * np.cos(ch.phi))) < 1e-8
    assert np.max(np.abs(ch.Y - amp * np.sin(ch.phi))) < 1e-8
    X, Y, w = ch.lookup(0.5, 0.0)
    assert (X, Y, w) == pytest.approx((-1.0, 0.0, 1.0), abs=1e-8)


def test_pendulum_frequency_agm_oracle(pendulum):
    sys, ch = pendulum
    for E, w in zip(ch.energies, ch.omega):
        assert w == pytest.approx(pendulum_omega(E), rel=1e-6)
    one = hc.build_chart(sys, energies=[0.001, 0.5, 1.0], n_phi=64)
    assert abs(one.omega[0] - 1) <= 0.002
    assert one.omega[1] == pytest.approx(pendulum_omega(0.5), rel=1e-6)


def test_frequency_derivative_matches_difference(pendulum):
    sys, ch = pendulum
    fd = np.gradient(ch.omega, ch.energies)
    assert np.max(np.abs(fd[4:-4] - ch.domega[4:-4])) < 1e-3


def test_energy_conservation_and_closure(pendulum):
    sys, ch = pendulum
    assert ch.energy_error(sys) <= 1e-7
    assert np.all(ch.closure <= 1e-8)
    assert np.all(np.isfinite(ch.omega)) and np.all(ch.omega > 0)


def test_jacobian_identity_analytic_and_fd(pendulum):
    sys, ch = pendulum
    assert ch.jacobian_defect() <= 1e-4
    # finite differences on a tight energy stencil
    fine = hc.build_chart(sys, energies=[0.5 * (1 - 1e-4), 0.5, 0.5 * (1 + 1e-4)], n_phi=1024)
    dphi = fine.phi[1] - fine.phi[0]
    Xp = (np.roll(fine.X[1], -1) - np.roll(fine.X[1], 1)) / (2 * dphi)
    Yp = (np.roll(fine.Y[1], -1) - np.roll(fine.Y[1], 1)) / (2 * dphi)
    dE = fine.energies[2] - fine.energies[0]
    XE = (fine.X[2] - fine.X[0]) / dE
    YE = (fine.Y[2] - fine.Y[0]) / dE
    det = Xp * YE - Yp * XE
    assert np.max(np.abs(det - 1 / fine.omega[1])) <= 1e-4


def test_lookup_matches_direct_integration(pendulum):
    sys, ch = pendulum
    E = 0.5
    T = 2 * math.pi / pendulum_omega(E)
    x0, y0 = hc.locate_start(sys, E)
    sol = solve_ivp(sys.limiting_rhs(), (0, T / 4), [x0, y0], method="DOP853", rtol=1e-13, atol=1e-14)
    X, Y, _ = ch.lookup(E, math.pi / 2)
    assert X == pytest.approx(sol.y[0, -1], abs=1e-6)
    assert Y == pytest.approx(sol.y[1, -1], abs=1e-6)


def test_lookup_periodic(pendulum):
    sys, ch = pendulum
    for phi in (0.0, 0.3, 2.0, 5.5):
        assert ch.lookup(0.7, phi + 2 * math.pi) == pytest.approx(ch.lookup(0.7, phi), abs=1e-13)
    with pytest.raises(hc.ChartRangeError):
        ch.lookup(2.0, 0.0)


def test_locate_start():
    h = hc.PerturbedSystem.from_strings(HARMONIC, 1, 2.0)
    assert hc.locate_start(h, 0.5) == pytest.approx((-1.0, 0.0), abs=1e-14)
    p = hc.PerturbedSystem.from_strings(PENDULUM, 1, 2.0)
    x, y = hc.locate_start(p, 2 - 1e-9)
    assert y == 0.0 and x < -3.1
    assert 1 - math.cos(x) == pytest.approx(2 - 1e-9, abs=1e-12)
    with pytest.raises(hc.GeometryError):
        hc.locate_start(p, 0.0)


def test_circulation_period_matches_chart(pendulum):
    sys, ch = pendulum
    _, T = hc.circulation(sys, None, 0.9)
    assert T == pytest.approx(2 * math.pi / pendulum_omega(0.9), rel=1e-10)


def test_system_definition_errors():
    with pytest.raises(hc.SystemDefinitionError):
        hc.PerturbedSystem.from_strings(PENDULUM, 0, 1.0)
    with pytest.raises(hc.SystemDefinitionError):
        hc.PerturbedSystem.from_strings(PENDULUM, 2, 1.0, f={1: "lam"}, params={"lam": 1.0})
    with pytest.raises(hc.SystemDefinitionError):
        hc.PerturbedSystem.from_strings(PENDULUM, 2, 1.0, f={1: "lam*y"})
    with pytest.raises(hc.SystemDefinitionError):
        hc.PerturbedSystem.from_strings("1+x^2/2+y^2/2", 2, 1.0)
    with pytest.warns(UserWarning):
        hc.PerturbedSystem.from_strings("x^2+y^2", 1, 1.0)


def test_open_level_curve_is_geometry_error():
    sys = hc.PerturbedSystem.from_strings(PENDULUM, 1, 2.5)
    with pytest.raises(hc.GeometryError):
        hc.build_chart(sys, 8, 64)


def test_chart_argument_checks(harmonic):
    sys, _ = harmonic
    with pytest.raises(ValueError):
        hc.build_chart(sys, 8, 63)
    with pytest.raises(ValueError):
        hc.build_chart(sys, 4, 64)
