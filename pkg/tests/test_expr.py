import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asymham import expr as ex


def _leaf():
    return st.one_of(st.sampled_from(["x", "y", "a"]),
                     st.floats(0.1, 3.0).map(lambda v: f"{v:.3f}"))


def _node(children):
    unary = st.tuples(st.sampled_from(["sin", "cos", "exp", "-"]), children).map(
        lambda t: f"-({t[1]})" if t[0] == "-" else f"{t[0]}(({t[1]})/4)" if t[0] == "exp" else f"{t[0]}({t[1]})")
    binary = st.tuples(children, st.sampled_from(["+", "-", "*"]), children).map(lambda t: f"({t[0]}){t[1]}({t[2]})")
    quot = st.tuples(children, children).map(lambda t: f"({t[0]})/(2+cos({t[1]}))")
    pw = st.tuples(children, st.sampled_from(["2", "3"])).map(lambda t: f"({t[0]})^{t[1]}")
    return st.one_of(unary, binary, quot, pw)


EXPRS = st.recursive(_leaf(), _node, max_leaves=8)
POINTS = st.tuples(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
ENV = {"a": 0.7}


@settings(max_examples=1000, deadline=None)
@given(EXPRS, POINTS, st.sampled_from(["x", "y"]))
def test_derivative_matches_central_difference(src, pt, var):
    e = ex.parse(src)
    d = ex.differentiate(e, var)
    x, y = pt
    h = 1e-5 * max(1.0, abs(pt[0 if var == "x" else 1]))
    if var == "x":
        fp, fm = ex.evaluate(e, x + h, y, ENV), ex.evaluate(e, x - h, y, ENV)
    else:
        fp, fm = ex.evaluate(e, x, y + h, ENV), ex.evaluate(e, x, y - h, ENV)
    fd = (fp - fm) / (2 * h)
    exact = ex.evaluate(d, x, y, ENV)
    # rounding in the difference quotient itself is about eps*|f|/h
    noise = 1e-10 * max(abs(fp), abs(fm))
    tol = 1e-6 * abs(exact) if abs(exact) > 1e-3 else 1e-8
    assert abs(fd - exact) <= tol + noise


@settings(max_examples=300, deadline=None)
@given(EXPRS, POINTS)
def test_round_trip_evaluates_identically(src, pt):
    e = ex.parse(src)
    back = ex.parse(ex.to_source(e))
    a, b = ex.evaluate(e, *pt, ENV), ex.evaluate(back, *pt, ENV)
    assert a == pytest.approx(b, rel=1e-14, abs=1e-14)


@settings(max_examples=2000, deadline=None)
@given(st.binary(max_size=64))
def test_parser_never_crashes_on_bytes(data):
    try:
        ex.parse(data)
    except ex.ParseError:
        pass


@settings(max_examples=500, deadline=None)
@given(st.text(alphabet="xy+-*/^()0123456789.abcsinoe ", max_size=40))
def test_parser_never_crashes_on_text(src):
    try:
        ex.parse(src)
    except ex.ParseError:
        pass


@settings(max_examples=300, deadline=None)
@given(EXPRS)
def test_unbalanced_parentheses_rejected(src):
    for bad in ("(" + src, src + ")", "(" + src + "))"):
        with pytest.raises(ex.ParseError):
            ex.parse(bad)


def test_precedence():
    assert ex.parse("a+b*c") == ex.parse("a+(b*c)")
    assert ex.parse("a-b-c") == ex.parse("(a-b)-c")
    assert ex.parse("a/b/c") == ex.parse("(a/b)/c")
    assert ex.parse("a^b^c") == ex.parse("a^(b^c)")
    assert ex.evaluate(ex.parse("-x^2"), 3, 0) == -9.0
    assert ex.evaluate(ex.parse("2*-x"), 3, 0) == -6.0


def test_examples():
    pend = ex.parse("1 - cos(x) + y^2/2")
    assert ex.evaluate(pend, 0, 0) == 0.0
    assert ex.evaluate(pend, math.pi, 0) == pytest.approx(2.0, abs=1e-15)
    assert ex.parse("x") == ex.Var("x")
    f4 = ex.parse("y*(lam + kap*x - mu*(x^2+y^2)/2)")
    assert ex.free_params(f4) == {"lam", "kap", "mu"}
    with pytest.raises(ex.ParseError):
        ex.parse("x^2+y^2)/2")


def test_textbook_derivatives():
    d = ex.differentiate(ex.parse("1-cos(x)+y^2/2"), "x")
    for x in np.linspace(-2, 2, 9):
        assert ex.evaluate(d, x, 0.3) == pytest.approx(math.sin(x), abs=1e-15)
    d = ex.differentiate(ex.parse("(x^2+y^2)/2"), "y")
    assert ex.evaluate(d, 0.4, 0.9) == pytest.approx(0.9)
    d = ex.differentiate(ex.parse("x^2*y"), "x")
    assert ex.evaluate(d, 0.3, 0.7) == pytest.approx(2 * 0.3 * 0.7, rel=1e-14)


def test_errors():
    with pytest.raises(ex.ParseError) as info:
        ex.parse("x + ")
    assert info.value.offset == 4
    with pytest.raises(ex.ParseError):
        ex.parse("foo(x)")
    with pytest.raises(ex.EvalError):
        ex.evaluate(ex.parse("lam*x"), 1, 1)
    with pytest.raises(ex.EvalError):
        ex.evaluate(ex.parse("log(x)"), -1, 0)
    with pytest.raises(ex.EvalError):
        ex.evaluate(ex.parse("x^0.5"), -1, 0)


def test_compiled_backends_agree():
    e = ex.parse("sqrt(1+x^2)*exp(-y)+(1+abs(x))^1.5-log(2+sin(y))")
    xs, ys = np.linspace(-1, 1, 7), np.linspace(-0.5, 2, 7)
    vec = ex.compile_expr(e, {}, "numpy")(xs, ys)
    sca = ex.compile_expr(e, {}, "math")
    for x, y, v in zip(xs, ys, vec):
        assert sca(x, y) == pytest.approx(v, rel=1e-14)
        assert ex.evaluate(e, x, y) == pytest.approx(v, rel=1e-14)
