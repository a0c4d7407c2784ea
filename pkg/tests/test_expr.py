import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bsee_control.expr import Expr, ExprError, parse


def test_basic_evaluation():
    e = Expr("0.5 + 0.1*sin(W)*sin(pi*x)")
    assert e.variables == {"W", "x1"}
    assert e.uses_path and e.uses_space and not e.uses_time
    assert np.isclose(e(W=np.pi / 2, x1=0.5), 0.6)
    v = Expr("exp(-t) * x1 * x2")(t=0.0, x1=np.array([1.0, 2.0]), x2=3.0)
    assert np.allclose(v, [3.0, 6.0])
    assert np.isclose(Expr("-2**2")(), -4.0)
    assert np.isclose(Expr("abs(-3) + sqrt(4)")(), 5.0)


@pytest.mark.parametrize("src", ["__import__('os')", "x.real", "lambda: 1", "y + 1", "sin(1, 2)",
                                 "[1, 2]", "x if t else W", "True", "'a'", "open('f')", "a = 1"])
def test_rejects_outside_grammar(src):
    with pytest.raises(ExprError):
        Expr(src)


def test_parse_dispatch():
    assert parse(3) == 3.0
    assert isinstance(parse("t"), Expr)
    with pytest.raises(ExprError):
        parse(True)
    with pytest.raises(ExprError):
        parse({"a": 1})


_leaf = st.one_of(st.sampled_from(["t", "W", "x"]),
                  st.floats(0.1, 5, allow_nan=False).map(lambda v: f"{v:.3f}"))


def _combine(children):
    return st.one_of(
        st.tuples(children, st.sampled_from(["+", "-", "*"]), children).map(lambda a: f"({a[0]} {a[1]} {a[2]})"),
        st.tuples(st.sampled_from(["sin", "cos"]), children).map(lambda a: f"{a[0]}({a[1]})"))


@settings(max_examples=60, deadline=None)
@given(st.recursive(_leaf, _combine, max_leaves=8), st.floats(-2, 2), st.floats(-2, 2), st.floats(0, 1))
def test_matches_python_arithmetic(src, t, W, x):
    import math
    env = dict(t=t, W=W, x=x, sin=math.sin, cos=math.cos)
    expected = eval(src, {"__builtins__": {}}, env)
    assert np.isclose(float(Expr(src)(t=t, W=W, x1=x)), expected, rtol=1e-12, atol=1e-12)
