import pytest
from hypothesis import given
from hypothesis import strategies as st

from voxlo.expressions import Expression, ExpressionError, eval_expression


def test_precedence():
    assert eval_expression("1+2*3") == 7.0


def test_parentheses():
    assert eval_expression("(1+2)*3") == 9.0


def test_unary_minus():
    assert eval_expression("-4+1") == -3.0
    assert eval_expression("2*-3") == -6.0
    assert eval_expression("--2") == 2.0


def test_division():
    assert eval_expression("7/2") == 3.5


def test_division_by_zero():
    with pytest.raises(ExpressionError, match="division by zero"):
        eval_expression("1/(2-2)")


def test_variables():
    assert eval_expression("a*b+c", {"a": 2, "b": 3, "c": 4}) == 10.0


def test_unbound_variable_named():
    with pytest.raises(ExpressionError, match="unbound variable a"):
        eval_expression("max(a,b)", {"b": 1.0})


def test_clamp_max_range():
    # 1.5% of a 100 m sensor range, clamped into [0.5, 1.0]
    e = Expression("clamp(0.015*max_range, 0.5, 1.0)")
    assert e({"max_range": 100.0}) == 1.0
    assert e({"max_range": 50.0}) == 0.75
    assert e({"max_range": 10.0}) == 0.5


def test_functions():
    assert eval_expression("min(3, 5)") == 3.0
    assert eval_expression("max(3, 5, 7)") == 7.0
    assert eval_expression("abs(-2.5)") == 2.5
    assert eval_expression("floor(2.7)") == 2.0
    assert eval_expression("ceil(2.2)") == 3.0


def test_scientific_literals():
    assert eval_expression("1e-4") == 1e-4
    assert eval_expression("2.5e2") == 250.0


def test_numeric_passthrough():
    assert eval_expression(4) == 4.0
    assert eval_expression(0.25) == 0.25


def test_parse_errors():
    for bad in ("1+", "foo(1)", "(1", "1 2", "$x"):
        with pytest.raises(ExpressionError):
            Expression(bad).evaluate({})


def test_free_variables():
    e = Expression("clamp(0.02*r, 0.1, 2.0)*(1 + 0.5*min(w, 2))")
    assert e.free_variables == frozenset({"r", "w"})


@given(
    st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
    st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
)
def test_addition_matches_python(a, b):
    assert eval_expression("a+b", {"a": a, "b": b}) == a + b


@given(st.floats(min_value=-100, max_value=100), st.floats(min_value=-100, max_value=100))
def test_clamp_is_sorted(x, lo):
    hi = lo + 10.0
    val = eval_expression("clamp(x, lo, hi)", {"x": x, "lo": lo, "hi": hi})
    assert lo <= val <= hi


def test_deterministic_reparse():
    e1 = Expression("max(a, 2)*3 - 1")
    e2 = Expression("max(a, 2)*3 - 1")
    for a in (-5.0, 0.0, 9.5):
        assert e1({"a": a}) == e2({"a": a})
