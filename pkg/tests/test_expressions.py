import numpy as np
import pytest

from reflecta.expressions import Expression, ExpressionError


def test_basic_arithmetic():
    e = Expression("2*x + t**2 - 1")
    assert e(t=3.0, x=0.5) == pytest.approx(9.0)


def test_vectorized_over_arrays():
    e = Expression("sin(pi*x)*exp(-t)")
    x = np.linspace(0, 1, 11)
    out = e(t=0.5, x=x)
    assert np.allclose(out, np.sin(np.pi * x) * np.exp(-0.5))


def test_x1_aliases_x():
    e = Expression("x1 + x2")
    assert e(x1=1.0, x2=2.0) == 3.0
    e2 = Expression("x + 1")
    assert e2(x1=2.0) == 3.0


def test_step_and_where():
    e = Expression("0.25*step(x - 0.25)*step(0.75 - x)")
    xs = np.array([0.1, 0.5, 0.9])
    assert np.allclose(e(x=xs), [0.0, 0.25, 0.0])
    w = Expression("where(x - 0.5, 1, -1)")
    assert np.allclose(w(x=xs), [-1.0, -1.0, 1.0])


def test_variables_recorded():
    e = Expression("sin(pi*x) * (1 + 0*t)")
    assert e.variables == {"x", "t"}
    assert Expression("3.0").variables == set()


@pytest.mark.parametrize("bad", [
    "__import__('os')",
    "x.real",
    "lambda: 1",
    "[1,2]",
    "foo(x)",
    "x if t else y",
    "unknown_name",
    "'str'",
])
def test_rejects_outside_grammar(bad):
    with pytest.raises(ExpressionError):
        Expression(bad)
