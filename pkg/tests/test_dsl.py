import math

import pytest
from hypothesis import given

from pdflow import symbols as sy
from pdflow.dsl import ParseError, parse_expr, parse_matrix, print_expr, print_matrix
from pdflow.symbols import (
    MatrixSymbol, bracket, const, cos_of, glue, mul, pow_int, sin_of,
    var_t, var_x, var_xi,
)

from strategies import symbol_exprs


def test_parse_atoms():
    assert parse_expr("x1") is var_x(0)
    assert parse_expr("xi2") is var_xi(1)
    assert parse_expr("t") is var_t()
    assert parse_expr("i") is const(1j)
    assert parse_expr("pi") is const(math.pi)
    assert parse_expr("2.5e-1") is const(0.25)


def test_parse_precedence():
    e = parse_expr("x1 + 2*xi1^2")
    assert e is sy.add(var_x(0), mul(const(2), pow_int(var_xi(0), 2)))
    assert parse_expr("2*x1 + 3") is sy.add(const(3), mul(const(2), var_x(0)))
    assert parse_expr("-x1^2") is mul(const(-1), pow_int(var_x(0), 2))
    assert parse_expr("(-x1)^2") is pow_int(mul(const(-1), var_x(0)), 2)
    assert parse_expr("1/bracket(2)") is bracket(-2)
    assert parse_expr("sin(x1)^-2") is pow_int(sin_of(var_x(0)), -2)


def test_parse_functions():
    assert parse_expr("sin(2*x1)") is sin_of(mul(const(2), var_x(0)))
    assert parse_expr("bracket(-1.5)") is bracket(-1.5)
    assert parse_expr("glue(2, xi1)") is glue(var_xi(0), 2)


def test_parse_complex_constants():
    assert parse_expr("3*i") is const(3j)
    assert parse_expr("(2 - 3*i)") is const(2 - 3j)
    assert parse_expr("i*i") is const(-1)


def test_parse_errors():
    for bad in ["x", "xi", "x0", "2 +", "sin x1", "(x1", "x1)", "foo(1)",
                "bracket(x1)", "x1 @ 2", "glue(0.5, x1)"]:
        with pytest.raises(ParseError):
            parse_expr(bad)


def test_print_canonical_forms():
    assert print_expr(sy.add(const(-3), var_x(0))) == "-3 + x1"
    assert print_expr(mul(const(-1), var_x(0))) == "-x1"
    assert print_expr(sy.add(var_x(0), mul(const(-1), sin_of(var_x(0))))) \
        == "x1 - sin(x1)"
    assert print_expr(pow_int(sy.add(const(1), var_xi(0)), -2)) == "(1 + xi1)^-2"
    assert print_expr(mul(const(2 + 1j), var_xi(0))) == "(2 + i)*xi1"
    assert print_expr(bracket(-1.5)) == "bracket(-1.5)"


def test_roundtrip_fixed_zoo():
    zoo = [
        var_x(0),
        const(-2.75),
        const(2 - 3j),
        sy.add(const(1), var_x(0), var_xi(0)),
        mul(const(-1), sin_of(mul(const(3), var_x(0)))),
        pow_int(sy.add(cos_of(var_x(0)), bracket(-2)), 3),
        glue(sy.add(const(1), mul(const(-1), var_xi(0))), 1),
        sy.smooth_step(var_xi(0)),
        sy.cutoff(1.0, 2.0),
        mul(sy.exp_of(cos_of(var_x(0))), bracket(-2), var_t()),
    ]
    for e in zoo:
        assert parse_expr(print_expr(e)) is e


@given(symbol_exprs)
def test_roundtrip_property(e):
    assert parse_expr(print_expr(e)) is e


def test_matrix_roundtrip():
    text = "[[sin(x1), bracket(-1)], [0, cos(2*x1)]]"
    rows = parse_matrix(text)
    m = MatrixSymbol(rows, d=1, order=0.0)
    printed = print_matrix(m)
    assert parse_matrix(printed) == m.entries
    assert printed == "[[sin(x1), bracket(-1)], [0, cos(2*x1)]]"


def test_matrix_scalar_shorthand():
    rows = parse_matrix("sin(x1) + 1")
    assert rows == ((sy.add(const(1), sin_of(var_x(0))),),)


def test_matrix_shape_errors():
    with pytest.raises(ValueError):
        MatrixSymbol(parse_matrix("[[x1 - x1, 1]]"), d=1)
