import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from pdflow import symbols as sy
from pdflow.symbols import (
    GridSpec, MatrixSymbol, OrderExceededError, bracket, check_class, const,
    cos_of, cutoff, diff_expr, differentiate, eval_expr, exp_of, glue, mul,
    pow_int, sample, sin_of, smooth_step, symbol_norm, var_t, var_x, var_xi,
)

from strategies import symbol_exprs

RNG = np.random.default_rng(1234)


def ev(e, x, xi, t=0.0):
    return np.asarray(eval_expr(e, [np.asarray(x)], [np.asarray(xi)], t))


# ---------------------------------------------------------------------------
# interning and constant folding

def test_interning_identity():
    a = sy.add(var_x(0), const(2))
    b = sy.add(var_x(0), const(2.0))
    assert a is b
    assert sy.mul(const(2), var_x(0), const(3)) is sy.mul(const(6), var_x(0))


def test_constant_folding():
    assert sy.add(const(2), const(3)) is const(5)
    assert sy.mul(const(0), var_x(0)) is const(0)
    assert pow_int(var_x(0), 1) is var_x(0)
    assert pow_int(bracket(-1), 2) is bracket(-2)
    assert pow_int(pow_int(sin_of(var_x(0)), 2), 3) is pow_int(sin_of(var_x(0)), 6)
    assert sy.bracket(0) is const(1)


def test_operator_sugar():
    e = var_xi(0) ** 2 + 1
    assert e is sy.add(const(1), pow_int(var_xi(0), 2))
    # no like-term cancellation, only constant folding
    assert (const(2) * var_x(0) * const(3)) is sy.mul(const(6), var_x(0))


# ---------------------------------------------------------------------------
# differentiation

def test_diff_sin_is_cos():
    s = MatrixSymbol.scalar(sin_of(var_x(0)))
    ds = differentiate(s, (1,), (0,))
    assert ds.entry(0, 0) is cos_of(var_x(0))


def test_diff_bracket_chain_rule():
    d = diff_expr(bracket(-1), "xi", 0)
    assert d is mul(const(-1), var_xi(0), bracket(-3))


def test_diff_matches_finite_differences():
    # 4th order central differences on exp(cos(x1)) * bracket(-2)
    e = mul(exp_of(cos_of(var_x(0))), bracket(-2))
    d = diff_expr(diff_expr(diff_expr(e, "x", 0), "x", 0), "xi", 0)
    h = 1e-2

    def f(x, xi):
        return ev(e, x, xi)

    def fdx(fn):
        return lambda x, xi: (8 * (fn(x + h, xi) - fn(x - h, xi))
                              - (fn(x + 2 * h, xi) - fn(x - 2 * h, xi))) / (12 * h)

    def fdxi(fn):
        return lambda x, xi: (8 * (fn(x, xi + h) - fn(x, xi - h))
                              - (fn(x, xi + 2 * h) - fn(x, xi - 2 * h))) / (12 * h)

    x = RNG.uniform(0, 2 * math.pi, 50)
    xi = RNG.uniform(-3, 3, 50)
    fd = fdx(fdx(fdxi(f)))(x, xi)
    exact = ev(d, x, xi)
    scale = max(1.0, float(np.max(np.abs(exact))))
    assert np.max(np.abs(fd - exact)) <= 1e-6 * scale


def test_diff_commutes_on_fixed_symbol():
    e = mul(sin_of(mul(const(2), var_x(0))), bracket(-1),
            exp_of(cos_of(var_x(0))))
    a = diff_expr(diff_expr(e, "x", 0), "xi", 0)
    b = diff_expr(diff_expr(e, "xi", 0), "x", 0)
    x = RNG.uniform(0, 2 * math.pi, 100)
    xi = RNG.uniform(-5, 5, 100)
    va, vb = ev(a, x, xi), ev(b, x, xi)
    assert np.max(np.abs(va - vb)) <= 1e-12 * (1 + np.max(np.abs(va)))


@given(symbol_exprs)
def test_diff_commutes_property(e):
    a = diff_expr(diff_expr(e, "x", 0), "xi", 0)
    b = diff_expr(diff_expr(e, "xi", 0), "x", 0)
    x = RNG.uniform(0, 2 * math.pi, 100)
    xi = RNG.uniform(-5, 5, 100)
    va = np.broadcast_to(ev(a, x, xi), x.shape)
    vb = np.broadcast_to(ev(b, x, xi), x.shape)
    assert np.max(np.abs(va - vb)) <= 1e-12 * (1 + np.max(np.abs(va)))


def test_order_cap():
    s = MatrixSymbol.scalar(sin_of(var_x(0)))
    with pytest.raises(OrderExceededError):
        differentiate(s, (9,), (0,))
    differentiate(s, (9,), (0,), max_order=9)   # raised cap is fine


# ---------------------------------------------------------------------------
# glue primitive and step functions

def test_glue_polynomials():
    # g'(t) = e^{-1/t} t^{-2}, g''(t) = e^{-1/t}(t^{-4} - 2 t^{-3})
    assert list(sy._glue_poly(0)) == [1]
    assert list(sy._glue_poly(1)) == [1, 0, 0]
    assert list(sy._glue_poly(2)) == [1, -2, 0, 0, 0]


def test_glue_matches_exp():
    t = np.array([0.3, 0.7, 1.5, 4.0])
    g0 = ev(glue(var_xi(0), 0), 0.0, t)
    assert np.allclose(g0, np.exp(-1.0 / t), rtol=1e-14)
    # derivative by finite differences
    h = 1e-5
    fd = (np.exp(-1.0 / (t + h)) - np.exp(-1.0 / (t - h))) / (2 * h)
    g1 = ev(glue(var_xi(0), 1), 0.0, t)
    assert np.allclose(g1, fd, rtol=1e-8)


def test_glue_vanishes_left_of_zero():
    t = np.array([-2.0, -1e-9, 0.0, 1e-3])
    assert np.all(ev(glue(var_xi(0), 3), 0.0, t) == 0.0)


def test_smooth_step_plateaus_exact():
    s = smooth_step(var_xi(0))
    u = np.array([-1.0, 0.0, 1.0, 1.5, 2.0])
    v = ev(s, 0.0, u)
    assert v[0] == 0.0 and v[1] == 0.0
    assert v[2] == 1.0 and v[3] == 1.0 and v[4] == 1.0
    mid = ev(s, 0.0, np.array([0.5]))
    assert 0.0 < mid[0] < 1.0


def test_cutoff_plateaus():
    chi = cutoff(1.0, 2.0)
    xi = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0])
    v = ev(chi, 0.0, xi)
    assert v[0] == 1.0 and v[1] == 1.0 and v[2] == 1.0
    assert v[4] == 0.0 and v[5] == 0.0
    assert 0.0 < v[3] < 1.0
    # even in xi, exact derivatives exist to high order
    d5 = diff_expr(diff_expr(chi, "xi", 0), "xi", 0)
    assert np.all(np.isfinite(ev(d5, 0.0, np.linspace(-3, 3, 101))))


# ---------------------------------------------------------------------------
# grids, sampling

def test_gridspec_validation():
    GridSpec(1, 64, 16, 0.25)
    with pytest.raises(ValueError):
        GridSpec(1, 48, 16, 0.25)          # not a power of two
    with pytest.raises(ValueError):
        GridSpec(1, 32, 16, 0.25)          # n_x < 2K+2
    with pytest.raises(ValueError):
        GridSpec(1, 64, 16, 1.0)           # eps outside (0,1)


def test_sample_constant_and_multiplier():
    g = GridSpec(1, 16, 4, 0.5)
    sm = sample(MatrixSymbol.identity(2), g, scale_freq=True)
    assert sm.values.shape == (16, 9, 2, 2)
    assert np.allclose(sm.values, np.eye(2)[None, None])

    sm2 = sample(MatrixSymbol.scalar(bracket(-1), order=-1.0), g, True)
    # eps=1/2, k=4: value <2>^{-1} = 5^{-1/2}
    j = g.mode_index(4)
    assert np.allclose(sm2.values[:, j, 0, 0], 5.0 ** -0.5)


def test_sample_quarter_eps_example():
    g = GridSpec(1, 16, 4, 0.25)
    sm = sample(MatrixSymbol.scalar(bracket(-1), order=-1.0), g, True)
    j = g.mode_index(4)
    assert np.allclose(sm.values[:, j, 0, 0], 2 ** -0.5)


def test_sample_matches_pointwise_eval():
    g = GridSpec(1, 16, 4, 0.3)
    e = mul(sin_of(var_x(0)), bracket(-1))
    sm = sample(MatrixSymbol.scalar(e, order=-1.0), g, True)
    xg = g.x_grid()
    kg = g.k_lattice().astype(float) * g.eps
    for j in [0, 5, 11]:
        for k in [0, 3, 8]:
            direct = eval_expr(e, [xg[0][j:j + 1]], [kg[0][k:k + 1]])
            assert sm.values[j, k, 0, 0] == complex(direct[0])


def test_sample_time_dependence():
    g = GridSpec(1, 8, 2, 0.5)
    s = MatrixSymbol.scalar(mul(sin_of(var_t()), cos_of(var_x(0))))
    assert s.time_dependent
    v = sample(s, g, True, t=math.pi / 2).values
    x = g.x_grid()[0]
    assert np.allclose(v[:, 0, 0, 0], np.cos(x))


# ---------------------------------------------------------------------------
# periodicity enforcement

def test_periodicity_enforced():
    MatrixSymbol.scalar(sin_of(mul(const(2), var_x(0))))
    MatrixSymbol.scalar(sin_of(sin_of(var_x(0))))
    MatrixSymbol.scalar(exp_of(mul(const(3j), var_x(0))))
    with pytest.raises(ValueError):
        MatrixSymbol.scalar(var_x(0))
    with pytest.raises(ValueError):
        MatrixSymbol.scalar(sin_of(mul(const(1.5), var_x(0))))
    with pytest.raises(ValueError):
        MatrixSymbol.scalar(exp_of(var_x(0)))


# ---------------------------------------------------------------------------
# symbol norms

def test_symbol_norm_zero_and_identity():
    g = GridSpec(1, 64, 8, 0.5)
    assert symbol_norm(MatrixSymbol.scalar(const(0)), 3, g) == 0.0
    assert symbol_norm(MatrixSymbol.identity(2), 3, g) == 1.0


def test_symbol_norm_sinx_bracket_oracle():
    # independent hand-derived weighted sups for sin(x) <xi>^{-1}, m=-1, r=0
    g = GridSpec(1, 64, 8, 0.5)
    s = MatrixSymbol.scalar(mul(sin_of(var_x(0)), bracket(-1)), order=-1.0)
    got = symbol_norm(s, 0, g)

    xs = np.arange(2 * g.n_x) * math.pi / g.n_x
    ks = np.arange(-4 * g.K, 4 * g.K + 0.5, 0.5)
    X, Q = np.meshgrid(xs, ks, indexing="ij")
    jap = np.hypot(1.0, Q)
    cand = [
        np.abs(np.sin(X)),                                     # (0,0)
        np.abs(np.cos(X)),                                     # (1,0), (2,0)
        np.abs(np.sin(X)) * np.abs(Q) / jap,                   # (0,1)
        np.abs(np.cos(X)) * np.abs(Q) / jap,                   # (1,1)
        np.abs(np.sin(X)) * np.abs(2 * Q ** 2 - 1) / jap ** 2,  # (0,2)
    ]
    oracle = max(float(c.max()) for c in cand)
    assert abs(got - oracle) <= 0.05 * oracle


def test_symbol_norm_homogeneous_exact():
    g = GridSpec(1, 16, 4, 0.5)
    s = MatrixSymbol.scalar(mul(sin_of(var_x(0)), bracket(-1)), order=0.0)
    base = symbol_norm(s, 1, g)
    for c in (2.0, 0.25, -8.0):
        assert symbol_norm(s.scale(c), 1, g) == abs(c) * base


@given(st.floats(0.1, 50, allow_nan=False))
def test_symbol_norm_homogeneous_property(c):
    g = GridSpec(1, 16, 4, 0.5)
    s = MatrixSymbol.scalar(sy.add(cos_of(var_x(0)), bracket(-2)), order=0.0)
    a = symbol_norm(s.scale(c), 0, g)
    b = c * symbol_norm(s, 0, g)
    assert abs(a - b) <= 1e-12 * b


def test_symbol_norm_monotone_in_r():
    g = GridSpec(1, 32, 8, 0.5)
    s = MatrixSymbol.scalar(mul(cos_of(var_x(0)), bracket(-2)), order=0.0)
    norms = [symbol_norm(s, r, g) for r in range(4)]
    assert all(a <= b + 1e-15 for a, b in zip(norms, norms[1:]))


def test_symbol_norm_propagates_order_cap():
    g = GridSpec(1, 16, 4, 0.5)
    s = MatrixSymbol.scalar(cos_of(var_x(0)))
    with pytest.raises(OrderExceededError):
        symbol_norm(s, 8, g)               # range 10 > default cap 8
    symbol_norm(s, 8, g, max_order=10)


# ---------------------------------------------------------------------------
# class membership reports

def test_check_class_identity():
    g = GridSpec(1, 16, 4, 0.5)
    rep = check_class(MatrixSymbol.identity(1), 0.0, 0, g)
    assert rep.passed
    assert set(rep.constants.values()) <= {0.0, 1.0}


def test_check_class_bracket_wrong_order_fails():
    g = GridSpec(1, 64, 16, 0.5)
    s = MatrixSymbol.scalar(bracket(1.0), order=0.0)
    rep = check_class(s, 0.0, 0, g)
    assert not rep.passed
    assert any(sl > 0.5 for sl in rep.slopes.values())


def test_check_class_decay_passes():
    g = GridSpec(1, 64, 16, 0.5)
    s = MatrixSymbol.scalar(mul(cos_of(var_x(0)), bracket(-2)), order=0.0)
    rep = check_class(s, 0.0, 0, g)
    assert rep.passed
    assert rep.constants[((0,), (0,))] == pytest.approx(1.0)
