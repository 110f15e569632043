import json
import math

import numpy as np
import pytest

from pdflow.calculus import (
    SlopeReport, _fourier_op_matrix, composition_remainder_probe, diamond_k,
    sharp_q,
)
from pdflow.quantize import (
    FourierState, from_fourier, op_eps_apply, to_fourier, weyl_fourier_matrix,
)
from pdflow.symbols import (
    GridSpec, MatrixSymbol, OrderExceededError, add, bracket, const, cos_of,
    diff_expr, eval_expr, exp_of, mul, pow_int, sample, sin_of, var_x, var_xi,
)


def points(n, seed, d=1):
    rng = np.random.default_rng(seed)
    x = [rng.uniform(0, 2 * np.pi, n) for _ in range(d)]
    xi = [rng.uniform(-3, 3, n) for _ in range(d)]
    return x, xi


def ev(s, x, xi):
    """MatrixSymbol values at points, shape (npts, N, N)."""
    npts = len(x[0])
    out = np.zeros((npts, s.N, s.N), dtype=complex)
    for i in range(s.N):
        for j in range(s.N):
            out[:, i, j] = np.broadcast_to(
                np.asarray(eval_expr(s.entry(i, j), x, xi)), (npts,))
    return out


A1 = MatrixSymbol.scalar(mul(cos_of(var_x(0)), bracket(-1)), order=-1.0)
A2 = MatrixSymbol.scalar(mul(sin_of(var_x(0)), bracket(-1)), order=-1.0)


# ---------------------------------------------------------------------------
# sharp_q

def test_sharp0_is_matrix_product():
    m1 = MatrixSymbol(((cos_of(var_x(0)), bracket(-1)),
                       (const(0.5j), sin_of(var_x(0)))))
    m2 = MatrixSymbol(((bracket(-2), const(1.0)),
                       (mul(sin_of(var_x(0)), bracket(-1)), const(2.0))))
    x, xi = points(50, 0)
    got = ev(sharp_q(m1, m2, 0), x, xi)
    want = ev(m1, x, xi) @ ev(m2, x, xi)
    assert np.abs(got - want).max() < 1e-13


def test_sharp1_single_term_product_rule():
    psi = bracket(-1)
    wave = exp_of(mul(const(1j), var_x(0)))
    s = sharp_q(MatrixSymbol.scalar(psi, order=-1.0),
                MatrixSymbol.scalar(wave), 1)
    x, xi = points(50, 1)
    got = ev(s, x, xi)[:, 0, 0]
    want = eval_expr(mul(diff_expr(psi, "xi", 0), wave), x, xi)
    assert np.abs(got - want).max() < 1e-14


def test_sharp_xi_only_vanishes():
    m1 = MatrixSymbol.scalar(bracket(-2), order=-2.0)
    m2 = MatrixSymbol.scalar(add(bracket(-1), const(2.0)))
    for q in (1, 2, 3):
        assert sharp_q(m1, m2, q).entry(0, 0) is const(0.0)


def test_sharp_identity_annihilates():
    a = MatrixSymbol.scalar(mul(cos_of(var_x(0)), bracket(-1)), order=-1.0)
    eye = MatrixSymbol.identity(1)
    for q in (1, 2):
        assert sharp_q(a, eye, q).entry(0, 0) is const(0.0)
        assert sharp_q(eye, a, q).entry(0, 0) is const(0.0)


def test_sharp_bilinear():
    x, xi = points(40, 2)
    base = ev(sharp_q(A1, A2, 1), x, xi)
    for c in (2.5, -1.5j):
        got = ev(sharp_q(A1.scale(c), A2, 1), x, xi)
        assert np.abs(got - c * base).max() < 1e-13
        got = ev(sharp_q(A1, A2.scale(c), 1), x, xi)
        assert np.abs(got - c * base).max() < 1e-13


def test_sharp_factorial_conventions_coincide_at_d1():
    s_multi = sharp_q(A1, A2, 2, factorial="multi")
    s_total = sharp_q(A1, A2, 2, factorial="total")
    assert s_multi.entry(0, 0) is s_total.entry(0, 0)


def test_sharp_factorial_conventions_differ_at_d2():
    a1 = MatrixSymbol.scalar(bracket(-1), d=2, order=-1.0)
    a2 = MatrixSymbol.scalar(mul(sin_of(var_x(0)), sin_of(var_x(1))), d=2)
    x, xi = points(40, 3, d=2)
    multi = ev(sharp_q(a1, a2, 2, factorial="multi"), x, xi)[:, 0, 0]
    total = ev(sharp_q(a1, a2, 2, factorial="total"), x, xi)[:, 0, 0]
    # conventions differ only on the mixed term: weight 1 vs 1/2
    d1 = diff_expr(diff_expr(bracket(-1), "xi", 0), "xi", 1)
    d2 = diff_expr(diff_expr(a2.entry(0, 0), "x", 0), "x", 1)
    mixed = -np.asarray(eval_expr(d1, x, xi)) * np.asarray(eval_expr(d2, x, xi))
    assert np.abs((multi - total) - 0.5 * mixed).max() < 1e-13


def test_sharp_order_cap():
    with pytest.raises(OrderExceededError):
        sharp_q(A1, A2, 9)
    sharp_q(MatrixSymbol.scalar(bracket(-1), order=-1.0),
            MatrixSymbol.scalar(cos_of(var_x(0))), 9, max_order=10)


# ---------------------------------------------------------------------------
# diamond_k

def test_diamond0_is_product():
    x, xi = points(50, 4)
    got = ev(diamond_k(A1, A2, 0), x, xi)
    want = ev(A1, x, xi) * ev(A2, x, xi)
    assert np.abs(got - want).max() < 1e-13


def test_diamond1_self_bracket_vanishes():
    x, xi = points(100, 5)
    got = ev(diamond_k(A1, A1, 1), x, xi)
    assert np.abs(got).max() < 1e-12


def test_diamond1_is_half_i_poisson_bracket():
    # oracle: symbolic Poisson bracket {a,b} = d_xi a d_x b - d_x a d_xi b
    e1, e2 = A1.entry(0, 0), A2.entry(0, 0)
    pb = add(mul(diff_expr(e1, "xi", 0), diff_expr(e2, "x", 0)),
             mul(const(-1.0), diff_expr(e1, "x", 0), diff_expr(e2, "xi", 0)))
    x, xi = points(100, 6)
    got = ev(diamond_k(A1, A2, 1), x, xi)[:, 0, 0]
    want = np.asarray(eval_expr(pb, x, xi)) / 2j
    assert np.abs(got - want).max() < 1e-12


def test_diamond_symmetry():
    x, xi = points(100, 7)
    d1 = ev(diamond_k(A1, A2, 1), x, xi)
    d1r = ev(diamond_k(A2, A1, 1), x, xi)
    assert np.abs(d1 + d1r).max() < 1e-12
    d2 = ev(diamond_k(A1, A2, 2), x, xi)
    d2r = ev(diamond_k(A2, A1, 2), x, xi)
    assert np.abs(d2 - d2r).max() < 1e-12


def test_diamond_identity_annihilates():
    eye = MatrixSymbol.identity(1)
    for k in (1, 2):
        assert diamond_k(A1, eye, k).entry(0, 0) is const(0.0)
        assert diamond_k(eye, A1, k).entry(0, 0) is const(0.0)


def test_diamond_sums_to_exact_weyl_composition():
    # a1 polynomial in xi and a2 x-only make the expansion finite, so the
    # quantization itself decides the coefficients, half-powers included
    a1 = MatrixSymbol.scalar(bracket(2), order=2.0)
    a2 = MatrixSymbol.scalar(cos_of(mul(const(2), var_x(0))))
    g = GridSpec(1, 128, 16, 0.5)
    prod = weyl_fourier_matrix(a1, g) @ weyl_fourier_matrix(a2, g)
    series = sum(weyl_fourier_matrix(diamond_k(a1, a2, k), g)
                 for k in range(3))
    assert np.abs(prod - series).max() < 1e-10
    prod = weyl_fourier_matrix(a2, g) @ weyl_fourier_matrix(a1, g)
    series = sum(weyl_fourier_matrix(diamond_k(a2, a1, k), g)
                 for k in range(3))
    assert np.abs(prod - series).max() < 1e-10


# ---------------------------------------------------------------------------
# remainder probes

G = GridSpec(1, 64, 16, 0.5)
FAST_SWEEP = (0.125, 0.0625, 0.03125)


def test_fourier_matrix_matches_apply():
    a = MatrixSymbol.scalar(add(mul(cos_of(var_x(0)), bracket(-1)),
                                const(0.25j)))
    M = _fourier_op_matrix(a, G)
    tab = sample(a, G, True)
    rng = np.random.default_rng(8)
    c = rng.standard_normal((G.n_modes, 1)) + 1j * rng.standard_normal((G.n_modes, 1))
    u = from_fourier(FourierState(c, G))
    got = to_fourier(op_eps_apply(tab, u)).coeffs[:, 0]
    assert np.abs(M @ c[:, 0] - got).max() < 1e-12


def test_probe_xi_only_exact():
    a1 = MatrixSymbol.scalar(bracket(-1), order=-1.0)
    a2 = MatrixSymbol.scalar(bracket(-2), order=-2.0)
    rep = composition_remainder_probe(a1, a2, 0, G, eps_sweep=FAST_SWEEP)
    assert all(r < 1e-10 for _, r in rep.table)


def test_probe_x_only_exact():
    a1 = MatrixSymbol.scalar(cos_of(var_x(0)))
    a2 = MatrixSymbol.scalar(sin_of(mul(const(2), var_x(0))))
    rep = composition_remainder_probe(a1, a2, 0, G, eps_sweep=FAST_SWEEP)
    assert all(r < 1e-10 for _, r in rep.table)


def test_probe_first_order_slope():
    rep = composition_remainder_probe(A1, A2, 0, G,
                                      eps_sweep=tuple(2.0 ** -j
                                                      for j in range(3, 7)))
    assert 0.8 <= rep.slope <= 1.2


def test_probe_second_order_slope():
    rep = composition_remainder_probe(A1, A2, 1, G)
    assert 1.8 <= rep.slope <= 2.2
    eps, rem = zip(*rep.table)
    assert list(eps) == [2.0 ** -j for j in range(3, 8)]
    assert all(r2 < r1 for r1, r2 in zip(rem, rem[1:]))


def test_probe_degenerate_sweep():
    with pytest.raises(ValueError):
        composition_remainder_probe(A1, A2, 0, G, eps_sweep=(0.5, 0.25))


def test_probe_weyl_shell_decay():
    # order -1 and -2 symbols: the product is order -3, each expansion
    # term gains one more, so shell norms decay like 2^{-j(n+4)}; the
    # whole-range fit runs a bit steep because low shells sit outside
    # the Taylor-convergence zone
    w1 = MatrixSymbol.scalar(mul(cos_of(mul(const(2), var_x(0))),
                                 bracket(-1)), order=-1.0)
    w2 = MatrixSymbol.scalar(mul(sin_of(mul(const(2), var_x(0))),
                                 bracket(-2)), order=-2.0)
    g = GridSpec(1, 512, 128, 0.5)
    for n in (0, 1, 2):
        rep = composition_remainder_probe(w1, w2, n, g, quantization="weyl")
        assert rep.sweep == "cutoff"
        lam, rem = zip(*rep.table)
        assert lam == (2.0, 4.0, 8.0, 16.0, 32.0)
        tail = math.log2(rem[-2] / rem[-1])
        assert n + 3.5 <= tail <= n + 4.6
        assert rep.slope < -(n + 3.5)


def test_probe_weyl_degenerate_shells():
    with pytest.raises(ValueError):
        composition_remainder_probe(A1, A2, 0, GridSpec(1, 64, 16, 0.5),
                                    quantization="weyl")


def test_probe_rejects_unknown_quantization():
    with pytest.raises(ValueError):
        composition_remainder_probe(A1, A2, 0, G, quantization="kohn")


def test_report_serialization(tmp_path):
    rep = composition_remainder_probe(A1, A2, 0, G, eps_sweep=FAST_SWEEP)
    rep.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().strip().splitlines()
    assert lines[0] == "eps,remainder,fit_slope"
    assert len(lines) == 4
    assert float(lines[1].split(",")[0]) == 0.125
    rep.to_json(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["quantization"] == "semiclassical" and d["n"] == 0
    assert len(d["table"]) == 3 and d["slope"] == rep.slope
