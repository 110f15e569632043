import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st
from scipy.integrate import simpson
from scipy.linalg import expm

from pdflow.corrector import (
    CorrectorFamily, assemble_sigma, duhamel_solve, eps_guard, load_family,
    q0_from, residual_probe, save_family, solve_S, solve_correctors,
)
from pdflow.flow import evolve_linear
from pdflow.quantize import (
    FourierState, StateVector, from_fourier, l2_norm, sampled_op_matrix,
    to_fourier,
)
from pdflow.symbols import (
    GridSpec, MatrixSymbol, OrderExceededError, add, bracket, const, cos_of,
    mul, sample, sin_of, var_t, var_x,
)

G = GridSpec(1, 64, 16, 0.25)

# constant coefficients: hierarchy collapses to a matrix exponential
MC = MatrixSymbol(((const(0.3), const(0.5)),
                   (const(-0.2), const(0.1))))
MC_MAT = np.array([[0.3, 0.5], [-0.2, 0.1]])

# scalar cos(t): separable, S = exp(sin t - sin tau)
MT = MatrixSymbol.scalar(cos_of(var_t()))

# scalar with genuine (x, xi) coupling, the workhorse for S_1 oracles
MQ = MatrixSymbol.scalar(mul(cos_of(var_x(0)), bracket(-1)), order=-1.0)

# generic non-commuting 2x2 system
M2 = MatrixSymbol(((mul(const(0.2), cos_of(var_x(0))),
                    mul(const(0.4), cos_of(var_x(0)), bracket(-1))),
                   (mul(const(0.3), sin_of(var_x(0)), bracket(-2)),
                    const(-0.1))))

# time-dependent variant, only valid for the hierarchy (not duhamel)
MTD = MatrixSymbol(((mul(const(0.5), cos_of(var_t())),
                     mul(const(0.8), cos_of(var_x(0)), bracket(-1))),
                    (mul(const(0.6), sin_of(var_x(0)), bracket(-2)),
                     mul(const(-0.4), sin_of(var_x(0))))))


def band_state(g, bw=3, N=1, seed=0, scale=1.0):
    # random data supported on |k| <= bw so closed-form flows stay resolved
    rng = np.random.default_rng(seed)
    c = np.zeros((g.n_modes, N), dtype=complex)
    mask = np.abs(g.k_lattice()[0]) <= bw
    c[mask] = rng.standard_normal((mask.sum(), N)) \
        + 1j * rng.standard_normal((mask.sum(), N))
    c *= scale / np.linalg.norm(c)
    return from_fourier(FourierState(c, g))


def gamma_inf(M, g, times):
    worst = 0.0
    for t in times:
        v = sample(M, g, scale_freq=True, t=float(t)).values
        if M.N == 1:
            worst = max(worst, float(np.abs(v).max()))
        else:
            worst = max(worst, float(
                np.linalg.norm(v, ord=2, axis=(-2, -1)).max()))
    return worst


# ---------------------------------------------------------------- q0


def test_q0_examples():
    assert q0_from(0.0, 5.0) == 1
    assert q0_from(1.0, 2.5) == 3
    assert q0_from(2.0, 3.0) == 7


def test_q0_rejects_bad_arguments():
    with pytest.raises(ValueError):
        q0_from(-0.5, 1.0)
    with pytest.raises(ValueError):
        q0_from(1.0, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 20.0), st.floats(0.01, 20.0))
def test_q0_brackets_gamma_T(gamma, T):
    q0 = q0_from(gamma, T)
    assert isinstance(q0, int)
    assert gamma * T < q0 <= gamma * T + 1.0 + 1e-9


# ------------------------------------------------------- principal S


def test_zero_generator_gives_identity_path():
    path = solve_S(MatrixSymbol.scalar(const(0.0)), 0.0, 1.0, G, dt=0.1)
    eye = np.ones_like(path.values)
    assert np.array_equal(path.values, eye)
    assert path.times[0] == 0.0 and path.times[-1] == 1.0


def test_constant_matrix_matches_expm():
    t = 1.3
    path = solve_S(MC, 0.0, t, G, dt=t / 1000)
    got = path.values[-1][0, 0]  # constant in (x, xi), any point will do
    want = expm(t * MC_MAT)
    assert np.abs(got - want).max() < 1e-8
    assert np.abs(path.values[-1] - want).max() < 1e-8


def test_time_dependent_scalar_matches_closed_form():
    tau, t = 0.25, 1.75
    path = solve_S(MT, tau, t, G, dt=0.01)
    for m, s in enumerate(path.times):
        want = np.exp(np.sin(s) - np.sin(tau))
        assert np.abs(path.values[m] - want).max() < 1e-9


def test_step_must_divide_span():
    with pytest.raises(ValueError):
        solve_S(MC, 0.0, 1.0, G, dt=0.3)
    with pytest.raises(ValueError):
        solve_S(MC, 0.0, 1.0, G, dt=-0.01)
    with pytest.raises(ValueError):
        solve_S(MC, 1.0, 1.0, G)


def test_default_step_resolves_gamma():
    # gamma ~ 1 symbol gets the 0.01 cap, a stiff one gets 0.1/gamma
    p1 = solve_S(MQ, 0.0, 1.0, G)
    assert p1.dt <= 0.01 + 1e-12
    stiff = MatrixSymbol.scalar(mul(const(50.0), cos_of(var_x(0))))
    p2 = solve_S(stiff, 0.0, 0.1, G)
    assert p2.dt <= 0.1 / 50.0 + 1e-12


def test_growth_stays_under_gronwall_envelope():
    tau, t = 0.0, 1.5
    path = solve_S(MTD, tau, t, G, dt=0.01)
    gam = gamma_inf(MTD, G, np.linspace(tau, t, 151))
    for m, s in enumerate(path.times):
        sup = np.linalg.norm(path.values[m], ord=2, axis=(-2, -1)).max()
        assert sup <= np.exp(gam * (s - tau)) * (1.0 + 10.0 * path.dt)


def test_defective_generator_polynomial_rate():
    # Jordan block: |S(t)| ~ (1+t) e^{gamma t} exactly, gamma = 1
    J = MatrixSymbol(((const(1.0), const(1.0)),
                      (const(0.0), const(1.0))))
    path = solve_S(J, 0.0, 2.0, G, dt=0.005)
    for m, s in enumerate(path.times):
        sup = np.linalg.norm(path.values[m], ord=2, axis=(-2, -1)).max()
        assert sup <= 1.05 * (1.0 + s) * np.exp(s)


def test_cocycle_property_across_step_grids():
    # legs on a dt=0.01 grid, full run on dt=0.012: agreement is a real
    # integrator-accuracy statement, not associativity of one-step maps
    g = G
    full = solve_S(M2, 0.0, 1.2, g, dt=0.012)
    leg1 = solve_S(M2, 0.0, 0.6, g, dt=0.01)
    leg2 = solve_S(M2, 0.6, 1.2, g, dt=0.01)
    lhs = full.values[-1]
    rhs = np.matmul(leg2.values[-1], leg1.values[-1])
    assert np.abs(lhs - rhs).max() < 1e-7


# --------------------------------------------------------- hierarchy


def test_correctors_vanish_without_coupling():
    # x-only and xi-only generators never feed the bracket terms
    mx = MatrixSymbol.scalar(cos_of(var_x(0)))
    mxi = MatrixSymbol.scalar(bracket(-1), order=-1.0)
    for m in (mx, mxi):
        fam = solve_correctors(m, 2, 0.0, 1.0, G, dt=0.02)
        for q in (1, 2):
            assert np.all(fam.values[q] == 0.0)


def test_family_initial_conditions_and_accessors():
    fam = solve_correctors(MQ, 2, 0.0, 0.5, G, dt=0.01)
    assert fam.q0 == 2 and fam.N == 1
    eye = np.ones((1, 1), dtype=complex)
    assert np.abs(fam.values[0][0] - eye).max() < 1e-12
    assert np.all(fam.values[1][0] == 0.0)
    assert np.all(fam.values[2][0] == 0.0)
    assert fam.path(1).order == -1.0
    node = fam.symbol(1, 0.5)
    assert node.values.shape == fam.values[1][-1].shape
    with pytest.raises(ValueError):
        fam.symbol(1, 0.3141)  # not a stored node


def test_first_corrector_against_quadrature():
    # independent oracle: S_1(0;t) = int_0^t S(s;t) (-i) d_xi M d_x S(0;s) ds
    # with S(s;t) realised by time translation (M is autonomous) and d_x S
    # taken spectrally.  Simpson in time on the stored nodes.
    g = G
    t, dt = 1.0, 0.002
    fam = solve_correctors(MQ, 1, 0.0, t, g, dt=dt)
    svals = fam.values[0][:, :, :, 0, 0]          # (n_nodes, n_x, n_modes)
    n_x = g.n_x
    freq = np.fft.fftfreq(n_x, d=1.0 / n_x)
    dx_s = np.fft.ifft(1j * freq[:, None] * np.fft.fft(svals, axis=1), axis=1)
    from pdflow.symbols import differentiate
    dxi_m = sample(differentiate(MQ, (0,), (1,)), g,
                   scale_freq=True).values[:, :, 0, 0]
    # S(s;t) = S(0;t-s) for autonomous M: walk the stored path backwards
    integrand = svals[::-1] * (-1j) * dxi_m[None] * dx_s
    s1 = simpson(integrand, x=fam.times, axis=0)
    got = fam.values[1][-1][:, :, 0, 0]
    assert np.abs(got - s1).max() < 1e-6


def test_first_corrector_commuting_closed_form():
    # scalar symbols commute: S_1(0;t) = -(i t^2 / 2) d_xi M d_x M e^{tM}
    from pdflow.symbols import differentiate
    g = G
    t = 0.8
    fam = solve_correctors(MQ, 1, 0.0, t, g, dt=0.002)
    mv = sample(MQ, g, scale_freq=True).values[:, :, 0, 0]
    dxi = sample(differentiate(MQ, (0,), (1,)), g,
                 scale_freq=True).values[:, :, 0, 0]
    dx = sample(differentiate(MQ, (1,), (0,)), g,
                scale_freq=True).values[:, :, 0, 0]
    want = -0.5j * t * t * dxi * dx * np.exp(t * mv)
    got = fam.values[1][-1][:, :, 0, 0]
    assert np.abs(got - want).max() < 1e-10


def test_corrector_decay_weights_stable_across_grids():
    # sup <eps k>^q |S_q| should be a grid-independent number; freeze it
    mqx = MatrixSymbol.scalar(add(mul(const(0.7), cos_of(var_x(0)),
                                      bracket(-1)),
                                  mul(const(0.3), sin_of(var_x(0)))))
    sups = {}
    for K in (16, 32):
        g = GridSpec(1, 4 * K, K, 0.25)
        fam = solve_correctors(mqx, 2, 0.0, 1.0, g, dt=0.01)
        w = (1.0 + (g.eps * g.k_lattice()[0].astype(float)) ** 2) ** 0.5
        for q, cap in ((1, 0.35), (2, 0.95)):
            tab = np.abs(fam.values[q][-1][:, :, 0, 0])
            wsup = float((tab * w[None, :] ** q).max())
            assert wsup <= cap
            sups.setdefault(q, []).append(wsup)
    for q in (1, 2):
        a, b = sups[q]
        assert abs(a - b) <= 0.02 * max(a, b)


def test_stored_x_derivatives_match_spectral():
    # the co-integrated d_x S_0 field must agree with an FFT derivative
    # of the plain field at the final node
    fam = solve_correctors(M2, 2, 0.0, 1.0, G, dt=0.01)
    key = (0, (1,))
    assert key in fam.final_derivatives
    tab = fam.values[0][-1]
    n_x = G.n_x
    freq = np.fft.fftfreq(n_x, d=1.0 / n_x)
    spec = np.fft.ifft(1j * freq[:, None, None, None]
                       * np.fft.fft(tab, axis=0), axis=0)
    assert np.abs(fam.final_derivatives[key] - spec).max() < 1e-10


def test_hierarchy_derivative_cap_is_surfaced():
    with pytest.raises(OrderExceededError):
        solve_correctors(MQ, 9, 0.0, 1.0, G, dt=0.1)


# ----------------------------------------------------------- sigma


def test_assembled_symbol_reduces_to_principal():
    mx = MatrixSymbol.scalar(cos_of(var_x(0)))
    fam = solve_correctors(mx, 2, 0.0, 1.0, G, dt=0.02)
    sig = assemble_sigma(fam, 0.25)
    assert np.array_equal(sig.values, fam.values[0])
    famq = solve_correctors(MQ, 2, 0.0, 0.5, G, dt=0.01)
    sig0 = assemble_sigma(famq, 0.0)
    assert np.array_equal(sig0.values, famq.values[0])


def test_assembled_symbol_is_the_weighted_sum():
    fam = solve_correctors(MQ, 2, 0.0, 0.5, G, dt=0.01)
    eps = 0.25
    sig = assemble_sigma(fam, eps)
    want = fam.values[0] + eps * fam.values[1] + eps ** 2 * fam.values[2]
    assert np.abs(sig.values - want).max() < 1e-14
    assert sig.order == 0.0
    diff = np.abs(sig.values - fam.values[0]).max()
    bound = sum(eps ** q * np.abs(fam.values[q]).max() for q in (1, 2))
    assert diff <= bound + 1e-14


# --------------------------------------------------------- residual


def test_residual_small_for_multiplication_symbol():
    # xi-independent generator: op commutes with the hierarchy exactly,
    # what is left is the centered-difference error dt^2 A^3 / eps
    g = GridSpec(1, 64, 16, 2.0 ** -5)
    amp, dt = 0.5, 0.01
    m = MatrixSymbol.scalar(mul(const(amp), cos_of(var_x(0))))
    fam = solve_correctors(m, 1, 0.0, 1.0, g, dt=dt)
    cap = dt * dt * amp ** 3 / g.eps
    mid = residual_probe(m, fam, g.eps, 0.5)
    assert float(mid) <= cap and not mid.one_sided
    end = residual_probe(m, fam, g.eps, 1.0)
    assert float(end) <= cap and end.one_sided


def test_residual_small_for_fourier_multiplier():
    g = GridSpec(1, 64, 16, 2.0 ** -5)
    m = MatrixSymbol.scalar(mul(const(0.5), bracket(-1)), order=-1.0)
    fam = solve_correctors(m, 1, 0.0, 1.0, g, dt=0.01)
    est = residual_probe(m, fam, g.eps, 0.5)
    assert float(est) <= 0.01 ** 2 * 0.5 ** 3 / g.eps
    assert est.margin == 0  # x-independent tables have zero x-bandwidth


def test_residual_sweep_stays_under_log_power():
    # the H^{-q0-1} -> L2 residual norm carries at most |ln eps|^{N*}
    t_star = 1.0
    for eps in (2.0 ** -4, 2.0 ** -5, 2.0 ** -6, 2.0 ** -7):
        g = GridSpec(1, 64, 16, eps)
        fam = solve_correctors(M2, 2, 0.0, 2.0, g, dt=0.01)
        r = float(residual_probe(M2, fam, eps, t_star))
        n_star = fam.q0 + 2
        assert r <= 1e-4 * abs(np.log(eps)) ** n_star


def test_residual_probe_input_validation():
    fam = solve_correctors(MQ, 1, 0.0, 1.0, G, dt=0.02)
    with pytest.raises(ValueError):
        residual_probe(MQ, fam, 0.5, 0.5)  # eps disagrees with the grid
    with pytest.raises(ValueError):
        residual_probe(MQ, fam, G.eps, 0.513)  # not a stored node


# ---------------------------------------------------------- duhamel


def test_duhamel_zero_generator_integrates_source():
    g = G
    u0 = band_state(g, bw=3, seed=1)
    f = band_state(g, bw=3, seed=2)
    tr = duhamel_solve(MatrixSymbol.scalar(const(0.0)), f, u0, g.eps, 1.0,
                       g, dt=0.01)
    want = to_fourier(u0).coeffs + 1.0 * to_fourier(f).coeffs
    got = to_fourier(tr.final).coeffs
    assert np.abs(got - want).max() < 1e-12


def test_duhamel_time_varying_source_quadrature():
    # M = 0 and f(t) = cos(t) f0: u(T) = u0 + sin(T) f0, trapezoid in t
    g = G
    u0 = band_state(g, bw=2, seed=3)
    f0 = band_state(g, bw=2, seed=4)
    c0 = to_fourier(f0).coeffs

    def f(t):
        return from_fourier(FourierState(np.cos(t) * c0, g))

    tr = duhamel_solve(MatrixSymbol.scalar(const(0.0)), f, u0, g.eps, 1.0,
                       g, dt=0.01)
    want = to_fourier(u0).coeffs + np.sin(1.0) * c0
    assert np.abs(to_fourier(tr.final).coeffs - want).max() < 1e-4


def test_duhamel_multiplication_flow_exact_solution():
    # xi-independent M: u(t) = e^{t M(x)} u0 pointwise on the grid
    g = GridSpec(1, 64, 20, 2.0 ** -5)
    m = MatrixSymbol.scalar(mul(const(0.1), cos_of(var_x(0))))
    u0 = band_state(g, bw=3, seed=5)
    tr = duhamel_solve(m, None, u0, g.eps, 1.0, g, dt=0.0025)
    x = 2.0 * np.pi * np.arange(g.n_x) / g.n_x
    want = np.exp(1.0 * 0.1 * np.cos(x))[:, None] * u0.values
    err = np.sqrt(np.mean(np.abs(tr.final.values - want) ** 2))
    assert err < 1e-8


def test_duhamel_matches_direct_flow():
    g = GridSpec(1, 64, 16, 2.0 ** -6)
    u0 = band_state(g, bw=3, N=2, seed=6)
    T = 1.5
    tr = duhamel_solve(M2, None, u0, g.eps, T, g)
    ref = evolve_linear(M2, g.eps, T, u0, refine_tol=1e-10)
    diff = np.sqrt(np.mean(np.abs(tr.final.values - ref.final.values) ** 2))
    lhs = g.eps * abs(np.log(g.eps)) ** 3
    assert diff <= 1e-6 * lhs


def test_duhamel_sourceless_run_is_sigma_plus_small():
    # with f = 0 the output is op(Sigma)u0 plus the inverted-remainder
    # correction, whose size is controlled by eps |ln eps|^{N*}
    g = GridSpec(1, 64, 16, 2.0 ** -6)
    u0 = band_state(g, bw=3, N=2, seed=6)
    T = 1.5
    tr = duhamel_solve(M2, None, u0, g.eps, T, g)
    gam = gamma_inf(M2, g, [0.0])
    q0 = q0_from(gam, T / abs(np.log(g.eps)))
    fam = solve_correctors(M2, q0, 0.0, T, g, dt=tr.dt)
    sig = assemble_sigma(fam, g.eps)
    A = sampled_op_matrix(sig.node(sig.n_nodes - 1))
    free = A @ to_fourier(u0).coeffs.reshape(-1)
    got = to_fourier(tr.final).coeffs.reshape(-1)
    corr = np.linalg.norm(got - free)
    n_star = q0 + 2
    assert corr <= 1e-3 * g.eps * abs(np.log(g.eps)) ** n_star
    assert corr > 0.0  # the correction is genuinely active


def test_duhamel_rejects_uncontractive_remainder():
    # high-frequency symbol at eps = 1/2: the Neumann series for
    # (Id + rho0)^{-1} visibly diverges and must be reported, not summed
    g = GridSpec(1, 64, 16, 0.5)
    m = MatrixSymbol.scalar(mul(const(2.5), cos_of(mul(const(10.0),
                                                       var_x(0))),
                                bracket(-1)), order=-1.0)
    u0 = band_state(g, bw=3, seed=7)
    with pytest.raises(ValueError, match="eps too large"):
        duhamel_solve(m, None, u0, g.eps, 1.0, g, dt=0.01)


def test_duhamel_surfaces_derivative_cap():
    # gamma T / |ln eps| large enough to demand q0 = 9 correctors
    g = GridSpec(1, 64, 16, 0.5)
    m = MatrixSymbol.scalar(mul(const(6.0), cos_of(var_x(0)), bracket(-1)),
                            order=-1.0)
    u0 = band_state(g, bw=3, seed=8)
    with pytest.raises(OrderExceededError):
        duhamel_solve(m, None, u0, g.eps, 1.0, g, dt=0.01)


def test_duhamel_input_validation():
    g = G
    u0 = band_state(g, bw=3, seed=9)
    with pytest.raises(NotImplementedError):
        duhamel_solve(MTD, None, band_state(g, bw=3, N=2, seed=9), g.eps,
                      1.0, g, dt=0.01)
    with pytest.raises(ValueError):
        duhamel_solve(MQ, None, u0, 0.5, 1.0, g, dt=0.01)  # eps mismatch
    with pytest.raises(ValueError):
        duhamel_solve(MQ, None, u0, g.eps, 0.0, g, dt=0.01)
    with pytest.raises(ValueError):
        duhamel_solve(MQ, None, band_state(GridSpec(1, 32, 8, G.eps)),
                      g.eps, 1.0, g, dt=0.01)
    with pytest.raises(TypeError):
        duhamel_solve(MQ, 3.14, u0, g.eps, 1.0, g, dt=0.01)


# --------------------------------------------------------- eps guard


def test_guard_passes_tame_symbol():
    m = MatrixSymbol.scalar(mul(const(0.05), cos_of(var_x(0))))
    rep = eps_guard(2.0 ** -6, m, 1.0, GridSpec(1, 64, 16, 2.0 ** -6))
    assert rep.passed and rep.margin > 1.0
    assert rep.lhs == pytest.approx(2.0 ** -6 * (6 * np.log(2)) ** rep.n_star)


def test_guard_fails_oscillatory_symbol():
    m = MatrixSymbol.scalar(mul(const(2.0), cos_of(mul(const(8.0),
                                                       var_x(0)))))
    rep = eps_guard(0.5, m, 1.0, GridSpec(1, 64, 16, 0.5))
    assert not rep.passed
    assert rep.threshold < rep.lhs


def test_guard_zero_symbol_always_passes():
    m = MatrixSymbol.scalar(const(0.0))
    for eps in (0.9, 0.5, 2.0 ** -8):
        rep = eps_guard(eps, m, 2.0, GridSpec(1, 64, 16, eps))
        assert rep.passed and rep.threshold == np.inf
    with pytest.raises(ValueError):
        eps_guard(1.0, m, 1.0, GridSpec(1, 64, 16, 1.0))
    with pytest.raises(ValueError):
        eps_guard(0.0, m, 1.0, GridSpec(1, 64, 16, 0.5))


# ----------------------------------------------------- serialization


def test_family_round_trip(tmp_path):
    g = GridSpec(1, 32, 8, 0.125)
    fam = solve_correctors(MQ, 2, 0.0, 0.2, g, dt=0.05)
    p = tmp_path / "fam.pdf2"
    save_family(fam, p)
    back = load_family(p)
    assert back.q0 == fam.q0 and back.tau == fam.tau
    assert back.gamma == pytest.approx(fam.gamma)
    assert np.array_equal(back.times, fam.times)
    for q in range(fam.q0 + 1):
        assert np.array_equal(back.values[q], fam.values[q])
    assert back.grid == fam.grid
    assert back.final_derivatives == {}


def test_family_load_rejects_foreign_files(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"PDF1" + b"\x00" * 64)
    with pytest.raises(ValueError):
        load_family(p)
    import json
    import struct
    m = json.dumps({"kind": "something-else"}).encode()
    (tmp_path / "kind.bin").write_bytes(b"PDF2" + struct.pack("<I", len(m))
                                        + m)
    with pytest.raises(ValueError):
        load_family(tmp_path / "kind.bin")
