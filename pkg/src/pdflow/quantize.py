"""Quantizations as linear operators on grid fields.

Semiclassical quantization follows the Fourier-series convention:
op(a)u = sum_k e^{ik.x} a(x, eps k) u_hat_k, the transform normalization
absorbed into the coefficients.  The L2 norm is the mean-square grid norm,
so Parseval reads (1/n) sum_j |u_j|^2 = sum_k |u_hat_k|^2 for band-limited
fields and sobolev_norm(u, 0, eps) equals the L2 norm exactly.

Weyl quantization is classical (unscaled frequencies) and kernel-based:
the midpoint lives on a doubled spatial grid, along the shorter arc, with
antipodal ties resolved to the arc through 0.  For symbols with only even
x-harmonics an exact Fourier-side matrix is available on grids with
n_x > 3K (no aliasing in the midpoint sums).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import svdvals

from .symbols import (
    GridSpec, MatrixSymbol, SampledSymbol, SymbolExpr, add, const, cutoff,
    eval_expr, mul, sample,
)

__all__ = [
    "StateVector", "FourierState", "to_fourier", "from_fourier",
    "op_eps_apply", "op_eps_adjoint_apply", "op_eps_matrix",
    "sampled_op_matrix", "weyl_grid",
    "sample_for_weyl",
    "weyl_kernel", "weyl_apply", "weyl_matrix", "weyl_fourier_matrix",
    "sobolev_norm", "l2_norm", "inner",
    "operator_norm_probe", "NormEstimate", "lp_filters", "DyadicFilterBank",
    "random_band_limited",
]


@dataclass(frozen=True)
class StateVector:
    """N-component complex field over the spatial grid (flat row-major)."""
    values: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.n_points:
            raise ValueError("values must have shape (n_x^d, N)")
        if not np.all(np.isfinite(v)):
            raise ValueError("state has non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def N(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FourierState:
    """Coefficients over the truncated lattice, k_lattice row-major order."""
    coeffs: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.ndim == 1:
            c = c[:, None]
        if c.ndim != 2 or c.shape[0] != self.grid.n_modes:
            raise ValueError("coeffs must have shape ((2K+1)^d, N)")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients have non-finite entries")
        object.__setattr__(self, "coeffs", c)

    @property
    def N(self) -> int:
        return self.coeffs.shape[1]


def _mode_axis_indices(g: GridSpec) -> np.ndarray:
    # FFT bin index of lattice frequency k, one spatial axis
    return np.arange(-g.K, g.K + 1) % g.n_x


def to_fourier(u: StateVector) -> FourierState:
    g = u.grid
    shape = (g.n_x,) * g.d + (u.N,)
    f = np.fft.fftn(u.values.reshape(shape), axes=tuple(range(g.d)))
    f /= g.n_points
    idx = _mode_axis_indices(g)
    sel = f[np.ix_(*([idx] * g.d))]
    return FourierState(sel.reshape(g.n_modes, u.N), g)


def from_fourier(c: FourierState) -> StateVector:
    g = c.grid
    full = np.zeros((g.n_x,) * g.d + (c.N,), dtype=complex)
    idx = _mode_axis_indices(g)
    full[np.ix_(*([idx] * g.d))] = c.coeffs.reshape(
        (2 * g.K + 1,) * g.d + (c.N,))
    v = np.fft.ifftn(full, axes=tuple(range(g.d))) * g.n_points
    return StateVector(v.reshape(g.n_points, c.N), g)


def l2_norm(u: StateVector) -> float:
    return float(np.sqrt(np.sum(np.abs(u.values) ** 2) / u.grid.n_points))


def inner(u: StateVector, v: StateVector) -> complex:
    """Mean-square inner product (conjugate-linear in the first slot)."""
    if u.grid != v.grid:
        raise ValueError("grid mismatch")
    return complex(np.vdot(u.values, v.values) / u.grid.n_points)


def sobolev_norm(u: StateVector, s: float, eps: float) -> float:
    """(sum_k <eps k>^{2s} |u_hat_k|^2)^{1/2}; eps=1 gives classical H^s."""
    g = u.grid
    c = to_fourier(u).coeffs
    k = g.k_lattice().astype(float)
    w = (1.0 + (eps * eps) * np.sum(k * k, axis=0)) ** s
    return float(np.sqrt(np.sum(w[:, None] * np.abs(c) ** 2)))


# ---------------------------------------------------------------------------
# semiclassical quantization

@lru_cache(maxsize=8)
def _phases(g: GridSpec) -> np.ndarray:
    """e^{i k.x_j}, shape (n_points, n_modes).  Cached: time steppers
    call the quantization thousands of times on one grid."""
    x = g.x_grid()
    k = g.k_lattice().astype(float)
    return np.exp(1j * (x.T @ k))


def op_eps_apply(a: SampledSymbol, u: StateVector) -> StateVector:
    """x |-> sum_k e^{ik.x} a(x, eps k) u_hat_k."""
    if a.grid != u.grid:
        raise ValueError("symbol and state grids differ")
    if not a.scaled:
        raise ValueError("op_eps needs a symbol sampled with scale_freq=True")
    if a.N != u.N:
        raise ValueError("component count mismatch")
    c = to_fourier(u).coeffs
    E = _phases(u.grid)
    out = np.einsum("jk,jkmn,kn->jm", E, a.values, c, optimize=True)
    return StateVector(out, u.grid)


def op_eps_adjoint_apply(a: SampledSymbol, v: StateVector) -> StateVector:
    """Exact adjoint of op_eps_apply for the mean-square inner product:
    w_hat_k = (1/n) sum_j e^{-ik.x_j} a(x_j, eps k)^dagger v_j."""
    if a.grid != v.grid:
        raise ValueError("symbol and state grids differ")
    if not a.scaled:
        raise ValueError("op_eps needs a symbol sampled with scale_freq=True")
    g = v.grid
    E = _phases(g)
    w = np.einsum("jk,jknm,jn->km", np.conj(E), np.conj(a.values), v.values,
                  optimize=True) / g.n_points
    return from_fourier(FourierState(w, g))


def op_eps_matrix(s: MatrixSymbol, g: GridSpec, t: float = 0.0) -> np.ndarray:
    """Matrix of to_fourier . op_eps(s) . from_fourier on mode
    coefficients, grid aliasing included: M[k',k] = a_hat_{(k'-k) mod
    n_x}(eps k).  Mode-major blocks, shape (n_modes*N, n_modes*N)."""
    return sampled_op_matrix(sample(s, g, scale_freq=True, t=t))


def sampled_op_matrix(a: SampledSymbol) -> np.ndarray:
    """Same mode matrix built from an evaluation table (d=1, scaled)."""
    g = a.grid
    if g.d != 1:
        raise NotImplementedError("the dense mode matrix is implemented "
                                  "for d=1")
    if not a.scaled:
        raise ValueError("op matrix needs semiclassical sampling")
    ahat = np.fft.fft(a.values, axis=0) / g.n_x   # (n_x, n_modes, N, N)
    ks = g.k_lattice()[0]
    m_idx = (ks[:, None] - ks[None, :]) % g.n_x
    A = ahat[m_idx, np.arange(g.n_modes)[None, :]]
    nm = g.n_modes
    return A.transpose(0, 2, 1, 3).reshape(nm * a.N, nm * a.N)


# ---------------------------------------------------------------------------
# Weyl quantization

def weyl_grid(g: GridSpec) -> GridSpec:
    """Doubled-x grid carrying midpoint samples for the Weyl kernel."""
    return GridSpec(g.d, 2 * g.n_x, g.K, g.eps)


def sample_for_weyl(s: MatrixSymbol, g: GridSpec, t: float = 0.0) -> SampledSymbol:
    return sample(s, weyl_grid(g), scale_freq=False, t=t)


def _midpoint_indices(n_x: int) -> np.ndarray:
    """mid[j, l]: index on the 2*n_x grid of the periodic midpoint of
    (x_j, y_l), shorter arc, antipodal ties to the arc through 0."""
    j = np.arange(n_x)[:, None]
    l = np.arange(n_x)[None, :]
    delta = (j - l) % n_x               # in grid steps
    signed = np.where(delta > n_x // 2, delta - n_x, delta)
    mid = (2 * l + signed) % (2 * n_x)  # half-step units
    if n_x % 2 == 0:
        tie = delta == n_x // 2
        cand_a = (2 * l + n_x // 2) % (2 * n_x) * np.ones_like(mid)
        cand_b = (2 * l - n_x // 2) % (2 * n_x) * np.ones_like(mid)
        dist_a = np.minimum(cand_a, 2 * n_x - cand_a)
        dist_b = np.minimum(cand_b, 2 * n_x - cand_b)
        pick_a = (dist_a < dist_b) | ((dist_a == dist_b) & (cand_a == n_x // 2))
        mid = np.where(tie, np.where(pick_a, cand_a, cand_b), mid)
    return mid


def weyl_kernel(a: SampledSymbol, target: GridSpec) -> np.ndarray:
    """Dense kernel T[j, l] (n_points x n_points x N x N) with
    (Au)_j = sum_l T[j,l] u_l.  a must be sampled on weyl_grid(target),
    unscaled frequencies."""
    g = target
    if a.scaled:
        raise ValueError("Weyl quantization needs scale_freq=False sampling")
    if a.grid != weyl_grid(g):
        raise ValueError("symbol must be sampled on the doubled grid")
    if g.d != 1:
        # kernel assembly is a dense n_points^2 sweep; product-grid midpoints
        # for d >= 2 are not wired up
        raise NotImplementedError("dense Weyl kernel is implemented for d=1")
    n = g.n_x
    mid = _midpoint_indices(n)
    k = g.k_lattice()[0].astype(float)
    dphase = np.exp(1j * g.h * np.outer(np.arange(-(n - 1), n), k))  # e^{ik h dd}
    T = np.empty((n, n, a.N, a.N), dtype=complex)
    for j in range(n):
        ph = dphase[j - np.arange(n) + (n - 1)]       # (l, modes)
        T[j] = np.einsum("lk,lkmn->lmn", ph, a.values[mid[j]],
                         optimize=True) / n
    return T


def weyl_apply(a: SampledSymbol, u: StateVector) -> StateVector:
    T = weyl_kernel(a, u.grid)
    out = np.einsum("jlmn,ln->jm", T, u.values, optimize=True)
    return StateVector(out, u.grid)


def weyl_matrix(a: SampledSymbol, target: GridSpec) -> np.ndarray:
    """Dense (n_points*N)^2 matrix acting on grid values."""
    T = weyl_kernel(a, target)
    n, N = T.shape[0], T.shape[2]
    return T.transpose(0, 2, 1, 3).reshape(n * N, n * N)


def weyl_fourier_matrix(s: MatrixSymbol, g: GridSpec, t: float = 0.0,
                        tol: float = 1e-10) -> np.ndarray:
    """Exact Fourier-side Weyl matrix A[k', q] = a_hat_{k'-q}((k'+q)/2) for
    symbols with only even x-harmonics, on grids with n_x > 3K (the
    midpoint phase sums then carry no aliasing and the matrix equals the
    conjugated dense kernel to rounding).  Shape (n_modes*N, n_modes*N)."""
    if g.d != 1:
        raise NotImplementedError("Fourier Weyl path is implemented for d=1")
    if g.n_x <= 3 * g.K:
        raise ValueError("need n_x > 3K for the alias-free Fourier path")
    n2 = 2 * g.n_x
    xs = np.arange(n2) * (math.pi / g.n_x)
    halfk = np.arange(-2 * g.K, 2 * g.K + 1) * 0.5     # xi = (k'+q)/2
    N = s.N
    vals = np.zeros((n2, len(halfk), N, N), dtype=complex)
    memo: dict = {}
    for i in range(N):
        for jj in range(N):
            vals[:, :, i, jj] = eval_expr(
                s.entry(i, jj), [xs[:, None]], [halfk[None, :]], t, memo=memo)
    ahat = np.fft.fft(vals, axis=0) / n2               # harmonics m mod n2
    ms = np.arange(-2 * g.K, 2 * g.K + 1)
    atab = ahat[ms % n2]                               # (m, xi, N, N)
    odd = np.abs(atab[(ms % 2) != 0]).max(initial=0.0)
    scale = max(np.abs(atab).max(), 1e-30)
    if odd > tol * scale:
        raise ValueError("symbol has odd x-harmonics; Fourier Weyl path "
                         "requires even harmonics only")
    ks = np.arange(-g.K, g.K + 1)
    m_idx = (ks[:, None] - ks[None, :]) + 2 * g.K      # index into ms
    x_idx = (ks[:, None] + ks[None, :]) + 2 * g.K      # index into halfk
    A = atab[m_idx, x_idx]                             # (k', q, N, N)
    nm = g.n_modes
    return A.transpose(0, 2, 1, 3).reshape(nm * N, nm * N)


# ---------------------------------------------------------------------------
# operator norm probe

class NormEstimate(float):
    """float with provenance: method, convergence flag, iterations."""
    method: str
    converged: bool
    iterations: int

    def __new__(cls, value: float, method: str, converged: bool,
                iterations: int):
        obj = super().__new__(cls, value)
        obj.method = method
        obj.converged = converged
        obj.iterations = iterations
        return obj


def _dense_from_apply(apply_fn, g: GridSpec, N: int) -> np.ndarray:
    dim = g.n_points * N
    A = np.empty((dim, dim), dtype=complex)
    for c in range(dim):
        e = np.zeros(dim, dtype=complex)
        e[c] = 1.0
        A[:, c] = apply_fn(StateVector(e.reshape(g.n_points, N), g)
                           ).values.ravel()
    return A


def operator_norm_probe(apply, trials: int = 3, *, grid: GridSpec,
                        N: int = 1, adjoint=None, tol: float = 1e-8,
                        max_iter: int = 500, dense_limit: int = 4096,
                        seed: int = 0) -> NormEstimate:
    """Largest singular value of a linear operator on StateVectors.

    With a closed-form adjoint: power iteration on adjoint o apply,
    restarted `trials` times, cap max_iter, tolerance tol, flagged when
    unconverged.  Without one, the dense matrix is assembled from basis
    probes; exact SVD up to dense_limit unknowns, else a Lanczos top
    singular value."""
    dim = grid.n_points * N
    if adjoint is None:
        A = _dense_from_apply(apply, grid, N)
        if dim <= dense_limit:
            return NormEstimate(float(svdvals(A)[0]), "dense", True, 0)
        from scipy.sparse.linalg import svds
        val = float(svds(A, k=1, return_singular_vectors=False)[0])
        return NormEstimate(val, "lanczos", True, 0)

    rng = np.random.default_rng(seed)
    best, best_iters, converged = 0.0, 0, False
    for _ in range(max(1, trials)):
        v = rng.standard_normal((grid.n_points, N)) \
            + 1j * rng.standard_normal((grid.n_points, N))
        v /= np.linalg.norm(v)
        lam, ok, it = 0.0, False, 0
        for it in range(1, max_iter + 1):
            w = adjoint(apply(StateVector(v, grid))).values
            nw = float(np.linalg.norm(w))
            if nw == 0.0:
                lam, ok = 0.0, True
                break
            if abs(nw - lam) <= tol * max(nw, 1e-30):
                lam, ok = nw, True
                break
            lam = nw
            v = w / nw
        if lam > best:
            best, best_iters = lam, it
        converged = converged or ok
    return NormEstimate(math.sqrt(best), "power", converged, best_iters)


# ---------------------------------------------------------------------------
# Littlewood-Paley filter banks

@dataclass(frozen=True)
class DyadicFilterBank:
    """J+1 dyadic blocks: phi_j a partition of unity on the lattice, psi_j
    identically 1 on supp phi_j.  Block J closes the telescope at the
    lattice edge, which pins K = 2^{J+1} (tested)."""
    J: int
    grid: GridSpec
    phi: np.ndarray                 # (J+1, n_modes) real
    psi: np.ndarray
    phi_exprs: tuple
    psi_exprs: tuple


def lp_filters(J: int, g: GridSpec) -> DyadicFilterBank:
    if J < 1:
        raise ValueError("need at least two blocks (J >= 1)")
    if 2 ** (J + 1) > g.K:
        raise ValueError("cutoff too small: need 2^{J+1} <= K")

    def low(j: int) -> SymbolExpr:
        # 1 on |xi| <= 2^j, 0 on |xi| >= 2^{j+1}
        return cutoff(float(2 ** j), float(2 ** (j + 1)))

    one = const(1)
    phi_exprs = [low(0)]
    for j in range(1, J):
        phi_exprs.append(add(low(j), mul(const(-1), low(j - 1))))
    phi_exprs.append(add(one, mul(const(-1), low(J - 1))))

    psi_exprs = [low(1)]
    for j in range(1, J):
        psi_exprs.append(mul(low(j + 1),
                             add(one, mul(const(-1), low(j - 2)))))
    psi_exprs.append(add(one, mul(const(-1), low(J - 2))))

    k = g.k_lattice().astype(float)
    xi = [k[i] for i in range(g.d)]
    x0 = [np.zeros(1)] * g.d
    phi = np.stack([np.broadcast_to(
        np.real(eval_expr(e, x0, xi)), (g.n_modes,)).copy()
        for e in phi_exprs])
    psi = np.stack([np.broadcast_to(
        np.real(eval_expr(e, x0, xi)), (g.n_modes,)).copy()
        for e in psi_exprs])
    return DyadicFilterBank(J, g, phi, psi, tuple(phi_exprs), tuple(psi_exprs))


def random_band_limited(g: GridSpec, N: int = 1, seed: int = 0,
                        decay: float = 0.0) -> StateVector:
    """Random state with iid Gaussian coefficients, optional <k>^{-decay}
    profile, unit L2 norm."""
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((g.n_modes, N)) + 1j * rng.standard_normal(
        (g.n_modes, N))
    if decay:
        k = g.k_lattice().astype(float)
        w = (1.0 + np.sum(k * k, axis=0)) ** (-decay / 2.0)
        c *= w[:, None]
    c /= np.linalg.norm(c)
    return from_fourier(FourierState(c, g))
