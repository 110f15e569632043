"""Flow-based verification of lower bounds for nonnegative symbols, d = 1.

The chain implemented here: dyadic frequency localization a_j = phi_j a +
2^{-j theta} on per-block grids, reformulation of the block inequality
(a_j^w u_j, u_j) >= 0 as contraction of the backward flow
|exp(-t a_j^w) u_j| <= |u_j|, the corrector hierarchy S_q behind that
reformulation in an exact integrating-factor form S_q = exp(-t a_j) P_q
with P_q polynomial in t (tabulated coefficients, no time stepping),
growth and gradient checks for the correctors, and dense quadratic-form
verification of (Re a^w) + c <D>^{-theta} >= -1e-8 with the smallest
admissible c found by bisection.

Everything is classical quantization: frequencies enter unscaled, so
grid.eps is never read on this path (block grids carry a placeholder).
Scalar symbols only (N = 1, d = 1).  L2 norms are RMS over grid points,
which equals the flat 2-norm of Fourier coefficients, so flows run
directly on coefficient vectors with dense hermitian generators.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import comb, factorial
from pathlib import Path
from typing import Optional

import numpy as np

from .symbols import (GridSpec, MatrixSymbol, OrderExceededError, SampledSymbol,
                      add, const, differentiate, eval_expr, mul, multi_indices,
                      sample, symbol_norm)
from .quantize import (FourierState, StateVector, from_fourier, lp_filters,
                       random_band_limited, sample_for_weyl, to_fourier,
                       weyl_fourier_matrix, weyl_grid, weyl_matrix)

_PSI_TOL = 1e-9           # lattice support of psi_j for restriction purposes
_EIG_FLOOR = -1e-8        # tolerated negativity of dense hermitian forms
_MAX_DERIV = 12           # hard cap on symbol derivative order used here


# ---------------------------------------------------------------------------
# corrector depth and observation horizon

def corrector_depth(theta: float, c_d: int = 1) -> int:
    """Truncation depth q0 = 1 + c_d * floor(theta / (1 - theta)).

    c_d is a dimensional calibration constant, exposed because only its
    order matters for the contraction argument; d = 1 ships c_d = 1.
    The quotient is nudged by 1e-9 before flooring: rationals like 2/3
    are not binary floats and their quotient lands a few ulps below the
    intended integer, which would silently drop the last corrector.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie strictly inside (0, 1)")
    if c_d < 1:
        raise ValueError("c_d must be a positive integer")
    return 1 + c_d * math.floor(theta / (1.0 - theta) + 1e-9)


def observation_time(j: int, theta: float, tau_star: float = 4.0) -> float:
    """Horizon t*(j) = j * tau_star * 2^{j theta} for the block flow test."""
    return j * tau_star * 2.0 ** (j * theta)


# ---------------------------------------------------------------------------
# Weyl composition terms

def diamond(s1: MatrixSymbol, s2: MatrixSymbol, k: int, *,
            max_order: int = _MAX_DERIV) -> MatrixSymbol:
    """k-th term of the Weyl product expansion of s1 and s2, exactly:

        s1 <>_k s2 = sum_{|al|+|be|=k} (-1)^{|al|} (-i)^k / (2^k al! be!)
                     * d_x^al d_xi^be s1 * d_x^be d_xi^al s2.

    Scalar symbols only.  k = 0 is the plain product; k = 1 equals
    (1/2i) {s1, s2}.  Returned as an exact expression tree, so it can be
    sampled or quantized like any other symbol.
    """
    if s1.N != 1 or s2.N != 1:
        raise ValueError("composition terms are implemented for scalars")
    if s1.d != s2.d:
        raise ValueError("symbol dimensions differ")
    if k < 0:
        raise ValueError("term index must be nonnegative")
    if k > max_order:
        raise OrderExceededError(
            f"composition term {k} exceeds derivative cap {max_order}")
    d = s1.d
    terms = []
    for al in multi_indices(d, k):
        ka = sum(al)
        be_total = k - ka
        for be in multi_indices(d, be_total):
            if sum(be) != be_total:
                continue
            coef = ((-1) ** ka) * ((-1j) ** k) / (
                2 ** k
                * math.prod(factorial(a) for a in al)
                * math.prod(factorial(b) for b in be))
            e1 = differentiate(s1, al, be, max_order=max_order).entry(0, 0)
            e2 = differentiate(s2, be, al, max_order=max_order).entry(0, 0)
            terms.append(mul(const(coef), e1, e2))
    return MatrixSymbol.scalar(add(*terms), d=d, order=s1.order + s2.order - k)


# ---------------------------------------------------------------------------
# dyadic blocks

@dataclass(frozen=True)
class DyadicBlock:
    """One localized piece a_j = phi_j * (a / scale) + 2^{-j theta}.

    The block carries its own grid with K = 2^{j+2} and n_x = 4 K, large
    enough for the alias-free Fourier quantization path.  psi holds the
    wider filter sampled on the block lattice (identically 1 on supp
    phi_j); k_hi is None for the closure block, whose filter extends to
    the lattice edge.  scale records the normalization divisor applied
    to a.  eps on the block grid is a placeholder: this module runs
    classical quantization and never reads it.
    """
    j: int
    theta: float
    a_j: MatrixSymbol
    grid: GridSpec
    psi: np.ndarray
    floor: float
    k_lo: int
    k_hi: Optional[int]
    scale: float
    a_sup: float

    def annulus(self) -> np.ndarray:
        """Lattice points carrying the x-dependence of a_j (both signs).
        Outside, a_j equals the constant floor to rounding (exactly so
        beyond the outer filter edge)."""
        ks = self.grid.k_lattice()[0]
        hi = self.grid.K if self.k_hi is None else min(self.k_hi, self.grid.K)
        m = (np.abs(ks) >= self.k_lo) & (np.abs(ks) <= hi)
        return ks[m]

    def validate(self) -> None:
        """Grid checks: a_j real, >= floor everywhere, and x/xi derivatives
        vanishing off the annulus.  Beyond the outer edge the filter and
        its derivatives are float-exact zeros; on the inner plateau the
        derivative tree cancels only to rounding, so the check allows
        1e-14 relative to the derivative scale."""
        tab = sample(self.a_j, self.grid, scale_freq=False).values[:, :, 0, 0]
        scale = max(np.abs(tab).max(), 1e-30)
        if np.abs(tab.imag).max() > 1e-12 * scale:
            raise ValueError("block symbol is not real on the grid")
        if tab.real.min() < self.floor * (1.0 - 1e-12) - 1e-14:
            raise ValueError("block symbol drops below its floor")
        ks = self.grid.k_lattice()[0]
        hi = self.grid.K if self.k_hi is None else self.k_hi
        outside = (np.abs(ks) < self.k_lo) | (np.abs(ks) > hi)
        if outside.any():
            for al, be in ((1, 0), (0, 1)):
                dtab = sample(differentiate(self.a_j, (al,), (be,)),
                              self.grid, scale_freq=False).values[:, :, 0, 0]
                worst = np.abs(dtab[:, outside]).max()
                dscale = max(np.abs(dtab).max(), 1e-30)
                if worst > 1e-14 * dscale:
                    raise ValueError(
                        f"derivative leaks outside the annulus ({worst:.3e})")


def dyadic_blocks(a: MatrixSymbol, theta: float, J: int, g: GridSpec, *,
                  js=None, normalize: bool = True,
                  norm_r: Optional[int] = None) -> list:
    """Split a nonnegative scalar symbol into J+1 localized blocks.

    Block j gets a_j = phi_j(xi) a(x, xi) / scale + 2^{-j theta} on its
    own grid with K_j = 2^{j+2}.  With normalize=True, scale is
    max(1, |a|_{r(theta)}) with r(theta) = 2 q0 + 4 measured on g, so
    the localized family has norms bounded by 1.  The filters come from
    the same dyadic bank used everywhere else, which pins 2^{J+1} <= g.K.
    js restricts which blocks are built (they are independent).
    """
    if a.N != 1 or a.d != 1:
        raise ValueError("dyadic localization is implemented for scalar d=1")
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie strictly inside (0, 1)")
    tab = sample(a, g, scale_freq=False).values[:, :, 0, 0]
    scale0 = max(np.abs(tab).max(), 1e-30)
    if np.abs(tab.imag).max() > 1e-12 * scale0:
        raise ValueError("symbol must be real")
    if tab.real.min() < -1e-10 * scale0:
        raise ValueError("symbol must be nonnegative on the grid")

    bank = lp_filters(J, g)
    q0 = corrector_depth(theta)
    r_theta = 2 * q0 + 4
    if normalize:
        if norm_r is None:
            norm_r = r_theta
        nrm = symbol_norm(a, norm_r, g, max_order=max(norm_r + 2, 8))
        scale = max(1.0, float(nrm))
    else:
        scale = 1.0
    ae = a.entry(0, 0)
    if scale != 1.0:
        ae = mul(const(1.0 / scale), ae)

    if js is None:
        js = range(J + 1)
    blocks = []
    for j in js:
        if not 0 <= j <= J:
            raise ValueError("block index outside the bank")
        K_j = 2 ** (j + 2)
        # eps placeholder: the classical path never reads it
        gj = GridSpec(1, 4 * K_j, K_j, 0.5)
        floor = 2.0 ** (-j * theta)
        a_j = MatrixSymbol.scalar(
            add(mul(bank.phi_exprs[j], ae), const(floor)), order=0.0)
        ks = gj.k_lattice()[0].astype(float)
        psi = eval_expr(bank.psi_exprs[j], [np.zeros_like(ks)], [ks]).real
        if j == 0:
            k_lo, k_hi = 0, 2
        elif j == J:
            k_lo, k_hi = 2 ** (J - 1), None
        else:
            k_lo, k_hi = 2 ** (j - 1), 2 ** (j + 1)
        tab_j = sample(a_j, gj, scale_freq=False).values[:, :, 0, 0].real
        blocks.append(DyadicBlock(j, theta, a_j, gj, psi, floor, k_lo, k_hi,
                                  scale, float(tab_j.max())))
    return blocks


# ---------------------------------------------------------------------------
# block generator and flows

def block_generator(blk: DyadicBlock, *, cap: int = 2048,
                    tol: float = 1e-10):
    """Dense hermitian Fourier-side matrix of a_j^w on the block lattice.

    Tries the exact alias-free path first (needs even x-harmonics);
    falls back to the dense kernel conjugated into the Fourier basis,
    capped at n_x <= cap.  Returns (A, used_fourier_path).
    """
    g = blk.grid
    try:
        A = weyl_fourier_matrix(blk.a_j, g, tol=tol)
        fourier = True
    except ValueError:
        if g.n_x > cap:
            raise ValueError(
                "dense kernel fallback is capped at n_x <= %d; supply a "
                "symbol with even x-harmonics for larger blocks" % cap)
        T = weyl_matrix(sample_for_weyl(blk.a_j, g), g)
        x = g.x_grid()[0]
        ks = g.k_lattice()[0]
        E = np.exp(1j * np.outer(x, ks))
        A = E.conj().T @ (T @ E) / g.n_x
        fourier = False
    H = 0.5 * (A + A.conj().T)
    dev = np.abs(A - H).max()
    if dev > 1e-8 * max(1.0, np.abs(H).max()):
        raise ValueError("quantized block is not self-adjoint on this grid")
    return H, fourier


def _rk4(A: np.ndarray, v: np.ndarray, t: float, dt: float) -> np.ndarray:
    """Classical fourth-order steps for v' = A v; v may carry columns."""
    if t == 0.0:
        return v.copy()
    n = max(1, int(math.ceil(t / dt)))
    h = t / n
    for _ in range(n):
        k1 = A @ v
        k2 = A @ (v + 0.5 * h * k1)
        k3 = A @ (v + 0.5 * h * k2)
        k4 = A @ (v + h * k3)
        v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return v


def _block_dt(blk: DyadicBlock, dt: Optional[float]) -> float:
    return dt if dt is not None else 0.2 / max(1.0, blk.a_sup)


def _project(blk: DyadicBlock, u: StateVector) -> np.ndarray:
    if u.grid != blk.grid:
        raise ValueError("state lives on a different grid than the block")
    if u.N != 1:
        raise ValueError("scalar states only")
    c = to_fourier(u).coeffs[:, 0]
    cj = c * blk.psi
    if np.linalg.norm(cj) < 1e-13 * max(np.linalg.norm(c), 1e-30):
        raise ValueError("state has no mass in block %d" % blk.j)
    return cj


@dataclass(frozen=True)
class FlowResult:
    """Outcome of one backward flow test; truthy iff the test passed."""
    passed: bool
    margin: float
    t: float
    norm_in: float
    norm_out: float

    def __bool__(self) -> bool:
        return self.passed

    def as_dict(self) -> dict:
        return {"passed": self.passed, "margin": self.margin, "t": self.t,
                "norm_in": self.norm_in, "norm_out": self.norm_out}


def backward_flow_test(blk: DyadicBlock, u: StateVector, t: float, *,
                       dt: Optional[float] = None,
                       generator: Optional[np.ndarray] = None) -> FlowResult:
    """Evolve the localized piece of u backward for time t and compare
    norms: margin = 1 - |exp(-t a_j^w) psi_j(D) u| / |psi_j(D) u|.
    The inequality to verify is margin >= 0; t = 0 gives margin 0."""
    if t < 0:
        raise ValueError("the test runs the backward flow for t >= 0")
    cj = _project(blk, u)
    n_in = float(np.linalg.norm(cj))
    if t == 0.0:
        return FlowResult(True, 0.0, 0.0, n_in, n_in)
    A = generator if generator is not None else block_generator(blk)[0]
    v = _rk4(-A, cj, t, _block_dt(blk, dt))
    n_out = float(np.linalg.norm(v))
    margin = 1.0 - n_out / n_in
    return FlowResult(margin >= 0.0, margin, t, n_in, n_out)


def backward_margin_path(blk: DyadicBlock, u: StateVector, t: float, *,
                         n_nodes: int = 33, dt: Optional[float] = None,
                         generator: Optional[np.ndarray] = None):
    """Margins along one backward sweep, sampled at n_nodes node times
    spanning [0, t].  Returns (times, margins); u may carry columns if
    passed as a coefficient matrix via backward_margin_path_coeffs."""
    cj = _project(blk, u)
    ts, ms = backward_margin_path_coeffs(blk, cj[:, None], t,
                                         n_nodes=n_nodes, dt=dt,
                                         generator=generator)
    return ts, ms[:, 0]


def backward_margin_path_coeffs(blk: DyadicBlock, C: np.ndarray, t: float, *,
                                n_nodes: int = 33,
                                dt: Optional[float] = None,
                                generator: Optional[np.ndarray] = None):
    """Batched margin paths for coefficient columns already localized to
    the block.  Returns (times (n_nodes,), margins (n_nodes, n_cols))."""
    if t <= 0:
        raise ValueError("need a positive horizon")
    A = generator if generator is not None else block_generator(blk)[0]
    h = _block_dt(blk, dt)
    ts = np.linspace(0.0, t, n_nodes)
    n_in = np.linalg.norm(C, axis=0)
    if (n_in == 0.0).any():
        raise ValueError("a column carries no mass")
    out = np.empty((n_nodes, C.shape[1]))
    out[0] = 0.0
    v = C.astype(complex)
    for m in range(1, n_nodes):
        v = _rk4(-A, v, ts[m] - ts[m - 1], h)
        out[m] = 1.0 - np.linalg.norm(v, axis=0) / n_in
    return ts, out


def flow_states(blk: DyadicBlock, u: StateVector, t: float, *,
                forward: bool = True, n_nodes: int = 17,
                dt: Optional[float] = None,
                generator: Optional[np.ndarray] = None):
    """Coefficient snapshots of the localized flow at equispaced nodes.
    Returns (times, states (n_nodes, n_modes)).  forward=False runs the
    contraction direction."""
    cj = _project(blk, u)
    A = generator if generator is not None else block_generator(blk)[0]
    sgn = 1.0 if forward else -1.0
    h = _block_dt(blk, dt)
    ts = np.linspace(0.0, t, n_nodes)
    path = np.empty((n_nodes, cj.size), dtype=complex)
    path[0] = cj
    v = cj
    for m in range(1, n_nodes):
        v = _rk4(sgn * A, v, ts[m] - ts[m - 1], h)
        path[m] = v
    return ts, path


# ---------------------------------------------------------------------------
# corrector hierarchy, exact in time

def _deriv_tables(blk: DyadicBlock, width: int, xs: np.ndarray,
                  ks: np.ndarray, max_order: int) -> dict:
    """Exact tables T[(al, be)] = d_x^al d_xi^be a_j on xs x ks."""
    memo: dict = {}
    T = {}
    for al in range(width + 1):
        for be in range(width + 1 - al):
            e = differentiate(blk.a_j, (al,), (be,),
                              max_order=max_order).entry(0, 0)
            tab = eval_expr(e, [xs[:, None]], [ks[None, :].astype(float)],
                            memo=memo)
            tab = np.asarray(tab, dtype=complex) + np.zeros(
                (xs.size, ks.size), dtype=complex)
            T[(al, be)] = tab.real.copy()
    return T


def _field_terms(q: int, a: int, b: int):
    """Source terms of the integrated hierarchy for the field
    Y = d_x^a d_xi^b S_q after removing the self term:

        P' = sum coef * T[key] * P_source.

    First group: Leibniz expansion of -a_j * S_q.  Second group: the
    composition terms -a_j <>_{q1} S_{q-q1} expanded the same way.
    """
    terms = []
    for a1 in range(a + 1):
        for b1 in range(b + 1):
            if a1 == 0 and b1 == 0:
                continue
            terms.append((-float(comb(a, a1) * comb(b, b1)) + 0j,
                          (a1, b1), (q, a - a1, b - b1)))
    for q1 in range(1, q + 1):
        q2 = q - q1
        for i in range(q1 + 1):
            ll = q1 - i
            kappa = ((-1) ** i) * ((-1j) ** q1) / (
                2 ** q1 * factorial(i) * factorial(ll))
            for a1 in range(a + 1):
                for b1 in range(b + 1):
                    coef = -kappa * comb(a, a1) * comb(b, b1)
                    terms.append((coef, (a1 + i, b1 + ll),
                                  (q2, a - a1 + ll, b - b1 + i)))
    return terms


@dataclass(frozen=True)
class WeylCorrectorFamily:
    """Correctors S_q and their derivatives on a sample set, exactly:

        d_x^a d_xi^b S_q (t) = exp(-t a_j) * polyval(coeffs[(q,a,b)], t).

    coeffs maps (q, a, b) with q <= depth and q + a + b <= width to
    ascending-power stacks of shape (deg+1, n_x_samples, n_k_samples).
    The representation is exact in t because a_j is time independent
    and the hierarchy is pointwise, so the integrating factor
    exp(t a_j) turns it into polynomial quadrature.  S_0 = exp(-t a_j)
    holds identically and the S_1 field is a bit-exact zero; derivative
    fields of S_1 vanish only to rounding (their source terms cancel as
    differently grouped products).  Lattice points off the block
    annulus contribute the constant exp(-t floor) and are not stored.
    """
    block: DyadicBlock
    q0: int
    depth: int
    width: int
    xs: np.ndarray
    ks: np.ndarray
    a0: np.ndarray
    coeffs: dict
    t_star: float
    on_weyl_grid: bool

    def value(self, q: int, t, a: int = 0, b: int = 0) -> np.ndarray:
        """Exact table of d_x^a d_xi^b S_q at time t."""
        stack = self.coeffs[(q, a, b)]
        out = stack[-1].astype(complex)
        for layer in stack[-2::-1]:
            out = out * t + layer
        return np.exp(-t * self.a0) * out

    def sigma_values(self, t) -> np.ndarray:
        """Truncated sum Sigma(t) = sum_{q < q0} S_q(t) on the samples."""
        out = self.value(0, t).astype(complex)
        for q in range(1, self.q0):
            out = out + self.value(q, t)
        return out

    def weighted_sup(self, q: int, a: int, b: int, t) -> float:
        """sup over samples of <k>^{q+b} |d_x^a d_xi^b S_q(t)|, the sup
        matching the declared order -q of S_q."""
        jap = np.sqrt(1.0 + self.ks.astype(float) ** 2)
        w = jap[None, :] ** (q + b)
        return float(np.abs(self.value(q, t, a, b) * w).max())

    def field_magnitude(self, q: int, a: int, b: int) -> float:
        """Largest polynomial coefficient of the field, for telling
        genuinely zero fields from rounding residue."""
        return float(np.abs(self.coeffs[(q, a, b)]).max())

    def sigma_norm0(self, t) -> float:
        """Order-zero norm proxy of Sigma: sup of <k>^b |d^a d^b Sigma|
        over a + b <= 2."""
        jap = np.sqrt(1.0 + self.ks.astype(float) ** 2)
        best = 0.0
        for a in range(3):
            for b in range(3 - a):
                tab = sum(self.value(q, t, a, b) for q in range(self.q0))
                best = max(best, float(
                    np.abs(tab * jap[None, :] ** b).max()))
        return best

    def sigma_seminorm(self, t) -> float:
        """sum_{q < q0} |S_q(t)|_{q0 - q} measured as weighted sups over
        derivative orders a + b <= q0 - q + 2 (the widths this family
        carries)."""
        total = 0.0
        for q in range(self.q0):
            cap = min(self.width - q, self.q0 - q + 2)
            best = 0.0
            for a in range(cap + 1):
                for b in range(cap + 1 - a):
                    best = max(best, self.weighted_sup(q, a, b, t))
            total += best
        return total

    def smallness(self, t: Optional[float] = None, n_times: int = 33):
        """Contraction premise t 2^{-j q0} sup_{s <= t} sigma(s); the
        argument must stay below 1/2 for the truncation to close.
        Returns (value, value < 1/2)."""
        if t is None:
            t = self.t_star
        ts = np.linspace(0.0, t, n_times)
        sup = max(self.sigma_seminorm(s) for s in ts)
        val = t * 2.0 ** (-self.block.j * self.q0) * sup
        return float(val), bool(val < 0.5)

    def sigma_sampled(self, t) -> SampledSymbol:
        """Sigma(t) tabulated for Weyl quantization on the block grid.
        Off-annulus lattice columns hold the exact constant
        exp(-t floor).  Needs the family built with on_weyl_grid."""
        if not self.on_weyl_grid:
            raise ValueError("family was built on a thinned sample set; "
                             "rebuild with on_weyl_grid=True to quantize")
        g = self.block.grid
        n2 = 2 * g.n_x
        vals = np.full((n2, g.n_modes), np.exp(-t * self.block.floor),
                       dtype=complex)
        cols = (self.ks + g.K).astype(int)
        vals[:, cols] = self.sigma_values(t)
        return SampledSymbol(vals[:, :, None, None], 0.0, weyl_grid(g), False)


def weyl_correctors(blk: DyadicBlock, theta: Optional[float] = None, *,
                    c_d: int = 1, extra_orders: int = 2,
                    tau_star: float = 4.0, max_order: int = _MAX_DERIV,
                    on_weyl_grid: bool = True, x_cap: int = 48,
                    k_cap: int = 64):
    """Build the corrector family for one block and hand back
    (family, sigma) where sigma(t) is the quantization-ready table of
    the truncated sum.

    Fields (q, a, b) are computed for q <= q0 and q + a + b <= q0 +
    extra_orders; extra_orders = 2 covers the growth checks and the
    seminorms entering the smallness premise.  on_weyl_grid=False thins
    the sample set (x_cap points in x, k_cap annulus modes) for cheap
    sup-norm work; sigma is then unavailable.
    """
    if theta is None:
        theta = blk.theta
    if theta != blk.theta:
        raise ValueError("theta disagrees with the block")
    q0 = corrector_depth(theta, c_d)
    depth = q0
    width = q0 + extra_orders
    if width > max_order:
        raise OrderExceededError(
            f"hierarchy needs derivatives of order {width}, above the cap "
            f"{max_order}; lower theta or extra_orders")
    g = blk.grid
    ks_full = blk.annulus().astype(float)
    if on_weyl_grid:
        xs = np.arange(2 * g.n_x) * (math.pi / g.n_x)
        ks = ks_full
    else:
        xs = g.x_grid()[0]
        if xs.size > x_cap:
            xs = xs[:: max(1, xs.size // x_cap)]
        ks = ks_full
        if ks.size > k_cap:
            idx = np.unique(np.linspace(0, ks.size - 1, k_cap).astype(int))
            ks = ks[idx]

    T = _deriv_tables(blk, width, xs, ks, max_order)
    a0 = T[(0, 0)]
    fields = [(q, a, b)
              for q in range(depth + 1)
              for a in range(width + 1)
              for b in range(width + 1 - a)
              if q + a + b <= width]
    fields.sort(key=lambda f: (f[0] + f[1] + f[2], f[0]))
    shape = (xs.size, ks.size)
    coeffs: dict = {}
    for (q, a, b) in fields:
        terms = _field_terms(q, a, b)
        deg = 0
        for _, _, src in terms:
            if src in coeffs:
                deg = max(deg, coeffs[src].shape[0])
        rhs = np.zeros((deg,) + shape, dtype=complex)
        for coef, key, src in terms:
            if src not in coeffs:
                continue
            P = coeffs[src]
            rhs[: P.shape[0]] += coef * T[key][None, :, :] * P
        out = np.zeros((deg + 1,) + shape, dtype=complex)
        if (q, a, b) == (0, 0, 0):
            out[0] = 1.0
        if deg:
            out[1:] = rhs / np.arange(1, deg + 1)[:, None, None]
        while out.shape[0] > 1 and not np.any(out[-1]):
            out = out[:-1]
        coeffs[(q, a, b)] = out

    fam = WeylCorrectorFamily(blk, q0, depth, width, xs, ks, a0, coeffs,
                              observation_time(blk.j, theta, tau_star),
                              on_weyl_grid)
    return fam, (fam.sigma_sampled if on_weyl_grid else None)


# ---------------------------------------------------------------------------
# corrector growth and gradient checks

@dataclass(frozen=True)
class GrowthEntry:
    q: int
    a: int
    b: int
    exponent: float
    bound: float
    prefactor: float
    is_zero: bool
    passed: bool

    def as_dict(self) -> dict:
        return {"q": self.q, "a": self.a, "b": self.b,
                "exponent": self.exponent, "bound": self.bound,
                "prefactor": self.prefactor, "is_zero": self.is_zero,
                "passed": self.passed}


@dataclass(frozen=True)
class GrowthReport:
    j: int
    theta: float
    t_star: float
    entries: tuple
    passed: bool

    def as_dict(self) -> dict:
        return {"j": self.j, "theta": self.theta, "t_star": self.t_star,
                "entries": [e.as_dict() for e in self.entries],
                "passed": self.passed}


def corrector_growth_check(blk: DyadicBlock, *, tau_star: float = 4.0,
                           c_d: int = 1, slack: float = 0.2,
                           n_times: int = 24,
                           family: Optional[WeylCorrectorFamily] = None
                           ) -> GrowthReport:
    """Fit the time growth of w(t) = e^{t floor} <k>^{q+b} sup|d^a d^b S_q|
    against (1+t)^{q + (a+b)/2} on [2, t*].

    The claimed envelope is P (1+t)^{q+(a+b)/2} e^{-t floor}; after
    removing the decay the fitted log-slope must stay below the
    polynomial exponent plus slack.  The slope is fitted on the late
    window [t*/8, t*]: the envelope exponent is an asymptotic
    statement, reached once t exceeds the reciprocal of the block
    amplitude, so blocks normalized down by a large constant need a
    horizon past that scale for the fit to be meaningful.  Identically
    zero fields (S_1 and its derivatives) are recorded as such and pass
    trivially.  The prefactor is the sup over [0, t*] of
    w / (1+t)^bound.
    """
    t_star = observation_time(blk.j, blk.theta, tau_star)
    if t_star <= 4.0:
        raise ValueError("horizon too short to fit growth; raise j or tau")
    if family is None:
        family, _ = weyl_correctors(blk, c_d=c_d, tau_star=tau_star,
                                    on_weyl_grid=False)
    ts_fit = np.geomspace(max(2.0, t_star / 8.0), t_star, n_times)
    ts_all = np.concatenate([np.linspace(0.0, 2.0, 9)[1:-1],
                             np.geomspace(2.0, t_star, n_times)])
    ref = max(family.field_magnitude(*f) for f in family.coeffs)
    entries = []
    for q in range(family.q0 + 1):
        for a in range(3):
            for b in range(3 - a):
                if q + a + b > family.width:
                    continue
                bound = q + 0.5 * (a + b)
                if family.field_magnitude(q, a, b) <= 1e-12 * ref:
                    entries.append(GrowthEntry(q, a, b, float("-inf"),
                                               bound, 0.0, True, True))
                    continue
                w_fit = np.array([
                    family.weighted_sup(q, a, b, t) * math.exp(
                        t * blk.floor) for t in ts_fit])
                slope = float(np.polyfit(np.log1p(ts_fit),
                                         np.log(w_fit), 1)[0])
                w_all = np.array([
                    family.weighted_sup(q, a, b, t) * math.exp(
                        t * blk.floor) for t in ts_all])
                pref = float((w_all / (1.0 + ts_all) ** bound).max())
                entries.append(GrowthEntry(q, a, b, slope, bound, pref,
                                           False, slope <= bound + slack))
    ok = all(e.passed for e in entries)
    return GrowthReport(blk.j, blk.theta, t_star, tuple(entries), ok)


@dataclass(frozen=True)
class GradientEntry:
    h: float
    n_points: int
    grad_max: float
    bound: float
    passed: bool

    def as_dict(self) -> dict:
        return {"h": self.h, "n_points": self.n_points,
                "grad_max": self.grad_max, "bound": self.bound,
                "passed": self.passed}


@dataclass(frozen=True)
class GradientReport:
    j: int
    entries: tuple
    passed: bool

    def as_dict(self) -> dict:
        return {"j": self.j, "entries": [e.as_dict() for e in self.entries],
                "passed": self.passed}


def gradient_bound_check(blk: DyadicBlock, hs=None) -> GradientReport:
    """Nonnegativity forces flat gradients near the bottom: on each
    sublevel set {a_j < h} the checks max|d_x a_j| <= 4 sqrt(h) and
    max <k>|d_xi a_j| <= 4 sqrt(h) must hold (exact derivative tables
    on the block grid).  Empty sublevels pass vacuously and are
    recorded with n_points = 0."""
    if hs is None:
        hs = [2.0 ** (-m) for m in range(2, 9)]
    g = blk.grid
    tab = sample(blk.a_j, g, scale_freq=False).values[:, :, 0, 0].real
    gx = sample(differentiate(blk.a_j, (1,), (0,)), g,
                scale_freq=False).values[:, :, 0, 0]
    gxi = sample(differentiate(blk.a_j, (0,), (1,)), g,
                 scale_freq=False).values[:, :, 0, 0]
    jap = np.sqrt(1.0 + g.k_lattice()[0].astype(float) ** 2)
    grad = np.maximum(np.abs(gx), jap[None, :] * np.abs(gxi))
    entries = []
    for h in hs:
        m = tab < h
        n = int(m.sum())
        worst = float(grad[m].max()) if n else 0.0
        bound = 4.0 * math.sqrt(h)
        entries.append(GradientEntry(float(h), n, worst, bound,
                                     worst <= bound))
    ok = all(e.passed for e in entries)
    return GradientReport(blk.j, tuple(entries), ok)


# ---------------------------------------------------------------------------
# dense quadratic forms and the smallest admissible constant

def _fourier_weyl_any(s: MatrixSymbol, g: GridSpec, *, cap: int = 2048):
    """Fourier-side Weyl matrix with the kernel fallback (see
    block_generator); for free symbols rather than blocks."""
    try:
        return weyl_fourier_matrix(s, g), True
    except ValueError:
        if g.n_x > cap:
            raise
        T = weyl_matrix(sample_for_weyl(s, g), g)
        x = g.x_grid()[0]
        ks = g.k_lattice()[0]
        E = np.exp(1j * np.outer(x, ks))
        return E.conj().T @ (T @ E) / g.n_x, False


@dataclass(frozen=True)
class QuadraticFormReport:
    theta: float
    c: float
    min_eig: Optional[float]
    random_min: float
    dense: bool
    n_modes: int
    passed: bool

    def as_dict(self) -> dict:
        return {"theta": self.theta, "c": self.c, "min_eig": self.min_eig,
                "random_min": self.random_min, "dense": self.dense,
                "n_modes": self.n_modes, "passed": self.passed}


def quadratic_form_check(a: MatrixSymbol, theta: float, c: float,
                         samples: int = 8, *, g: GridSpec, seed: int = 0,
                         cap: int = 512,
                         eig_floor: float = _EIG_FLOOR) -> QuadraticFormReport:
    """Verify ((Re a^w) u, u) + c |u|_{H^{-theta/2}}^2 >= eig_floor |u|^2.

    Draws random band-limited states, then refines adversarially with
    the smallest eigenvalue of the assembled hermitian matrix
    Re A + c diag(<k>^{-theta}).  Grids beyond n_x = cap skip the dense
    assembly and report the sampled minimum only, flagged dense=False.
    """
    if a.N != 1 or a.d != 1:
        raise ValueError("quadratic forms are implemented for scalar d=1")
    ks = g.k_lattice()[0].astype(float)
    wts = (1.0 + ks ** 2) ** (-theta / 2.0)
    dense = g.n_x <= cap
    min_eig = None
    H = None
    if dense:
        A, _ = _fourier_weyl_any(a, g)
        H = 0.5 * (A + A.conj().T) + c * np.diag(wts)
        min_eig = float(np.linalg.eigvalsh(H)[0])
        rand_mat = H
    else:
        # sampled-only mode: forms via one Weyl application per state
        rand_mat = None
    rmin = math.inf
    for i in range(samples):
        u = random_band_limited(g, 1, seed + i)
        v = to_fourier(u).coeffs[:, 0]
        nv = np.linalg.norm(v)
        if rand_mat is not None:
            val = float(np.vdot(v, rand_mat @ v).real) / nv ** 2
        else:
            from .quantize import weyl_apply
            au = weyl_apply(sample_for_weyl(a, g), u)
            form = float(np.vdot(v, to_fourier(au).coeffs[:, 0]).real)
            val = (form + c * float(np.sum(wts * np.abs(v) ** 2))) / nv ** 2
        rmin = min(rmin, val)
    passed = (min_eig if dense else rmin) >= eig_floor
    return QuadraticFormReport(theta, c, min_eig, float(rmin), dense,
                               g.n_modes, bool(passed))


def smallest_garding_constant(a: MatrixSymbol, theta: float, *, g: GridSpec,
                              eig_floor: float = _EIG_FLOOR,
                              rtol: float = 1e-3, cap: int = 512):
    """Bisect the smallest c >= 0 with min eig(Re A + c diag(<k>^{-theta}))
    >= eig_floor on g.  The minimum eigenvalue is nondecreasing in c, so
    bisection is exact up to rtol.  Returns (c, report_at_c)."""
    if g.n_x > cap:
        raise ValueError("the bisection needs the dense assembly; "
                         "use a grid with n_x <= %d" % cap)
    A, _ = _fourier_weyl_any(a, g)
    ReA = 0.5 * (A + A.conj().T)
    ks = g.k_lattice()[0].astype(float)
    wts = (1.0 + ks ** 2) ** (-theta / 2.0)

    def min_eig(c):
        return float(np.linalg.eigvalsh(ReA + c * np.diag(wts))[0])

    lo = 0.0
    if min_eig(lo) >= eig_floor:
        return 0.0, quadratic_form_check(a, theta, 0.0, g=g, cap=cap,
                                         eig_floor=eig_floor)
    lam0 = float(np.linalg.eigvalsh(ReA)[0])
    hi = (abs(lam0) + 1e-12) / wts.min()
    if min_eig(hi) < eig_floor:
        raise RuntimeError("bisection bracket failed")
    while hi - lo > rtol * max(hi, 1e-12):
        mid = 0.5 * (lo + hi)
        if min_eig(mid) >= eig_floor:
            hi = mid
        else:
            lo = mid
    return hi, quadratic_form_check(a, theta, hi, g=g, cap=cap,
                                    eig_floor=eig_floor)


def lp_defect(a: MatrixSymbol, J: int, g: GridSpec, u: StateVector):
    """Defect of the localized quadratic form against the full one:

        |(a^w u, u) - sum_j ((phi_j a)^w psi_j(D) u, psi_j(D) u)|

    returned together with |u|_{H^{-1}}^2 and their ratio.  The defect
    is controlled by the lower-order norm, not by |u|^2."""
    bank = lp_filters(J, g)
    A, _ = _fourier_weyl_any(a, g)
    v = to_fourier(u).coeffs[:, 0]
    full = float(np.vdot(v, A @ v).real)
    total = 0.0
    ae = a.entry(0, 0)
    for j in range(J + 1):
        aj = MatrixSymbol.scalar(mul(bank.phi_exprs[j], ae), order=a.order)
        Aj, _ = _fourier_weyl_any(aj, g)
        vj = bank.psi[j] * v
        total += float(np.vdot(vj, Aj @ vj).real)
    ks = g.k_lattice()[0].astype(float)
    hminus = float(np.sum(np.abs(v) ** 2 / (1.0 + ks ** 2)))
    defect = abs(full - total)
    return defect, hminus, defect / max(hminus, 1e-300)


# ---------------------------------------------------------------------------
# the full experiment

@dataclass(frozen=True)
class BlockResult:
    j: int
    t_star: float
    margin_adversarial: float
    margins_random: tuple
    flow_passed: bool
    min_eig_restricted: float
    smallness: Optional[float]
    smallness_ok: Optional[bool]
    fourier_path: bool

    def as_dict(self) -> dict:
        return {"j": self.j, "t_star": self.t_star,
                "margin_adversarial": self.margin_adversarial,
                "margins_random": list(self.margins_random),
                "flow_passed": self.flow_passed,
                "min_eig_restricted": self.min_eig_restricted,
                "smallness": self.smallness,
                "smallness_ok": self.smallness_ok,
                "fourier_path": self.fourier_path}


@dataclass(frozen=True)
class GardingReport:
    theta: float
    tau_star: float
    q0: int
    scale: float
    c: float
    j0: Optional[int]
    blocks: tuple
    tau_sweep: tuple
    quad: QuadraticFormReport
    growth: Optional[GrowthReport]
    gradient: Optional[GradientReport]
    passed: bool

    def as_dict(self) -> dict:
        return {"kind": "garding", "theta": self.theta,
                "tau_star": self.tau_star, "q0": self.q0,
                "scale": self.scale, "c": self.c, "j0": self.j0,
                "blocks": [b.as_dict() for b in self.blocks],
                "tau_sweep": [list(row) for row in self.tau_sweep],
                "quad": self.quad.as_dict(),
                "growth": self.growth.as_dict() if self.growth else None,
                "gradient": (self.gradient.as_dict()
                             if self.gradient else None),
                "passed": self.passed}


def _adversarial_state(A: np.ndarray, t: float, sup: np.ndarray):
    """Coefficient vector w supported on sup maximizing |exp(-tA) w|/|w|,
    via the top singular pair of the restricted propagator columns.
    Uses the exact hermitian flow."""
    lam, V = np.linalg.eigh(A)
    M = (V * np.exp(-t * lam)) @ V.conj().T
    _, svals, vh = np.linalg.svd(M[:, sup], full_matrices=False)
    w = np.zeros(A.shape[0], dtype=complex)
    w[sup] = vh[0].conj()
    return w, float(svals[0])


def _block_job(blk: DyadicBlock, theta: float, tau_star: float, c_d: int,
               n_random: int, seed: int, dt: Optional[float],
               csv_dir: Optional[Path], include_smallness: bool):
    A, fourier = block_generator(blk)
    t_star = observation_time(blk.j, theta, tau_star)
    sup = np.flatnonzero(blk.psi > _PSI_TOL)
    w_adv, _ = _adversarial_state(A, t_star, sup)
    cols = [w_adv]
    for i in range(n_random):
        u = random_band_limited(blk.grid, 1, seed + 101 * blk.j + i)
        cols.append(to_fourier(u).coeffs[:, 0] * blk.psi)
    C = np.stack(cols, axis=1)
    ts, margins = backward_margin_path_coeffs(blk, C, t_star, dt=dt,
                                              generator=A)
    final = margins[-1]
    m_adv = float(final[0])
    m_rand = tuple(float(x) for x in final[1:])
    flow_passed = bool(margins.min() >= 0.0)
    sub = A[np.ix_(sup, sup)]
    min_eig = float(np.linalg.eigvalsh(sub)[0])
    small = small_ok = None
    if include_smallness:
        try:
            fam, _ = weyl_correctors(blk, c_d=c_d, tau_star=tau_star,
                                     on_weyl_grid=False)
            small, small_ok = fam.smallness()
        except OrderExceededError:
            pass
    if csv_dir is not None:
        path = Path(csv_dir) / f"garding_block_{blk.j}.csv"
        with open(path, "w", newline="") as fh:
            wtr = csv.writer(fh)
            wtr.writerow(["t", "margin_adversarial"]
                         + [f"margin_random_{i}" for i in range(n_random)])
            for row_t, row_m in zip(ts, margins):
                wtr.writerow([f"{row_t:.10g}"]
                             + [f"{x:.12g}" for x in row_m])
    return BlockResult(blk.j, t_star, m_adv, m_rand, flow_passed, min_eig,
                       small, small_ok, fourier), A


def garding_experiment(a: MatrixSymbol, theta: float, J: int, g: GridSpec, *,
                       js=None, tau_star: float = 4.0, c_d: int = 1,
                       n_random: int = 3, seed: int = 0,
                       normalize: bool = True, c: Optional[float] = None,
                       workers: Optional[int] = None,
                       csv_dir=None, dt: Optional[float] = None,
                       quad_grid: Optional[GridSpec] = None,
                       include_checks: bool = True) -> GardingReport:
    """Run the full verification for one symbol: per-block backward flow
    tests at horizon t*(j) with adversarially chosen data, restricted
    quadratic-form minima, the corrector smallness premise, a tau
    sweep on the middle block, and the dense global form with the
    smallest admissible constant (bisected when c is None).

    j0 is the smallest tested j from which on every flow test passes;
    the report passes when j0 exists and the global form clears the
    eigenvalue floor.  Blocks are independent and run concurrently
    (workers defaults to the PDFLOW_WORKERS environment variable or 1).
    """
    if js is None:
        js = list(range(1, J + 1))
    js = sorted(js)
    blocks = dyadic_blocks(a, theta, J, g, js=js, normalize=normalize)
    scale = blocks[0].scale if blocks else 1.0
    if workers is None:
        workers = int(os.environ.get("PDFLOW_WORKERS", "1"))
    if csv_dir is not None:
        Path(csv_dir).mkdir(parents=True, exist_ok=True)

    def job(blk):
        return _block_job(blk, theta, tau_star, c_d, n_random, seed, dt,
                          csv_dir, include_checks)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(job, blocks))
    else:
        out = [job(b) for b in blocks]
    results = [r for r, _ in out]

    # smallest j with an all-pass tail
    j0 = None
    for res in reversed(results):
        if res.flow_passed:
            j0 = res.j
        else:
            break

    # horizon sweep on the middle block, exact flow
    mid = len(blocks) // 2
    blk_mid, A_mid = blocks[mid], out[mid][1]
    sup = np.flatnonzero(blk_mid.psi > _PSI_TOL)
    sweep = []
    for tau in (1.0, 2.0, 4.0, 8.0):
        t = observation_time(blk_mid.j, theta, tau)
        _, smax = _adversarial_state(A_mid, t, sup)
        sweep.append((tau, t, float(1.0 - smax)))

    growth = gradient = None
    if include_checks:
        # growth exponents are asymptotic in t; fit them on the block at
        # its native amplitude so the horizon t* reaches the regime
        blk_growth = blk_mid
        if normalize and scale != 1.0:
            blk_growth = dyadic_blocks(a, theta, J, g, js=[blk_mid.j],
                                       normalize=False)[0]
        try:
            growth = corrector_growth_check(blk_growth, tau_star=tau_star,
                                            c_d=c_d)
        except (OrderExceededError, ValueError):
            pass
        gradient = gradient_bound_check(blk_mid)

    a_used = a
    if normalize and scale != 1.0:
        a_used = MatrixSymbol.scalar(mul(const(1.0 / scale), a.entry(0, 0)),
                                     order=a.order)
    if quad_grid is None:
        quad_grid = g if g.n_x <= 512 else GridSpec(1, 512, 128, g.eps)
    if c is None:
        c_star, quad = smallest_garding_constant(a_used, theta, g=quad_grid)
    else:
        c_star = c
        quad = quadratic_form_check(a_used, theta, c, g=quad_grid)

    passed = (j0 is not None) and quad.passed
    return GardingReport(theta, tau_star, corrector_depth(theta, c_d), scale,
                         c_star, j0, tuple(results), tuple(sweep), quad,
                         growth, gradient, bool(passed))


__all__ = [
    "corrector_depth", "observation_time", "diamond",
    "DyadicBlock", "dyadic_blocks",
    "block_generator", "FlowResult", "backward_flow_test",
    "backward_margin_path", "backward_margin_path_coeffs", "flow_states",
    "WeylCorrectorFamily", "weyl_correctors",
    "GrowthEntry", "GrowthReport", "corrector_growth_check",
    "GradientEntry", "GradientReport", "gradient_bound_check",
    "QuadraticFormReport", "quadratic_form_check",
    "smallest_garding_constant", "lp_defect",
    "BlockResult", "GardingReport", "garding_experiment",
]
