"""Composition expansion terms for both quantizations and remainder probes.

For the semiclassical quantization, op_eps(a1) op_eps(a2) expands as
Sigma_q eps^q op_eps(sharp_q(a1, a2)); for the Weyl quantization the
expansion runs in powers of the frequency instead, with diamond_k terms.
The probes measure the remainder after truncating the expansion and fit
its decay rate empirically.
"""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import svdvals

from .quantize import op_eps_matrix, weyl_fourier_matrix
from .symbols import GridSpec, MatrixSymbol, differentiate, multi_indices, sample

_DEFAULT_SWEEP = tuple(2.0 ** -j for j in range(3, 8))


def _multi_factorial(mi) -> float:
    out = 1.0
    for a in mi:
        out *= math.factorial(a)
    return out


def sharp_q(a1: MatrixSymbol, a2: MatrixSymbol, q: int, *,
            factorial: str = "multi", max_order: int = 8) -> MatrixSymbol:
    """Order-q term of the semiclassical composition expansion:
    Sigma_{|alpha|=q} ((-i)^q / w(alpha)) d_xi^alpha a1 . d_x^alpha a2.

    factorial: "multi" weights by alpha! (componentwise), "total" by
    |alpha|!; the two coincide at d=1.
    """
    if a1.d != a2.d:
        raise ValueError("symbol dimensions differ")
    if factorial not in ("multi", "total"):
        raise ValueError("factorial must be 'multi' or 'total'")
    if q == 0:
        return a1 @ a2
    d = a1.d
    zero = (0,) * d
    acc = None
    for alpha in multi_indices(d, q):
        if sum(alpha) != q:
            continue
        w = _multi_factorial(alpha) if factorial == "multi" \
            else float(math.factorial(q))
        term = (differentiate(a1, zero, alpha, max_order)
                @ differentiate(a2, alpha, zero, max_order))
        term = term.scale((-1j) ** q / w)
        acc = term if acc is None else acc + term
    return acc


def diamond_k(a1: MatrixSymbol, a2: MatrixSymbol, k: int, *,
              max_order: int = 8) -> MatrixSymbol:
    """Order-k term of the Weyl composition expansion:
    Sigma_{|alpha|+|beta|=k} c(alpha,beta)
        d_x^alpha d_xi^beta a1 . d_x^beta d_xi^alpha a2,
    c(alpha,beta) = (-1)^|alpha| (-i/2)^k / (alpha! beta!).

    The 2^{-k} makes diamond the exact Taylor expansion of the
    Fourier-side midpoint matrix a_hat_{k'-q}((k'+q)/2); diamond_1 is
    then (1/2i) times the Poisson bracket.
    """
    if a1.d != a2.d:
        raise ValueError("symbol dimensions differ")
    if k == 0:
        return a1 @ a2
    d = a1.d
    acc = None
    for alpha in multi_indices(d, k):
        na = sum(alpha)
        for beta in multi_indices(d, k - na):
            if sum(beta) != k - na:
                continue
            coef = ((-1.0) ** na) * (-0.5j) ** k \
                / (_multi_factorial(alpha) * _multi_factorial(beta))
            term = (differentiate(a1, alpha, beta, max_order)
                    @ differentiate(a2, beta, alpha, max_order))
            term = term.scale(coef)
            acc = term if acc is None else acc + term
    return acc


# ---------------------------------------------------------------------------
# remainder probes

@dataclass(frozen=True)
class SlopeReport:
    """Per-point remainder table with its least-squares log-log slope.

    sweep is "eps" (semiclassical, remainder vs eps) or "cutoff" (Weyl,
    remainder vs dyadic frequency shell).
    """
    quantization: str
    n: int
    sweep: str
    table: tuple
    slope: float

    def as_dict(self) -> dict:
        return {"quantization": self.quantization, "n": self.n,
                "sweep": self.sweep, "slope": self.slope,
                "table": [list(row) for row in self.table]}

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.as_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["eps", "remainder", "fit_slope"])
            for value, rem in self.table:
                w.writerow([repr(value), repr(rem), repr(self.slope)])


_fourier_op_matrix = op_eps_matrix


def _x_bandwidth(s: MatrixSymbol, g: GridSpec) -> int:
    """Largest |m| carrying x-harmonic mass, folded from an FFT in x."""
    tab = sample(s, g, scale_freq=True).values
    prof = np.abs(np.fft.fft(tab, axis=0) / g.n_x).max(axis=(1, 2, 3))
    idx = np.nonzero(prof > prof.max() * 1e-12)[0]
    if idx.size == 0:
        return 0
    return int(np.minimum(idx, g.n_x - idx).max())


def _semiclassical_point(a1, a2, terms, eps, floor_n_x, margin):
    n_x = max(floor_n_x, 1 << math.ceil(math.log2(8.0 / eps)))
    g = GridSpec(1, n_x, n_x // 2 - 1, eps)
    R = _fourier_op_matrix(a1, g) @ _fourier_op_matrix(a2, g)
    for q, tq in enumerate(terms):
        R -= (eps ** q) * _fourier_op_matrix(tq, g)
    # restrict inputs so intermediates stay inside the resolved band and
    # the probe sees the Moyal remainder, not spectral-edge aliasing
    keep = np.abs(g.k_lattice()[0]) <= g.K - margin
    return float(svdvals(R[:, np.repeat(keep, a1.N)])[0])


def _probe_semiclassical(a1, a2, n, g, eps_sweep):
    sweep = _DEFAULT_SWEEP if eps_sweep is None else tuple(eps_sweep)
    if len(sweep) < 3:
        raise ValueError("degenerate sweep: need at least 3 eps values")
    terms = [sharp_q(a1, a2, q) for q in range(n + 1)]
    margin = _x_bandwidth(a1, g) + _x_bandwidth(a2, g)
    if margin >= g.n_x // 4:
        raise ValueError("symbol x-bandwidth too large for the probe grid")
    workers = int(os.environ.get("PDFLOW_WORKERS", "0")) or \
        min(len(sweep), os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=workers) as ex:
        rems = list(ex.map(
            lambda e: _semiclassical_point(a1, a2, terms, e, g.n_x, margin),
            sweep))
    # floor exact-zero remainders; the slope is meaningless there anyway
    slope = float(np.polyfit(np.log(sweep),
                             np.log(np.maximum(rems, 1e-300)), 1)[0])
    table = tuple((float(e), r) for e, r in zip(sweep, rems))
    return SlopeReport("semiclassical", n, "eps", table, slope)


def _probe_weyl(a1, a2, n, g):
    A = weyl_fourier_matrix(a1, g) @ weyl_fourier_matrix(a2, g)
    for k in range(n + 1):
        A -= weyl_fourier_matrix(diamond_k(a1, a2, k), g)
    ks = g.k_lattice()[0]
    shells = []
    j = 1
    while 2 ** (j + 1) <= g.K // 2:    # keep shells clear of the lattice edge
        shells.append(j)
        j += 1
    if len(shells) < 3:
        raise ValueError("degenerate sweep: need at least 3 dyadic shells, "
                         "increase K")
    table = []
    for j in shells:
        keep = (np.abs(ks) >= 2 ** j) & (np.abs(ks) < 2 ** (j + 1))
        r = float(svdvals(A[:, np.repeat(keep, a1.N)])[0])
        table.append((float(2 ** j), r))
    lam, rem = zip(*table)
    slope = float(np.polyfit(np.log(lam), np.log(rem), 1)[0])
    return SlopeReport("weyl", n, "cutoff", tuple(table), slope)


def composition_remainder_probe(a1: MatrixSymbol, a2: MatrixSymbol, n: int,
                                g: GridSpec,
                                quantization: str = "semiclassical", *,
                                eps_sweep=None) -> SlopeReport:
    """Measure the operator norm of the composition remainder after
    subtracting expansion terms of order <= n, and fit its decay.

    Semiclassical: r(eps) over a dyadic eps sweep (grids rescaled so
    n_x >= 8/eps), expected slope n+1 for order-0 symbol pairs.  Weyl:
    runs at scale 1 on g itself and measures the remainder on dyadic
    frequency shells instead; the slope is negative, gaining one order
    per expansion term on top of the symbols' own decay.
    """
    if quantization == "semiclassical":
        return _probe_semiclassical(a1, a2, n, g, eps_sweep)
    if quantization == "weyl":
        return _probe_weyl(a1, a2, n, g)
    raise ValueError("quantization must be 'semiclassical' or 'weyl'")
