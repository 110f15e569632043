"""Reference integrators for the quantized flows.

evolve_linear integrates u' = op_eps(M)u by a classical 4th-order
one-step method with automatic step halving; evolve_semilinear adds a
pointwise quadratic nonlinearity B(u,u) and a blow-up guard.  The state
evolved is the band-limited coefficient vector (the flow of the
quantized operator itself, projected back onto the resolved band), so
linearity and the norm diagnostics refer to one and the same object.
These are the ground-truth flows that the corrector approximations and
the semigroup experiments are measured against, so accuracy is bought
with step refinement rather than cleverness.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .quantize import (
    FourierState, StateVector, from_fourier, op_eps_apply, op_eps_matrix,
    to_fourier,
)
from .symbols import GridSpec, MatrixSymbol, sample

DEFAULT_REFINE_TOL = 1e-8
DEFAULT_BLOWUP_GUARD = 1e3


@dataclass(frozen=True)
class QuadraticNonlinearity:
    """Pointwise bilinear map: f(u)_i = sum_jk tensor[i,j,k] u_j u_k."""
    tensor: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tensor, dtype=complex)
        if t.ndim != 3 or len(set(t.shape)) != 1:
            raise ValueError("nonlinearity tensor must be N x N x N")
        object.__setattr__(self, "tensor", t)

    @property
    def N(self) -> int:
        return self.tensor.shape[0]

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return np.einsum("ijk,...j,...k->...i", self.tensor, values, values)

    def bilinear(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.einsum("ijk,...j,...k->...i", self.tensor, u, v)


@dataclass
class Trajectory:
    """Time nodes, states, and per-node norm diagnostics of one run.

    states holds every store_every-th node plus the last; the diagnostic
    arrays cover every node.
    """
    times: np.ndarray
    states: tuple
    eps: float
    l2: np.ndarray
    linf: np.ndarray
    sobolev: dict
    dt: float
    refinement_history: tuple = ()
    converged: bool = True
    blowup_time: float | None = None

    def __post_init__(self):
        if len(self.times) < 2:
            raise ValueError("trajectory needs at least two nodes")
        for arr in (self.l2, self.linf, *self.sobolev.values()):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite diagnostics")

    @property
    def final(self) -> StateVector:
        return self.states[-1]

    def growth_rate(self, lo: float, hi: float) -> float:
        """Least-squares slope of log L2 over times in [lo, hi]."""
        sel = (self.times >= lo) & (self.times <= hi) & (self.l2 > 0)
        if sel.sum() < 2:
            raise ValueError("growth window holds fewer than two nodes")
        return float(np.polyfit(self.times[sel], np.log(self.l2[sel]), 1)[0])


def _spectral_sup(M: MatrixSymbol, grid: GridSpec) -> float:
    """max |eigenvalue| of M(x, eps k) over the sampling lattice."""
    tab = sample(M, grid, scale_freq=True).values
    return float(np.abs(np.linalg.eigvals(tab)).max())


class _CsvStream:
    def __init__(self, path, orders):
        self.path = path
        self.orders = orders
        self.f = None

    def restart(self):
        if self.path is None:
            return
        if self.f is not None:
            self.f.close()
        self.f = open(self.path, "w", newline="")
        self.w = csv.writer(self.f)
        self.w.writerow(["t", "l2", "linf"]
                        + [f"h{s:g}" for s in self.orders])

    def row(self, t, l2, linf, hs):
        if self.f is None:
            return
        self.w.writerow([repr(t), repr(l2), repr(linf)]
                        + [repr(v) for v in hs])
        self.f.flush()

    def close(self):
        if self.f is not None:
            self.f.close()
            self.f = None


class _Generator:
    """Right-hand side c' = P_K op_eps(M) u + P_K B(u,u) on coefficients."""

    def __init__(self, M: MatrixSymbol, grid: GridSpec, B=None):
        self.M = M
        self.grid = grid
        self.B = B
        self._mats: dict = {}
        self._tabs: dict = {}

    def _matrix(self, t: float) -> np.ndarray:
        key = t if self.M.time_dependent else 0.0
        mat = self._mats.get(key)
        if mat is None:
            mat = self._mats[key] = op_eps_matrix(self.M, self.grid, t=key)
        return mat

    def _table(self, t: float):
        key = t if self.M.time_dependent else 0.0
        tab = self._tabs.get(key)
        if tab is None:
            tab = self._tabs[key] = sample(self.M, self.grid,
                                           scale_freq=True, t=key)
        return tab

    def __call__(self, t: float, c: np.ndarray) -> np.ndarray:
        g = self.grid
        if g.d == 1:
            out = (self._matrix(t) @ c.ravel()).reshape(c.shape)
        else:
            u = from_fourier(FourierState(c, g))
            out = to_fourier(op_eps_apply(self._table(t), u)).coeffs
        if self.B is not None:
            u = from_fourier(FourierState(c, g))
            out = out + to_fourier(
                StateVector(self.B(u.values), g)).coeffs
        return out


def _sob_weights(g: GridSpec, orders) -> dict:
    k2 = (g.eps * g.k_lattice().astype(float)) ** 2
    ksq = 1.0 + k2.sum(axis=0)
    return {s: ksq ** s for s in orders}


def _run_once(rhs, c0, T, n_steps, g, orders, guard, stream):
    """Fixed-step 4th-order run on coefficients."""
    dt = T / n_steps
    w2 = _sob_weights(g, orders)
    c = c0.copy()
    coeffs = [c.copy()]
    times = [0.0]
    diags = []

    def observe(cc, t):
        u = from_fourier(FourierState(cc, g))
        l2 = float(np.linalg.norm(cc))
        linf = float(np.abs(u.values).max())
        hs = tuple(float(np.sqrt((w2[s][:, None] * np.abs(cc) ** 2).sum()))
                   for s in orders)
        diags.append((l2, linf, hs))
        stream.row(t, l2, linf, hs)
        return linf

    stream.restart()
    observe(c, 0.0)
    blowup = None
    for step in range(n_steps):
        t = step * dt
        k1 = rhs(t, c)
        k2 = rhs(t + dt / 2, c + dt / 2 * k1)
        k3 = rhs(t + dt / 2, c + dt / 2 * k2)
        k4 = rhs(t + dt, c + dt * k3)
        c = c + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        tn = (step + 1) * dt
        times.append(tn)
        coeffs.append(c.copy())
        linf = observe(c, tn)
        if guard is not None and linf > guard:
            blowup = tn
            break
    return np.array(times), coeffs, diags, blowup


def _refine(rhs, c0, T, dt0, g, eps, orders, guard, stream, refine_tol,
            max_refine, store_every):
    n = max(1, math.ceil(T / dt0))
    prev = _run_once(rhs, c0, T, n, g, orders, guard, stream)
    history = []
    converged = False
    for _ in range(max_refine):
        cur = _run_once(rhs, c0, T, 2 * n, g, orders, guard, stream)
        # compare at the last node both levels reached (nodes nest)
        t_cmp = min(prev[0][-1], cur[0][-1])
        ic = int(round(t_cmp / (T / (2 * n))))
        ip = int(round(t_cmp / (T / n)))
        diff = float(np.linalg.norm(cur[1][ic] - prev[1][ip]))
        history.append((T / n, diff))
        prev, n = cur, 2 * n
        if diff < refine_tol:
            converged = True
            break
    times, coeffs, diags, blowup = prev
    keep = list(range(0, len(times), store_every))
    if keep[-1] != len(times) - 1:
        keep.append(len(times) - 1)
    states = tuple(from_fourier(FourierState(coeffs[i], g)) for i in keep)
    l2 = np.array([d[0] for d in diags])
    linf = np.array([d[1] for d in diags])
    sob = {s: np.array([d[2][i] for d in diags])
           for i, s in enumerate(orders)}
    return Trajectory(times=times, states=states, eps=eps, l2=l2, linf=linf,
                      sobolev=sob, dt=T / (n // 2 if converged else n),
                      refinement_history=tuple(history), converged=converged,
                      blowup_time=blowup)


def _evolve(M, B, eps, T, u0, dt, orders, guard, refine_tol, max_refine,
            store_every, csv_path):
    if T <= 0:
        raise ValueError("T must be positive")
    g = u0.grid
    if g.eps != eps:
        raise ValueError("eps differs from the state's grid")
    if M.N != u0.N or (B is not None and B.N != u0.N):
        raise ValueError("component counts differ")
    if dt is None:
        dt = 0.25 / (_spectral_sup(M, g) + 1.0)
    rhs = _Generator(M, g, B)
    c0 = to_fourier(u0).coeffs
    stream = _CsvStream(csv_path, orders)
    try:
        return _refine(rhs, c0, T, dt, g, eps, orders, guard, stream,
                       refine_tol, max_refine, store_every)
    finally:
        stream.close()


def evolve_linear(M: MatrixSymbol, eps: float, T: float, u0: StateVector,
                  dt: float | None = None, *, sobolev_orders=(1.0,),
                  refine_tol: float = DEFAULT_REFINE_TOL,
                  max_refine: int = 12, store_every: int = 1,
                  csv_path=None) -> Trajectory:
    """Integrate u' = op_eps(M)u to time T, halving the step until the
    successive-refinement L2 difference at the endpoint drops below
    refine_tol (converged=False on the trajectory if the cap is hit)."""
    return _evolve(M, None, eps, T, u0, dt, sobolev_orders, None,
                   refine_tol, max_refine, store_every, csv_path)


def evolve_semilinear(M: MatrixSymbol, B: QuadraticNonlinearity, eps: float,
                      T: float, u0: StateVector, dt: float | None = None, *,
                      sobolev_orders=(1.0,),
                      blowup_guard: float = DEFAULT_BLOWUP_GUARD,
                      refine_tol: float = DEFAULT_REFINE_TOL,
                      max_refine: int = 12, store_every: int = 1,
                      csv_path=None) -> Trajectory:
    """Integrate u' = op_eps(M)u + B(u,u); aborts once |u|_Linf exceeds
    blowup_guard, recording the hit time on the trajectory."""
    return _evolve(M, B, eps, T, u0, dt, sobolev_orders, blowup_guard,
                   refine_tol, max_refine, store_every, csv_path)
