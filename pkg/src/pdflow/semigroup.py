"""Growth rates of exp(t op_eps(M)) and a nonlinear instability demo.

Two suprema of the symbol drive everything here: the spectral rate
gamma_spec = sup Re sigma(M(x, xi)) and the hermitian-part rate
gamma_garding = sup sigma((M + M*)/2).  The first is the sharp semigroup
rate, the second is what energy estimates see; for non-normal symbols
they differ by an order-one gap that no amount of refinement closes.

The upper experiment measures |exp(t op_eps(M))| at t = T|ln eps| with a
dense operator-norm probe over the reference integrator and checks
log-norm/t against gamma_spec.  The lower experiment evolves a wave
packet e^{i x xi*/eps} theta(x) built along the leading eigenvector
branch at the argmax and tracks its L2 mass on the shrinking ball
B(x0, |ln eps|^{-1}); the log-slope of that localized mass is the
empirical lower rate.  The instability experiment feeds an eps^K-small
packet to the semilinear flow and checks that by

    t* = (K |ln eps| - K1 ln|ln eps|) / gamma_spec

the sup-norm has climbed back to a polylog floor |ln eps|^{-K'},
i.e. smallness of the datum buys only a logarithmic delay.

Experiments run their eps sweeps as independent jobs (threads; the work
is numpy-bound).  Guard outcomes are recorded per point and enforcement
is opt-in: the conservative C0 = 1 calibration of eps_guard rejects
every bracket-carrying symbol at desk-scale eps, and the sweeps are
still informative there.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .corrector import eps_guard, q0_from
from .flow import QuadraticNonlinearity, evolve_linear, evolve_semilinear
from .quantize import StateVector, l2_norm, operator_norm_probe
from .symbols import GridSpec, MatrixSymbol, sample

__all__ = [
    "RateReport", "WavePacket", "SweepPoint", "LowerPoint",
    "InstabilityPoint", "UpperBoundReport", "LowerBoundReport",
    "InstabilityReport", "gamma_sup", "make_wave_packet",
    "upper_bound_experiment", "lower_bound_experiment",
    "instability_experiment",
]


@dataclass(frozen=True)
class RateReport:
    """Symbol rates, their argmax, and whatever experiments measured."""
    gamma_spec: float
    gamma_garding: float
    x_star: tuple
    xi_star: tuple
    upper_rate: float | None = None
    lower_rate: float | None = None
    prefactor_exponent: float | None = None

    def __post_init__(self):
        if self.gamma_spec > self.gamma_garding + 1e-10:
            raise ValueError("spectral rate exceeds the hermitian-part rate")

    def as_dict(self):
        return {
            "gamma_spec": self.gamma_spec,
            "gamma_garding": self.gamma_garding,
            "x_star": list(self.x_star),
            "xi_star": list(self.xi_star),
            "upper_rate": self.upper_rate,
            "lower_rate": self.lower_rate,
            "prefactor_exponent": self.prefactor_exponent,
        }


@dataclass(frozen=True)
class WavePacket:
    """Oscillating bump e^{i x xi0/eps} theta(x) with theta along the
    leading eigenvector branch of M(., xi0)."""
    xi0: tuple
    x0: tuple
    k0: int
    theta: np.ndarray            # (n_points, N)
    grid: GridSpec
    gap: float
    normalization: str

    def __post_init__(self):
        if self.normalization == "l2":
            n = l2_norm(StateVector(self.theta, self.grid))
            if abs(n - 1.0) > 1e-10:
                raise ValueError("profile is not L2-normalized")
        elif self.normalization == "linf":
            if abs(np.abs(self.theta).max() - 1.0) > 1e-10:
                raise ValueError("profile is not sup-normalized")
        else:
            raise ValueError("normalization must be 'l2' or 'linf'")

    @property
    def eps(self) -> float:
        return self.grid.eps

    def state(self) -> StateVector:
        x = self.grid.x_grid()[0]
        phase = np.exp(1j * self.k0 * x)
        return StateVector(phase[:, None] * self.theta, self.grid)


@dataclass(frozen=True)
class SweepPoint:
    eps: float
    t: float
    norm: float
    rate: float
    guard_passed: bool
    guard_margin: float
    skipped: bool

    def as_dict(self):
        return {"eps": self.eps, "t": self.t, "norm": self.norm,
                "rate": self.rate, "guard_passed": self.guard_passed,
                "guard_margin": self.guard_margin, "skipped": self.skipped}


@dataclass(frozen=True)
class LowerPoint:
    eps: float
    t: float
    ball_radius: float
    initial_local: float
    final_local: float
    rate: float
    c_fit: float

    def as_dict(self):
        return {"eps": self.eps, "t": self.t,
                "ball_radius": self.ball_radius,
                "initial_local": self.initial_local,
                "final_local": self.final_local,
                "rate": self.rate, "c_fit": self.c_fit}


@dataclass(frozen=True)
class InstabilityPoint:
    eps: float
    t_star: float
    amplitude: float
    amplification: float
    rate: float
    blowup: bool

    def as_dict(self):
        return {"eps": self.eps, "t_star": self.t_star,
                "amplitude": self.amplitude,
                "amplification": self.amplification,
                "rate": self.rate, "blowup": self.blowup}


@dataclass(frozen=True)
class UpperBoundReport:
    rate: RateReport
    points: tuple
    tol: float
    passed: bool

    def as_dict(self):
        return {"kind": "upper-bound", "rate": self.rate.as_dict(),
                "points": [p.as_dict() for p in self.points],
                "tol": self.tol, "passed": self.passed}


@dataclass(frozen=True)
class LowerBoundReport:
    rate: RateReport
    points: tuple
    tol: float
    c_fit: float
    passed: bool

    def as_dict(self):
        return {"kind": "lower-bound", "rate": self.rate.as_dict(),
                "points": [p.as_dict() for p in self.points],
                "tol": self.tol, "c_fit": self.c_fit, "passed": self.passed}


@dataclass(frozen=True)
class InstabilityReport:
    gamma: float
    k_amp: float
    k1: float
    points: tuple
    k_prime: float
    eps_slope: float
    rate_ok: bool
    passed: bool

    def as_dict(self):
        return {"kind": "instability", "gamma": self.gamma,
                "k_amp": self.k_amp, "k1": self.k1,
                "points": [p.as_dict() for p in self.points],
                "k_prime": self.k_prime, "eps_slope": self.eps_slope,
                "rate_ok": self.rate_ok, "passed": self.passed}


def _rate_tables(M: MatrixSymbol, g: GridSpec):
    """Pointwise max Re eigenvalue and max hermitian-part eigenvalue."""
    tab = sample(M, g, scale_freq=True).values
    if M.N == 1:
        re_spec = tab[..., 0, 0].real
        return re_spec, re_spec
    lam = np.linalg.eigvals(tab)
    re_spec = lam.real.max(axis=-1)
    herm = 0.5 * (tab + np.conj(np.swapaxes(tab, -1, -2)))
    re_herm = np.linalg.eigvalsh(herm)[..., -1]
    return re_spec, re_herm


def _argmax_site(re: np.ndarray, g: GridSpec):
    # ties broken toward small |xi|, then small wrapped |x|: constant
    # symbols then give centered packets instead of band-edge ones
    top = float(re.max())
    cand = np.flatnonzero(re.reshape(-1) >= top - 1e-12)
    pi_, qi = np.unravel_index(cand, re.shape)
    k = g.k_lattice()[:, qi].astype(float)
    xi_mag = (k * k).sum(axis=0)
    x = g.x_grid()[:, pi_]
    xd = np.minimum(x, 2.0 * np.pi - x).sum(axis=0)
    pick = int(np.lexsort((xd, xi_mag))[0])
    return int(pi_[pick]), int(qi[pick]), top


def _pow2_at_least(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def gamma_sup(M: MatrixSymbol, g: GridSpec) -> RateReport:
    """Dense spectral rates of the symbol over the sampling lattice.

    A second pass runs on a doubled grid with a 4x wider xi range at
    half the spacing; one global doubled pass is cheaper to vectorize
    than a local patch at these sizes and refines the argmax the same
    way.  Time-dependent symbols are read at t = 0.
    """
    re1, reh1 = _rate_tables(M, g)
    k2 = 8 * g.K
    nx2 = _pow2_at_least(max(2 * g.n_x, 2 * k2 + 2))
    g2 = GridSpec(g.d, nx2, k2, 0.5 * g.eps)
    re2, reh2 = _rate_tables(M, g2)
    pi_, qi, top2 = _argmax_site(re2, g2)
    gamma_spec = max(float(re1.max()), top2)
    gamma_garding = max(float(reh1.max()), float(reh2.max()))
    x_star = tuple(float(v) for v in g2.x_grid()[:, pi_])
    xi_star = tuple(float(v) for v in 0.5 * g.eps
                    * g2.k_lattice()[:, qi].astype(float))
    return RateReport(gamma_spec, gamma_garding, x_star, xi_star)


def make_wave_packet(M: MatrixSymbol, g: GridSpec, rate: RateReport, *,
                     radius: float = 0.5, gap_tol: float = 1e-3,
                     normalization: str = "l2") -> WavePacket:
    """Bump profile along the leading eigenvector branch at the argmax.

    The branch is continued outward from x0 by maximal inner product
    with the previously fixed neighbor, then phase-aligned, so v(x) is
    continuous wherever the branch itself is.  A leading eigenvalue
    closer than gap_tol to the rest of the spectrum is refused: the
    construction needs a semisimple leading branch, and defective
    argmaxes (Jordan blocks, Puiseux branching) are out of scope here.
    """
    if g.d != 1:
        raise NotImplementedError("packets are built on one-dimensional grids")
    if not 0.0 < radius <= math.pi:
        raise ValueError("support radius must lie in (0, pi]")
    k0 = int(round(rate.xi_star[0] / g.eps))
    k0 = max(-g.K, min(g.K, k0))  # snap to the resolvable lattice
    x = g.x_grid()[0]
    wrap = np.abs(((x - rate.x_star[0] + np.pi) % (2.0 * np.pi)) - np.pi)
    i0 = int(np.argmin(wrap))
    x0 = float(x[i0])
    N = M.N
    if N == 1:
        v = np.ones((g.n_x, 1), dtype=complex)
        gap = math.inf
    else:
        tab = sample(M, g, scale_freq=True).values[:, g.mode_index((k0,))]
        lam, vec = np.linalg.eig(tab[i0])
        lead = int(np.argmax(lam.real))
        gap = float(np.abs(np.delete(lam, lead) - lam[lead]).min())
        if gap < gap_tol:
            raise ValueError(
                f"eigenvalue gap {gap:.3e} at the argmax is below "
                f"{gap_tol:g}; the packet needs a semisimple leading "
                "branch and refuses near-defective symbols")
        v = np.zeros((g.n_x, N), dtype=complex)
        done = np.zeros(g.n_x, dtype=bool)
        v[i0] = vec[:, lead] / np.linalg.norm(vec[:, lead])
        done[i0] = True
        for step in range(1, g.n_x):
            for sgn in (1, -1):
                i = (i0 + sgn * step) % g.n_x
                if done[i]:
                    continue
                prev = v[(i - sgn) % g.n_x]
                _, vecs = np.linalg.eig(tab[i])
                ips = np.abs(np.conj(prev) @ vecs)
                j = int(np.argmax(ips))
                w = vecs[:, j] / np.linalg.norm(vecs[:, j])
                ph = np.conj(prev) @ w
                if abs(ph) > 0:
                    w = w * (np.conj(ph) / abs(ph))
                v[i] = w
                done[i] = True
    # bump recentered on the chosen grid point, not the reported argmax
    s = np.abs(((x - x0 + np.pi) % (2.0 * np.pi)) - np.pi) / radius
    chi = np.zeros_like(x)
    inside = s < 1.0
    chi[inside] = np.exp(1.0 - 1.0 / (1.0 - s[inside] ** 2))
    theta = chi[:, None] * v
    if normalization == "l2":
        theta = theta / l2_norm(StateVector(theta, g))
    elif normalization == "linf":
        theta = theta / np.abs(theta).max()
    else:
        raise ValueError("normalization must be 'l2' or 'linf'")
    return WavePacket((g.eps * k0,), (x0,), k0, theta, g, gap, normalization)


def _run_jobs(fn, args, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, args))
    return [fn(a) for a in args]


def _abs_spectral_sup(M, g):
    tab = sample(M, g, scale_freq=True).values
    if M.N == 1:
        return float(np.abs(tab[..., 0, 0]).max())
    return float(np.abs(np.linalg.eigvals(tab)).max())


def upper_bound_experiment(M: MatrixSymbol, eps_list, T: float, *,
                           n_x: int = 32, K: int = 8, tol: float = 0.1,
                           dt: float | None = None,
                           enforce_guard: bool = False,
                           guard_c0: float = 1.0,
                           workers: int = 1) -> UpperBoundReport:
    """Probe |exp(t op_eps(M))| at t = T|ln eps| across the sweep.

    Each point records its eps_guard outcome; with enforce_guard the
    failing points are skipped (nan norm) instead of run.  The probe
    assembles the flow map densely from basis evolutions at a fixed
    step, so rates carry an O(dt^4) integrator bias on top of the
    prefactor/t offset.
    """
    if M.d != 1:
        raise NotImplementedError("operator probes are one-dimensional")
    eps_list = sorted((float(e) for e in eps_list), reverse=True)
    if not eps_list:
        raise ValueError("empty eps sweep")
    rate = gamma_sup(M, GridSpec(1, n_x, K, eps_list[0]))

    def job(eps):
        g = GridSpec(1, n_x, K, eps)
        t = T * abs(math.log(eps))
        guard = eps_guard(eps, M, T, g, c0=guard_c0)
        if enforce_guard and not guard.passed:
            return SweepPoint(eps, t, math.nan, math.nan, guard.passed,
                              float(guard.margin), True)
        step = dt if dt is not None else 0.05 / (_abs_spectral_sup(M, g)
                                                 + 1.0)

        def apply(u):
            return evolve_linear(M, eps, t, u, dt=step, max_refine=0,
                                 store_every=10 ** 9).final

        est = operator_norm_probe(apply, grid=g, N=M.N)
        r = math.log(max(float(est), 1e-300)) / t
        return SweepPoint(eps, t, float(est), r, guard.passed,
                          float(guard.margin), False)

    points = tuple(_run_jobs(job, eps_list, workers))
    active = [p for p in points if not p.skipped]
    passed = bool(active) and all(p.rate <= rate.gamma_spec + tol
                                  for p in active)
    pref = math.nan
    if len(active) >= 2:
        xs = [math.log(abs(math.log(p.eps))) for p in active]
        ys = [math.log(p.norm) - rate.gamma_spec * p.t for p in active]
        pref = float(np.polyfit(xs, ys, 1)[0])
    rate = replace(rate,
                   upper_rate=max(p.rate for p in active) if active
                   else None,
                   prefactor_exponent=pref if active else None)
    return UpperBoundReport(rate, points, tol, passed)


def lower_bound_experiment(M: MatrixSymbol, eps_list, T: float, *,
                           n_x: int = 64, K: int = 16,
                           radius: float = 0.5, tol: float = 0.1,
                           gap_tol: float = 1e-3,
                           smooth_ball: bool = False, workers: int = 1,
                           csv_dir=None, store_every: int = 4
                           ) -> LowerBoundReport:
    """Evolve the packet and track its mass on B(x0, |ln eps|^{-1}).

    The empirical lower rate is the log-slope of the localized L2 norm
    over the trailing half of the run; constants and polylog prefactors
    drop out of a slope, unlike the log-norm/t quotient of the upper
    probe.  The ball is a sharp grid indicator by default; smooth_ball
    switches to a one-cell linear ramp (the difference is second order
    in the spacing).
    """
    if M.d != 1:
        raise NotImplementedError("operator probes are one-dimensional")
    eps_list = sorted((float(e) for e in eps_list), reverse=True)
    if not eps_list:
        raise ValueError("empty eps sweep")
    rate = gamma_sup(M, GridSpec(1, n_x, K, eps_list[0]))

    def job(eps):
        g = GridSpec(1, n_x, K, eps)
        packet = make_wave_packet(M, g, rate, radius=radius,
                                  gap_tol=gap_tol)
        t = T * abs(math.log(eps))
        csv = None
        if csv_dir is not None:
            csv = Path(csv_dir) / f"lower_eps_{eps:.6g}.csv"
        tr = evolve_linear(M, eps, t, packet.state(),
                           store_every=store_every, csv_path=csv)
        rball = 1.0 / abs(math.log(eps))
        x = g.x_grid()[0]
        dist = np.abs(((x - packet.x0[0] + np.pi) % (2.0 * np.pi)) - np.pi)
        if smooth_ball:
            w = np.clip((rball - dist) / g.h + 0.5, 0.0, 1.0)
        else:
            w = (dist <= rball).astype(float)
        keep = list(range(0, len(tr.times), store_every))
        if keep[-1] != len(tr.times) - 1:
            keep.append(len(tr.times) - 1)
        ts = tr.times[keep]
        loc = np.array([
            math.sqrt(float((w[:, None] * np.abs(s.values) ** 2).sum())
                      / g.n_points)
            for s in tr.states])
        sel = (ts >= 0.5 * t) & (loc > 0.0)
        slope = float(np.polyfit(ts[sel], np.log(loc[sel]), 1)[0])
        c_i = float(loc[-1] * abs(math.log(eps)) ** g.d
                    * math.exp(-rate.gamma_spec * t))
        return LowerPoint(eps, t, rball, float(loc[0]), float(loc[-1]),
                          slope, c_i)

    points = tuple(_run_jobs(job, eps_list, workers))
    c_fit = min(p.c_fit for p in points)
    passed = c_fit > 0.0 and all(p.rate >= rate.gamma_spec - tol
                                 for p in points)
    rate = replace(rate, lower_rate=min(p.rate for p in points))
    return LowerBoundReport(rate, points, tol, c_fit, passed)


def instability_experiment(M: MatrixSymbol, B, K: float, eps_list, *,
                           K1: float | None = None, n_x: int = 64,
                           K_modes: int = 16, radius: float = 0.5,
                           gap_tol: float = 1e-3,
                           rate_window=(0.35, 0.75),
                           rate_rtol: float = 0.1, workers: int = 1,
                           csv_dir=None, store_every: int = 4
                           ) -> InstabilityReport:
    """Drive the semilinear flow from an eps^K-small packet to t*.

    K1 = None picks 2 N* + d + 1 with N* = q0 + 2 and q0 read from the
    window K/gamma; that choice leaves no positive t* until eps is far
    below desk scale, so desk sweeps pass a small K1 explicitly and the
    report carries whichever was used.  A blow-up before t* is recorded
    on the point as stronger-than-predicted growth, not a failure.
    """
    if M.d != 1:
        raise NotImplementedError("operator probes are one-dimensional")
    eps_list = sorted((float(e) for e in eps_list), reverse=True)
    if not eps_list:
        raise ValueError("empty eps sweep")
    rate = gamma_sup(M, GridSpec(1, n_x, K_modes, eps_list[0]))
    gam = rate.gamma_spec
    if gam <= 0.0:
        raise ValueError("gamma_spec <= 0: the spectrum is stable and the "
                         "instability experiment does not apply")
    if K1 is None:
        K1 = 2 * (q0_from(gam, K / gam) + 2) + M.d + 1
    if B is None:
        B = QuadraticNonlinearity(np.zeros((M.N,) * 3))

    def job(eps):
        L = abs(math.log(eps))
        t_star = (K * L - K1 * math.log(L)) / gam
        if t_star <= 0.0:
            raise ValueError(
                f"t* <= 0 at eps={eps:g} with K1={K1:g}: no observation "
                "window at this eps, pass a smaller K1")
        g = GridSpec(1, n_x, K_modes, eps)
        packet = make_wave_packet(M, g, rate, radius=radius,
                                  gap_tol=gap_tol, normalization="linf")
        u0 = StateVector(eps ** K * packet.state().values, g)
        csv = None
        if csv_dir is not None:
            csv = Path(csv_dir) / f"instability_eps_{eps:.6g}.csv"
        tr = evolve_semilinear(M, B, eps, t_star, u0,
                               store_every=store_every, csv_path=csv)
        blow = tr.blowup_time is not None
        amp = float(tr.linf.max())
        try:
            r = tr.growth_rate(rate_window[0] * t_star,
                               rate_window[1] * t_star)
        except ValueError:
            r = math.nan
        return InstabilityPoint(eps, t_star, amp, amp / eps ** K, r, blow)

    points = tuple(_run_jobs(job, eps_list, workers))
    steady = [p for p in points if not p.blowup]
    k_prime = math.nan
    eps_slope = math.nan
    if len(points) >= 2:
        ls = [math.log(abs(math.log(p.eps))) for p in points]
        la = [math.log(p.amplitude) for p in points]
        k_prime = float(-np.polyfit(ls, la, 1)[0])
        eps_slope = float(np.polyfit([math.log(p.eps) for p in points],
                                     la, 1)[0])
    floor_ok = all(
        p.amplitude >= abs(math.log(p.eps)) ** (-(k_prime + 0.5))
        for p in steady) if not math.isnan(k_prime) else False
    rate_ok = all(abs(p.rate - gam) <= rate_rtol * gam
                  for p in steady if not math.isnan(p.rate))
    return InstabilityReport(gam, float(K), float(K1), points, k_prime,
                             eps_slope, rate_ok,
                             bool(floor_ok and rate_ok))
