"""Config-driven experiment runner.

A config is flat INI text: one section whose name is the experiment
kind, `key = value` lines below it.  `validate` echoes the normalized
form (defaults filled in, symbols reprinted canonically), which is what
golden files pin.  `run` executes the experiment and writes
`report.json` plus `series/*.csv` under the configured output
directory; wall-clock numbers go to a separate `timings.json` so the
report itself is byte-reproducible from (config, seed).

All randomness downstream of a config flows from one PCG64 generator
seeded with the `seed` key, and the report records both.  The worker
count comes from PDFLOW_WORKERS rather than the config because it must
not influence results, only elapsed time.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import os
import re
import sys
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .calculus import composition_remainder_probe
from .corrector import assemble_sigma, eps_guard, q0_from, solve_correctors
from .dsl import ParseError, parse_matrix, print_matrix
from .flow import QuadraticNonlinearity, evolve_linear
from .garding import garding_experiment
from .quantize import l2_norm, op_eps_apply, random_band_limited
from .semigroup import (
    gamma_sup, instability_experiment, lower_bound_experiment,
    upper_bound_experiment,
)
from .symbols import GridSpec, MatrixSymbol

__all__ = ["KINDS", "ConfigError", "ExperimentConfig", "parse_config",
           "canonical_text", "run_experiment", "shipped_examples", "main"]

KINDS = ("approx", "compose", "bounds-upper", "bounds-lower",
         "instability", "garding")


class ConfigError(ValueError):
    """One message per offending field."""

    def __init__(self, errors):
        self.errors = tuple(errors)
        super().__init__("; ".join(self.errors))


# ---------------------------------------------------------------------------
# Value parsers.  Every parser raises ValueError with a message that reads
# correctly after the "kind.key: " prefix.

_DYADIC_RE = re.compile(r"2\^(-?\d+)$")


def _parse_float(text: str) -> float:
    text = text.strip()
    m = _DYADIC_RE.match(text)
    if m:
        return 2.0 ** int(m.group(1))
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"not a number: {text!r}") from None


def _parse_int(text: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise ValueError(f"not an integer: {text!r}") from None


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_eps_list(text: str) -> tuple:
    parts = text.replace(",", " ").split()
    if not parts:
        raise ValueError("empty sweep")
    vals = tuple(_parse_float(p) for p in parts)
    for v in vals:
        if not 0.0 < v < 1.0:
            raise ValueError(f"eps must lie in (0, 1), got {v!r}")
    return vals


def _parse_int_list(text: str) -> tuple:
    parts = text.replace(",", " ").split()
    if not parts:
        raise ValueError("empty list")
    return tuple(_parse_int(p) for p in parts)


def _parse_tensor(text: str) -> np.ndarray:
    try:
        t = np.asarray(json.loads(text), dtype=float)
    except (json.JSONDecodeError, ValueError):
        raise ValueError("not a JSON array of reals") from None
    if t.ndim != 3 or len(set(t.shape)) != 1:
        raise ValueError(f"tensor must be N x N x N, got shape {t.shape}")
    return t


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt(x) for x in v)
    if isinstance(v, np.ndarray):
        return json.dumps(v.tolist())
    return str(v)


_REQUIRED = object()


@dataclass(frozen=True)
class _Key:
    parse: object
    default: object = _REQUIRED


def _symbol_keys(name="symbol", order="order"):
    return {name: _Key(str, None), name + "_file": _Key(str, None),
            order: _Key(_parse_float, 0.0)}


def _tail(kind):
    return {"seed": _Key(_parse_int, 0), "out": _Key(str, f"runs/{kind}")}


# The key tables double as the echo order of `validate`.
_KEYS = {
    "approx": {
        **_symbol_keys(),
        "n_x": _Key(_parse_int, 64),
        "k_max": _Key(_parse_int, 16),
        "eps": _Key(_parse_eps_list),
        "T": _Key(_parse_float, 1.0),
        "q0": _Key(_parse_int, None),
        "tol": _Key(_parse_float, None),
        **_tail("approx"),
    },
    "compose": {
        **_symbol_keys(),
        **_symbol_keys("symbol2", "order2"),
        "n": _Key(_parse_int, 1),
        "quantization": _Key(str, "semiclassical"),
        "n_x": _Key(_parse_int, 64),
        "k_max": _Key(_parse_int, 16),
        "eps": _Key(_parse_eps_list, None),
        "tol": _Key(_parse_float, None),
        "slope_lo": _Key(_parse_float, None),
        "slope_hi": _Key(_parse_float, None),
        **_tail("compose"),
    },
    "bounds-upper": {
        **_symbol_keys(),
        "n_x": _Key(_parse_int, 32),
        "k_max": _Key(_parse_int, 8),
        "eps": _Key(_parse_eps_list),
        "T": _Key(_parse_float, 1.0),
        "tol": _Key(_parse_float, 0.1),
        "enforce_guard": _Key(_parse_bool, False),
        **_tail("bounds-upper"),
    },
    "bounds-lower": {
        **_symbol_keys(),
        "n_x": _Key(_parse_int, 64),
        "k_max": _Key(_parse_int, 16),
        "eps": _Key(_parse_eps_list),
        "T": _Key(_parse_float, 1.0),
        "tol": _Key(_parse_float, 0.1),
        "radius": _Key(_parse_float, 0.5),
        "smooth_ball": _Key(_parse_bool, False),
        **_tail("bounds-lower"),
    },
    "instability": {
        **_symbol_keys(),
        "nonlinearity": _Key(_parse_tensor, None),
        "K": _Key(_parse_float),
        "K1": _Key(_parse_float, None),
        "eps": _Key(_parse_eps_list),
        "n_x": _Key(_parse_int, 64),
        "k_max": _Key(_parse_int, 16),
        "radius": _Key(_parse_float, 0.5),
        **_tail("instability"),
    },
    "garding": {
        **_symbol_keys(),
        "theta": _Key(_parse_float),
        "J": _Key(_parse_int, 5),
        "js": _Key(_parse_int_list, None),
        "n_x": _Key(_parse_int, 256),
        "k_max": _Key(_parse_int, 64),
        "tau_star": _Key(_parse_float, 4.0),
        "n_random": _Key(_parse_int, 3),
        "c": _Key(_parse_float, None),
        **_tail("garding"),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully normalized experiment description.

    values maps every config key of the kind to its typed value, with
    symbols replaced by their canonical inline text; the parsed trees
    live in the dedicated fields.
    """
    kind: str
    values: dict
    symbol: MatrixSymbol
    symbol2: MatrixSymbol | None = None
    nonlinearity: QuadraticNonlinearity | None = None

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def out(self) -> Path:
        return Path(self.values["out"])


def parse_config(text: str, base=None) -> ExperimentConfig:
    """Parse and validate config text; base resolves *_file keys."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                   comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"config: {str(exc).splitlines()[0]}"]) from None
    sections = cp.sections()
    if not sections:
        raise ConfigError(["kind missing"])
    if len(sections) > 1:
        raise ConfigError(
            [f"config: one experiment per file, got sections "
             f"{', '.join(sections)}"])
    kind = sections[0]
    if kind not in KINDS:
        raise ConfigError(
            [f"kind: unknown experiment {kind!r} (one of {', '.join(KINDS)})"])

    table = _KEYS[kind]
    raw = dict(cp.items(kind))
    errors, vals = [], {}
    for key, spec in table.items():
        if key in raw:
            try:
                vals[key] = spec.parse(raw.pop(key))
            except ValueError as exc:
                errors.append(f"{kind}.{key}: {exc}")
                vals[key] = None if spec.default is _REQUIRED else spec.default
        elif spec.default is _REQUIRED:
            errors.append(f"{kind}.{key}: required")
            vals[key] = None
        else:
            vals[key] = spec.default
    for key in sorted(raw):
        errors.append(f"{kind}.{key}: unknown key")
    cfg = _build(kind, vals, base, errors)
    if errors:
        raise ConfigError(errors)
    return cfg


def _take_matrix(kind, vals, name, order_key, base, errors):
    inline, fname = vals.pop(name), vals.pop(name + "_file")
    order = vals[order_key]
    if (inline is None) == (fname is None):
        if inline is None:
            errors.append(f"{kind}.{name}: required (inline or {name}_file)")
        else:
            errors.append(f"{kind}.{name}: give either {name} or "
                          f"{name}_file, not both")
        vals[name] = None
        return None
    text = inline
    if fname is not None:
        p = Path(fname) if base is None else Path(base) / fname
        try:
            text = p.read_text()
        except OSError as exc:
            errors.append(f"{kind}.{name}_file: {exc}")
            vals[name] = None
            return None
    try:
        m = MatrixSymbol(parse_matrix(text), order=float(order or 0.0))
    except (ParseError, ValueError) as exc:
        errors.append(f"{kind}.{name}: {exc}")
        vals[name] = None
        return None
    if m.d != 1:
        errors.append(f"{kind}.{name}: experiments are one-dimensional "
                      f"(x1 / xi1 only)")
    vals[name] = print_matrix(m)
    return m


def _build(kind, vals, base, errors):
    m = _take_matrix(kind, vals, "symbol", "order", base, errors)
    m2 = None
    nl = None

    if kind == "approx":
        if vals["tol"] is None and vals.get("eps") and len(vals["eps"]) < 2:
            errors.append("approx.eps: need two or more sweep points to fit "
                          "a slope (or set tol)")
        if vals["q0"] is not None and vals["q0"] < 0:
            errors.append("approx.q0: must be nonnegative")
    elif kind == "compose":
        m2 = _take_matrix(kind, vals, "symbol2", "order2", base, errors)
        if vals["quantization"] not in ("semiclassical", "weyl"):
            errors.append("compose.quantization: must be semiclassical or "
                          "weyl")
        if vals["n"] is not None and vals["n"] < 0:
            errors.append("compose.n: must be nonnegative")
        if vals["tol"] is None and vals["n"] is not None:
            # default acceptance band for the fitted eps-slope; the weyl
            # sweep decays in the opposite direction, so it has no
            # default and must state its own band
            if vals["quantization"] == "semiclassical":
                if vals["slope_lo"] is None:
                    vals["slope_lo"] = vals["n"] + 0.8
                if vals["slope_hi"] is None:
                    vals["slope_hi"] = vals["n"] + 1.3
            elif vals["slope_lo"] is None or vals["slope_hi"] is None:
                errors.append("compose.slope_lo: weyl runs need an explicit "
                              "slope band unless tol is set")
        if m is not None and m2 is not None and m.N != m2.N:
            errors.append(f"compose.symbol2: size {m2.N} does not match "
                          f"symbol size {m.N}")
    elif kind == "instability":
        if vals["K"] is not None and vals["K"] <= 0:
            errors.append("instability.K: need K > 0")
        if vals["K1"] is not None and vals["K1"] <= 0:
            errors.append("instability.K1: need K1 > 0")
        t = vals.pop("nonlinearity")
        if t is not None:
            if m is not None and t.shape[0] != m.N:
                errors.append(f"instability.nonlinearity: tensor is "
                              f"{t.shape[0]}x{t.shape[0]}x{t.shape[0]} but "
                              f"the symbol has N = {m.N}")
            else:
                nl = QuadraticNonlinearity(t)
        vals["nonlinearity"] = t
    elif kind == "garding":
        th = vals["theta"]
        if th is not None:
            if th == 1.0:
                errors.append("garding.theta: theta = 1 is the endpoint the "
                              "derivative gain excludes; need theta < 1")
            elif not 0.0 < th < 1.0:
                errors.append("garding.theta: need theta in (0, 1)")
        if m is not None and m.N != 1:
            errors.append("garding.symbol: must be scalar (1 x 1)")
        if vals["J"] is not None and vals["J"] < 1:
            errors.append("garding.J: need at least one block")
        if vals["js"] is not None and any(j < 0 for j in vals["js"]):
            errors.append("garding.js: block indices must be nonnegative")
    if kind in ("bounds-upper", "bounds-lower"):
        if vals["tol"] is not None and vals["tol"] <= 0:
            errors.append(f"{kind}.tol: must be positive")

    # grid sanity now rather than at dispatch time; garding and the
    # sweepless compose run at a fixed placeholder eps
    if vals.get("n_x") is not None and vals.get("k_max") is not None:
        eps0 = 0.5
        if kind not in ("garding",) and vals.get("eps"):
            eps0 = vals["eps"][0]
        try:
            GridSpec(1, vals["n_x"], vals["k_max"], eps0)
        except ValueError as exc:
            errors.append(f"{kind}.n_x: {exc}")

    if vals["seed"] is not None and vals["seed"] < 0:
        errors.append(f"{kind}.seed: must be nonnegative")
    if errors:
        return None
    return ExperimentConfig(kind, vals, m, m2, nl)


def canonical_text(cfg: ExperimentConfig) -> str:
    """Normalized config echo; fixed key order, unset optionals omitted."""
    lines = [f"[{cfg.kind}]"]
    for key in _KEYS[cfg.kind]:
        if key.endswith("_file"):
            continue
        v = cfg.values.get(key)
        if v is None:
            continue
        lines.append(f"{key} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Runners.  Each returns (result dict, checks, skips); a check is a
# pass/fail verdict that names the tolerance it used.


def _check(name, passed, value, tolerance, criterion):
    return {"name": name, "passed": bool(passed), "value": value,
            "tolerance": tolerance, "criterion": criterion}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _run_approx(cfg, series, workers):
    v = cfg.values
    M = cfg.symbol
    rng = np.random.default_rng(v["seed"])
    rate = gamma_sup(M, GridSpec(1, v["n_x"], v["k_max"], v["eps"][0]))
    q0 = v["q0"] if v["q0"] is not None else q0_from(
        max(rate.gamma_spec, 0.0), v["T"])
    rows, skips = [], []
    for eps in v["eps"]:
        g = GridSpec(1, v["n_x"], v["k_max"], eps)
        u_seed = int(rng.integers(2 ** 31))  # drawn even when the point is
        # skipped, so the stream stays aligned across guard outcomes
        guard = eps_guard(eps, M, v["T"], g)
        if not guard.passed:
            skips.append({"stage": "eps_guard", "eps": eps,
                          "lhs": guard.lhs, "threshold": guard.threshold,
                          "reason": "eps |ln eps|^n* exceeds c0 / |M|_r"})
            continue
        t_end = v["T"] * abs(math.log(eps))
        u0 = random_band_limited(g, M.N, seed=u_seed, decay=1.0)
        ref = evolve_linear(M, eps, t_end, u0, refine_tol=1e-9,
                            store_every=10 ** 9)
        fam = solve_correctors(M, q0, 0.0, t_end, g, dt=ref.dt)
        sig = assemble_sigma(fam, eps)
        approx = op_eps_apply(sig.at(t_end), u0)
        diff = approx.values - ref.final.values
        err = float(np.sqrt(np.sum(np.abs(diff) ** 2) / g.n_points))
        err /= l2_norm(u0)
        rows.append({"eps": eps, "t": t_end, "err_l2": err,
                     "ref_dt": ref.dt})
    _write_csv(series / "approx.csv", ["eps", "t", "err_l2"],
               [(r["eps"], r["t"], r["err_l2"]) for r in rows])
    slope = None
    if len(rows) >= 2 and all(r["err_l2"] > 0 for r in rows):
        slope = float(np.polyfit(np.log([r["eps"] for r in rows]),
                                 np.log([r["err_l2"] for r in rows]), 1)[0])
    result = {"gamma_spec": rate.gamma_spec, "q0": q0,
              "points": rows, "slope": slope}
    checks = []
    if not rows:
        checks.append(_check("sweep_nonempty", False, 0, "n >= 1",
                             "every sweep point was guard-skipped"))
    elif v["tol"] is not None:
        worst = max(r["err_l2"] for r in rows)
        checks.append(_check(
            "residual_below_tol", worst <= v["tol"], worst, v["tol"],
            f"max relative L2 error {worst:.3e} <= tol {v['tol']:g}"))
    else:
        ok = slope is not None and 0.7 <= slope <= 1.3
        checks.append(_check(
            "error_slope_in_band", ok, slope, [0.7, 1.3],
            f"fitted log-log slope {slope!r} in [0.7, 1.3]"))
    return result, checks, skips


def _run_compose(cfg, series, workers):
    v = cfg.values
    eps0 = v["eps"][0] if v["eps"] else 2.0 ** -4
    g = GridSpec(1, v["n_x"], v["k_max"], eps0)
    rep = composition_remainder_probe(cfg.symbol, cfg.symbol2, v["n"], g,
                                      v["quantization"],
                                      eps_sweep=v["eps"])
    rep.to_csv(series / "remainder.csv")
    checks = []
    if v["tol"] is not None:
        worst = max(r[1] for r in rep.table)
        checks.append(_check(
            "remainder_below_tol", worst <= v["tol"], worst, v["tol"],
            f"max remainder {worst:.3e} <= tol {v['tol']:g}"))
    else:
        lo, hi = v["slope_lo"], v["slope_hi"]
        ok = lo <= rep.slope <= hi
        checks.append(_check(
            "remainder_slope_in_band", ok, rep.slope, [lo, hi],
            f"fitted remainder slope {rep.slope:.3f} in [{lo:g}, {hi:g}]"))
    return rep.as_dict(), checks, []


def _guard_skips(points):
    return [{"stage": "eps_guard", "eps": p.eps,
             "reason": "eps |ln eps|^n* exceeds c0 / |M|_r"}
            for p in points if p.skipped]


def _run_bounds_upper(cfg, series, workers):
    v = cfg.values
    rep = upper_bound_experiment(cfg.symbol, list(v["eps"]), v["T"],
                                 n_x=v["n_x"], K=v["k_max"], tol=v["tol"],
                                 enforce_guard=v["enforce_guard"],
                                 workers=workers)
    _write_csv(series / "sweep.csv",
               ["eps", "t", "norm", "rate", "guard_passed"],
               [(p.eps, p.t, p.norm, p.rate, p.guard_passed)
                for p in rep.points])
    checks = [_check(
        "upper_rate_within_tol", rep.passed, rep.rate.upper_rate, v["tol"],
        f"measured rate {rep.rate.upper_rate!r} <= gamma_spec "
        f"{rep.rate.gamma_spec:.6g} + tol {v['tol']:g}")]
    return rep.as_dict(), checks, _guard_skips(rep.points)


def _run_bounds_lower(cfg, series, workers):
    v = cfg.values
    rep = lower_bound_experiment(cfg.symbol, list(v["eps"]), v["T"],
                                 n_x=v["n_x"], K=v["k_max"],
                                 radius=v["radius"], tol=v["tol"],
                                 smooth_ball=v["smooth_ball"],
                                 workers=workers, csv_dir=series)
    _write_csv(series / "sweep.csv",
               ["eps", "t", "final_local", "rate"],
               [(p.eps, p.t, p.final_local, p.rate) for p in rep.points])
    checks = [_check(
        "lower_rate_within_tol", rep.passed, rep.rate.lower_rate, v["tol"],
        f"localized rate {rep.rate.lower_rate!r} >= gamma_spec "
        f"{rep.rate.gamma_spec:.6g} - tol {v['tol']:g}")]
    return rep.as_dict(), checks, []


def _run_instability(cfg, series, workers):
    v = cfg.values
    rep = instability_experiment(cfg.symbol, cfg.nonlinearity, v["K"],
                                 list(v["eps"]), K1=v["K1"], n_x=v["n_x"],
                                 K_modes=v["k_max"], radius=v["radius"],
                                 workers=workers, csv_dir=series)
    _write_csv(series / "sweep.csv",
               ["eps", "t_star", "amplitude", "rate", "blowup"],
               [(p.eps, p.t_star, p.amplitude, p.rate, p.blowup)
                for p in rep.points])
    checks = [
        _check("amplitude_reaches_floor", rep.passed, rep.k_prime,
               f"amplitude >= |ln eps|^-K' by t*, K1 = {rep.k1:g}",
               f"fitted polylog exponent K' = {rep.k_prime:.3f}"),
        _check("growth_rate_matches_gamma", rep.rate_ok,
               min(p.rate for p in rep.points), 0.1,
               f"pre-saturation rates within 10% of gamma "
               f"{rep.gamma:.6g}"),
    ]
    return rep.as_dict(), checks, []


def _run_garding(cfg, series, workers):
    v = cfg.values
    g = GridSpec(1, v["n_x"], v["k_max"], 0.5)  # eps is never read by the
    # classical-quantization path; 0.5 keeps GridSpec happy
    rep = garding_experiment(cfg.symbol, v["theta"], v["J"], g, js=v["js"],
                             tau_star=v["tau_star"], n_random=v["n_random"],
                             seed=v["seed"], c=v["c"], workers=workers,
                             csv_dir=series)
    blocks_ok = all(b.flow_passed for b in rep.blocks)
    checks = [
        _check("backward_flow_tests", blocks_ok,
               min(b.margin_adversarial for b in rep.blocks),
               -1e-8, f"decay margins >= -1e-8 * scale for all blocks, "
               f"first passing block j0 = {rep.j0!r}"),
        _check("quadratic_form_floor", rep.quad.passed, rep.quad.min_eig,
               -1e-8, f"min eig of Re a^w + c <D>^-theta at c = "
               f"{rep.c:.6g} is >= -1e-8"),
        _check("corrector_growth", rep.growth.passed,
               max(e.exponent for e in rep.growth.entries), 0.2,
               "fitted |S_q| growth exponents <= q + (a+b)/2 + 0.2"),
        _check("gradient_bound", rep.gradient.passed,
               max((e.grad_max for e in rep.gradient.entries
                    if e.n_points), default=0.0), "4 sqrt(h)",
               "|D a_j| <= 4 sqrt(h) on every tested sublevel set"),
    ]
    return rep.as_dict(), checks, []


_RUNNERS = {
    "approx": _run_approx,
    "compose": _run_compose,
    "bounds-upper": _run_bounds_upper,
    "bounds-lower": _run_bounds_lower,
    "instability": _run_instability,
    "garding": _run_garding,
}


def run_experiment(cfg: ExperimentConfig, *, workers=None, out=None):
    """Dispatch cfg, write report.json / series/*.csv / timings.json.

    Returns (report dict, outdir).  report["passed"] is the and of all
    checks; timing lives only in timings.json so two runs of one config
    produce byte-identical reports.
    """
    if workers is None:
        workers = int(os.environ.get("PDFLOW_WORKERS", "1"))
    outdir = Path(out) if out is not None else cfg.out
    series = outdir / "series"
    series.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    result, checks, skips = _RUNNERS[cfg.kind](cfg, series, workers)
    elapsed = time.perf_counter() - t0
    report = {
        "kind": cfg.kind,
        "config": {k: _fmt(v) for k, v in cfg.values.items()
                   if v is not None},
        "rng": {"generator": "PCG64", "seed": cfg.seed},
        "result": _jsonable(result),
        "checks": _jsonable(checks),
        "skips": _jsonable(skips),
        "passed": bool(checks) and all(c["passed"] for c in checks),
    }
    (outdir / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    (outdir / "timings.json").write_text(
        json.dumps({"seconds": round(elapsed, 3), "workers": workers},
                   indent=2, sort_keys=True) + "\n")
    return report, outdir


# ---------------------------------------------------------------------------
# Entry point


def shipped_examples():
    """(name, kind, description, text) per packaged example config."""
    root = resources.files("pdflow") / "configs"
    out = []
    for entry in sorted(root.iterdir(), key=lambda e: e.name):
        if not entry.name.endswith(".cfg"):
            continue
        text = entry.read_text()
        desc = ""
        kind = "?"
        for line in text.splitlines():
            line = line.strip()
            if line.startswith("#") and not desc:
                desc = line.lstrip("# ")
            elif line.startswith("["):
                kind = line.strip("[]")
                break
        out.append((entry.name, kind, desc, text))
    return out


def _read_config_arg(arg):
    """Config text from a path, or from a shipped example by name."""
    p = Path(arg)
    if p.exists():
        return p.read_text(), p.parent
    name = arg if arg.endswith(".cfg") else arg + ".cfg"
    entry = resources.files("pdflow") / "configs" / name
    if entry.is_file():
        return entry.read_text(), None
    raise ConfigError([f"config: no such file or shipped example: {arg}"])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="pdflow",
        description="Run symbol-calculus experiments from INI configs.")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", help="run a config and write its report")
    p_run.add_argument("config", help="config path or shipped example name")
    p_run.add_argument("--out", default=None,
                       help="override the output directory")
    p_val = sub.add_parser("validate",
                           help="check a config and echo its normal form")
    p_val.add_argument("config", help="config path or shipped example name")
    sub.add_parser("list-examples", help="list the packaged example configs")
    args = ap.parse_args(argv)

    try:
        if args.cmd == "list-examples":
            for name, kind, desc, _ in shipped_examples():
                print(f"{name:<28} {kind:<13} {desc}")
            return 0
        text, base = _read_config_arg(args.config)
        cfg = parse_config(text, base=base)
        if args.cmd == "validate":
            sys.stdout.write(canonical_text(cfg))
            return 0
        report, outdir = run_experiment(cfg, out=args.out)
        for c in report["checks"]:
            print(f"[{'PASS' if c['passed'] else 'FAIL'}] {c['criterion']}")
        for s in report["skips"]:
            print(f"[SKIP] eps = {s['eps']:g}: {s['reason']}")
        verdict = "PASS" if report["passed"] else "FAIL"
        print(f"{verdict}  report: {outdir / 'report.json'}")
        return 0 if report["passed"] else 1
    except ConfigError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # precondition failures raised by the experiments themselves
        # (stable spectrum, empty growth window, eps too large)
        print(f"error: {args.cmd}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
