"""Matrix-valued symbols as expression trees over the torus phase space.

Symbols a(x, xi) live on [0, 2pi)^d x R^d, are 2pi-periodic in x by
construction (x enters only through sin/cos of integer-linear arguments),
and carry exact symbolic derivatives.  Expression nodes are hash-consed:
structurally equal trees are the same object, so identity is equality and
per-call evaluation memos deduplicate shared subtrees for free.

Frequency is discretized on the integer lattice |k_i| <= K; the
semiclassical evaluation point is eps*k.  All norms here are grid sups,
never integrals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product as iproduct

import numpy as np

__all__ = [
    "SymbolExpr", "Const", "Var", "Sum", "Prod", "Power", "Sin", "Cos",
    "Exp", "Bracket", "Glue", "OrderExceededError",
    "const", "var_x", "var_xi", "var_t", "add", "mul", "pow_int",
    "sin_of", "cos_of", "exp_of", "bracket", "glue",
    "smooth_step", "cutoff", "eval_expr", "diff_expr",
    "GridSpec", "MatrixSymbol", "SampledSymbol",
    "differentiate", "sample", "symbol_norm", "check_class", "ClassReport",
    "multi_indices", "GLUE_EVAL_FLOOR",
]

# Below this argument the bump exp(-1/t) is < 1e-289 and its derivative
# polynomials overflow before the exponential can tame them; clamp to 0.
GLUE_EVAL_FLOOR = 1.5e-3

_DEFAULT_MAX_ORDER = 8


class OrderExceededError(Exception):
    """Requested derivative order exceeds the configured cap."""


# ---------------------------------------------------------------------------
# nodes

@dataclass(eq=False, frozen=True)
class SymbolExpr:
    """Base node.  eq=False: interning makes identity the equality."""

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return add(self, mul(const(-1), _coerce(other)))

    def __rsub__(self, other):
        return add(_coerce(other), mul(const(-1), self))

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return mul(self, pow_int(_coerce(other), -1))

    def __rtruediv__(self, other):
        return mul(_coerce(other), pow_int(self, -1))

    def __pow__(self, n: int):
        return pow_int(self, n)

    def __neg__(self):
        return mul(const(-1), self)


@dataclass(eq=False, frozen=True)
class Const(SymbolExpr):
    value: complex


@dataclass(eq=False, frozen=True)
class Var(SymbolExpr):
    name: str          # "x", "xi" or "t"
    index: int = 0


@dataclass(eq=False, frozen=True)
class Sum(SymbolExpr):
    terms: tuple


@dataclass(eq=False, frozen=True)
class Prod(SymbolExpr):
    factors: tuple


@dataclass(eq=False, frozen=True)
class Power(SymbolExpr):
    base: SymbolExpr
    exponent: int


@dataclass(eq=False, frozen=True)
class Sin(SymbolExpr):
    arg: SymbolExpr


@dataclass(eq=False, frozen=True)
class Cos(SymbolExpr):
    arg: SymbolExpr


@dataclass(eq=False, frozen=True)
class Exp(SymbolExpr):
    arg: SymbolExpr


@dataclass(eq=False, frozen=True)
class Bracket(SymbolExpr):
    """Japanese bracket power <xi>^s = (1 + |xi|^2)^(s/2), s real.

    Dimension-agnostic: evaluation sums the squares of every xi axis
    it is handed, so the same node works for any ambient d.
    """
    power: float


@dataclass(eq=False, frozen=True)
class Glue(SymbolExpr):
    """order-th derivative of the cutoff primitive g(t) = exp(-1/t) [t>0].

    Not part of the base node set.  Needed so Littlewood-Paley filters are
    genuine symbols with exact derivatives; g and all its derivatives
    vanish identically for t <= 0, so plateaus of step functions built
    from it are float-exact.
    """
    arg: SymbolExpr
    order: int


# ---------------------------------------------------------------------------
# interning constructors with constant folding

_INTERN: dict = {}


def _node(key, build):
    node = _INTERN.get(key)
    if node is None:
        node = build()
        _INTERN[key] = node
    return node


def _coerce(v) -> SymbolExpr:
    if isinstance(v, SymbolExpr):
        return v
    if isinstance(v, (int, float, complex, np.integer, np.floating)):
        return const(complex(v))
    raise TypeError(f"cannot coerce {type(v).__name__} to SymbolExpr")


def const(v) -> Const:
    v = complex(v)
    return _node(("c", v), lambda: Const(v))


def var_x(i: int = 0) -> Var:
    if i < 0:
        raise ValueError("axis index must be nonnegative")
    return _node(("v", "x", i), lambda: Var("x", i))


def var_xi(i: int = 0) -> Var:
    if i < 0:
        raise ValueError("axis index must be nonnegative")
    return _node(("v", "xi", i), lambda: Var("xi", i))


def var_t() -> Var:
    return _node(("v", "t", 0), lambda: Var("t", 0))


def add(*terms) -> SymbolExpr:
    flat = []
    c = 0j
    for tm in terms:
        tm = _coerce(tm)
        if isinstance(tm, Sum):
            flat.extend(tm.terms)
        else:
            flat.append(tm)
    rest = []
    for tm in flat:
        if isinstance(tm, Const):
            c += tm.value
        else:
            rest.append(tm)
    if c != 0 or not rest:
        rest = [const(c)] + rest
    if len(rest) == 1:
        return rest[0]
    key = ("s",) + tuple(id(tm) for tm in rest)
    return _node(key, lambda: Sum(tuple(rest)))


def mul(*factors) -> SymbolExpr:
    flat = []
    c = 1 + 0j
    for f in factors:
        f = _coerce(f)
        if isinstance(f, Prod):
            flat.extend(f.factors)
        else:
            flat.append(f)
    rest = []
    for f in flat:
        if isinstance(f, Const):
            c *= f.value
        else:
            rest.append(f)
    if c == 0:
        return const(0)
    if c != 1 or not rest:
        rest = [const(c)] + rest
    if len(rest) == 1:
        return rest[0]
    key = ("p",) + tuple(id(f) for f in rest)
    return _node(key, lambda: Prod(tuple(rest)))


def pow_int(base, n: int) -> SymbolExpr:
    base = _coerce(base)
    if n != int(n):
        raise ValueError("power exponent must be an integer")
    n = int(n)
    if n == 0:
        return const(1)
    if n == 1:
        return base
    if isinstance(base, Const):
        if base.value == 0 and n < 0:
            raise ZeroDivisionError("0 raised to a negative power")
        return const(base.value ** n)
    if isinstance(base, Power):
        return pow_int(base.base, base.exponent * n)
    if isinstance(base, Bracket):
        return bracket(base.power * n)
    key = ("w", id(base), n)
    return _node(key, lambda: Power(base, n))


def sin_of(a) -> SymbolExpr:
    a = _coerce(a)
    if isinstance(a, Const):
        return const(np.sin(a.value))
    return _node(("sin", id(a)), lambda: Sin(a))


def cos_of(a) -> SymbolExpr:
    a = _coerce(a)
    if isinstance(a, Const):
        return const(np.cos(a.value))
    return _node(("cos", id(a)), lambda: Cos(a))


def exp_of(a) -> SymbolExpr:
    a = _coerce(a)
    if isinstance(a, Const):
        return const(np.exp(a.value))
    return _node(("exp", id(a)), lambda: Exp(a))


def bracket(s: float) -> SymbolExpr:
    s = float(s)
    if s == 0:
        return const(1)
    return _node(("b", s), lambda: Bracket(s))


def glue(arg, order: int = 0) -> SymbolExpr:
    arg = _coerce(arg)
    order = int(order)
    if order < 0:
        raise ValueError("glue order must be nonnegative")
    return _node(("g", id(arg), order), lambda: Glue(arg, order))


def smooth_step(u) -> SymbolExpr:
    """sigma(u) = g(u) / (g(u) + g(1-u)): exactly 0 for u<=0, 1 for u>=1."""
    u = _coerce(u)
    gu = glue(u, 0)
    gc = glue(add(const(1), mul(const(-1), u)), 0)
    return mul(gu, pow_int(add(gu, gc), -1))


def cutoff(a: float, b: float) -> SymbolExpr:
    """Radial frequency cutoff chi(xi): 1 on |xi| <= a, 0 on |xi| >= b.

    Built as sigma((b^2 - |xi|^2)/(b^2 - a^2)) with |xi|^2 = <xi>^2 - 1,
    so one node serves every ambient dimension.  Plateaus are float-exact
    because the glue primitive vanishes identically off its support.
    """
    if not 0 <= a < b:
        raise ValueError("cutoff needs 0 <= a < b")
    xi2 = add(bracket(2.0), const(-1))
    u = mul(const(1.0 / (b * b - a * a)), add(const(b * b), mul(const(-1), xi2)))
    return smooth_step(u)


# ---------------------------------------------------------------------------
# glue derivative polynomials

@lru_cache(maxsize=None)
def _glue_poly(order: int) -> np.ndarray:
    """Coefficients (descending powers of y = 1/t) of Q_n in
    g^(n)(t) = exp(-1/t) Q_n(1/t), from Q_n = y^2 (Q_{n-1} - Q_{n-1}')."""
    coeffs = [1]                       # ascending powers, exact ints
    for _ in range(order):
        deriv = [coeffs[kk] * kk for kk in range(1, len(coeffs))]
        diff = [coeffs[kk] - (deriv[kk] if kk < len(deriv) else 0)
                for kk in range(len(coeffs))]
        coeffs = [0, 0] + diff
    return np.array(coeffs[::-1], dtype=float)


def _glue_eval(targ: np.ndarray, order: int) -> np.ndarray:
    arr = np.asarray(np.real(targ), dtype=float)
    shp = arr.shape
    flat = arr.ravel()
    out = np.zeros_like(flat)
    m = flat > GLUE_EVAL_FLOOR
    if m.any():
        y = 1.0 / flat[m]
        out[m] = np.exp(-y) * np.polyval(_glue_poly(order), y)
    return out.reshape(shp)


# ---------------------------------------------------------------------------
# evaluation

def eval_expr(e: SymbolExpr, x, xi, t: float = 0.0, memo: dict | None = None):
    """Vectorized evaluation.  x and xi are sequences of per-axis arrays
    (broadcastable against each other); t is an external scalar.
    Shared subtrees are evaluated once per call via an identity memo."""
    if memo is None:
        memo = {}
    return _ev(e, x, xi, t, memo)


def _ev(e, x, xi, t, memo):
    got = memo.get(e)
    if got is not None:
        return got
    if isinstance(e, Const):
        v = e.value
        val = v.real if v.imag == 0 else v
    elif isinstance(e, Var):
        if e.name == "x":
            val = np.asarray(x[e.index])
        elif e.name == "xi":
            val = np.asarray(xi[e.index])
        else:
            val = float(t)
    elif isinstance(e, Sum):
        val = _ev(e.terms[0], x, xi, t, memo)
        for tm in e.terms[1:]:
            val = val + _ev(tm, x, xi, t, memo)
    elif isinstance(e, Prod):
        val = _ev(e.factors[0], x, xi, t, memo)
        for f in e.factors[1:]:
            val = val * _ev(f, x, xi, t, memo)
    elif isinstance(e, Power):
        val = _ev(e.base, x, xi, t, memo) ** e.exponent
    elif isinstance(e, Sin):
        val = np.sin(_ev(e.arg, x, xi, t, memo))
    elif isinstance(e, Cos):
        val = np.cos(_ev(e.arg, x, xi, t, memo))
    elif isinstance(e, Exp):
        val = np.exp(_ev(e.arg, x, xi, t, memo))
    elif isinstance(e, Bracket):
        s2 = None
        for ax in xi:
            q = np.asarray(ax) ** 2
            s2 = q if s2 is None else s2 + q
        if s2 is None:
            s2 = 0.0
        val = (1.0 + s2) ** (e.power / 2.0)
    elif isinstance(e, Glue):
        val = _glue_eval(_ev(e.arg, x, xi, t, memo), e.order)
    else:
        raise TypeError(f"unknown node {type(e).__name__}")
    memo[e] = val
    return val


# ---------------------------------------------------------------------------
# exact differentiation

_DIFF_CACHE: dict = {}


def diff_expr(e: SymbolExpr, wrt: str, index: int = 0) -> SymbolExpr:
    """Exact single partial derivative; wrt in {"x", "xi", "t"}.
    Results are cached globally (nodes are interned, never collected)."""
    key = (id(e), wrt, index)
    got = _DIFF_CACHE.get(key)
    if got is not None:
        return got
    d = _diff(e, wrt, index)
    _DIFF_CACHE[key] = d
    return d


def _diff(e, wrt, index):
    zero = const(0)
    if isinstance(e, Const):
        return zero
    if isinstance(e, Var):
        return const(1) if (e.name == wrt and e.index == index) else zero
    if isinstance(e, Sum):
        return add(*[diff_expr(tm, wrt, index) for tm in e.terms])
    if isinstance(e, Prod):
        parts = []
        for i, f in enumerate(e.factors):
            df = diff_expr(f, wrt, index)
            if isinstance(df, Const) and df.value == 0:
                continue
            parts.append(mul(*e.factors[:i], df, *e.factors[i + 1:]))
        return add(*parts) if parts else zero
    if isinstance(e, Power):
        db = diff_expr(e.base, wrt, index)
        return mul(const(e.exponent), pow_int(e.base, e.exponent - 1), db)
    if isinstance(e, Sin):
        return mul(cos_of(e.arg), diff_expr(e.arg, wrt, index))
    if isinstance(e, Cos):
        return mul(const(-1), sin_of(e.arg), diff_expr(e.arg, wrt, index))
    if isinstance(e, Exp):
        return mul(e, diff_expr(e.arg, wrt, index))
    if isinstance(e, Bracket):
        if wrt != "xi":
            return zero
        return mul(const(e.power), var_xi(index), bracket(e.power - 2.0))
    if isinstance(e, Glue):
        return mul(glue(e.arg, e.order + 1), diff_expr(e.arg, wrt, index))
    raise TypeError(f"unknown node {type(e).__name__}")


def _free_vars(e: SymbolExpr, acc: set, seen: set):
    if id(e) in seen:
        return
    seen.add(id(e))
    if isinstance(e, Var):
        acc.add((e.name, e.index))
    elif isinstance(e, Sum):
        for tm in e.terms:
            _free_vars(tm, acc, seen)
    elif isinstance(e, Prod):
        for f in e.factors:
            _free_vars(f, acc, seen)
    elif isinstance(e, Power):
        _free_vars(e.base, acc, seen)
    elif isinstance(e, (Sin, Cos, Exp, Glue)):
        _free_vars(e.arg, acc, seen)


def free_vars(e: SymbolExpr) -> set:
    acc: set = set()
    _free_vars(e, acc, set())
    return acc


# ---------------------------------------------------------------------------
# periodicity check: x may enter only through sin/cos (or exp with purely
# imaginary coefficients) of integer-linear arguments

def _int_linear_in_x(e: SymbolExpr, imaginary: bool) -> bool:
    """Terms with x must be c*x_i; c a real integer (sin/cos args) or a
    purely imaginary integer (exp args, where only e^{i k x} is periodic)."""

    def coeff_ok(c: complex) -> bool:
        if imaginary:
            return c.real == 0 and c.imag == int(c.imag)
        return c.imag == 0 and c.real == int(c.real)

    terms = e.terms if isinstance(e, Sum) else (e,)
    for tm in terms:
        names = {nm for nm, _ in free_vars(tm)}
        if "x" not in names:
            if not _periodic_in_x(tm):
                return False
            continue
        if isinstance(tm, Var):
            if not coeff_ok(1 + 0j):
                return False
            continue
        if isinstance(tm, Prod):
            xvars = [f for f in tm.factors if isinstance(f, Var) and f.name == "x"]
            others = [f for f in tm.factors if f not in xvars]
            if len(xvars) != 1 or not all(isinstance(f, Const) for f in others):
                return False
            c = 1 + 0j
            for f in others:
                c *= f.value
            if not coeff_ok(c):
                return False
        else:
            return False
    return True


_PERIODIC_CACHE: dict = {}


def _periodic_in_x(e: SymbolExpr) -> bool:
    # memoized by node identity: derivative trees are heavily shared DAGs
    got = _PERIODIC_CACHE.get(id(e))
    if got is not None:
        return got
    if isinstance(e, (Const, Bracket)):
        ok = True
    elif isinstance(e, Var):
        ok = e.name != "x"
    elif isinstance(e, Sum):
        ok = all(_periodic_in_x(tm) for tm in e.terms)
    elif isinstance(e, Prod):
        ok = all(_periodic_in_x(f) for f in e.factors)
    elif isinstance(e, Power):
        ok = _periodic_in_x(e.base)
    elif isinstance(e, (Sin, Cos)):
        ok = _int_linear_in_x(e.arg, imaginary=False) or _periodic_in_x(e.arg)
    elif isinstance(e, Exp):
        ok = _int_linear_in_x(e.arg, imaginary=True) or _periodic_in_x(e.arg)
    elif isinstance(e, Glue):
        ok = _periodic_in_x(e.arg)
    else:
        raise TypeError(f"unknown node {type(e).__name__}")
    _PERIODIC_CACHE[id(e)] = ok
    return ok


# ---------------------------------------------------------------------------
# grids

@dataclass(frozen=True)
class GridSpec:
    """Product grid: n_x points per spatial axis on [0, 2pi), integer
    frequency lattice |k_i| <= K, semiclassical parameter eps."""
    d: int
    n_x: int
    K: int
    eps: float

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be at least 1")
        if self.n_x < 2 or (self.n_x & (self.n_x - 1)) != 0:
            raise ValueError("n_x must be a power of two")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.n_x < 2 * self.K + 2:
            raise ValueError("need n_x >= 2K+2 to retain modes without aliasing")
        if not 0.0 < self.eps < 1.0:
            raise ValueError("eps must lie in (0,1)")

    @property
    def n_points(self) -> int:
        return self.n_x ** self.d

    @property
    def n_modes(self) -> int:
        return (2 * self.K + 1) ** self.d

    @property
    def h(self) -> float:
        return 2.0 * math.pi / self.n_x

    def axis_x(self) -> np.ndarray:
        return np.arange(self.n_x) * self.h

    def x_grid(self) -> np.ndarray:
        """Shape (d, n_x^d), row-major flattening of the product grid."""
        axes = np.meshgrid(*([self.axis_x()] * self.d), indexing="ij")
        return np.stack([a.ravel() for a in axes])

    def k_lattice(self, extend: int = 1) -> np.ndarray:
        """Shape (d, (2*extend*K+1)^d) integer lattice, ascending row-major."""
        r = np.arange(-extend * self.K, extend * self.K + 1)
        axes = np.meshgrid(*([r] * self.d), indexing="ij")
        return np.stack([a.ravel() for a in axes])

    def mode_index(self, k) -> int:
        """Flat index of lattice point k in k_lattice(1) ordering."""
        idx = 0
        for ki in np.atleast_1d(k):
            if abs(int(ki)) > self.K:
                raise ValueError("mode outside lattice")
            idx = idx * (2 * self.K + 1) + (int(ki) + self.K)
        return idx


# ---------------------------------------------------------------------------
# matrix symbols

def _as_expr_rows(entries) -> tuple:
    rows = []
    for row in entries:
        rows.append(tuple(_coerce(v) for v in row))
    rows = tuple(rows)
    n = len(rows)
    if n == 0 or any(len(r) != n for r in rows):
        raise ValueError("entries must form a square matrix")
    return rows


@dataclass(frozen=True)
class MatrixSymbol:
    """N x N matrix of expression trees with declared order m.

    Time dependence is through the external scalar t only; whether any
    entry references t is derived from the trees, not declared.
    """
    entries: tuple
    d: int = 1
    order: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "entries", _as_expr_rows(self.entries))
        if self.d < 1:
            raise ValueError("d must be at least 1")
        for row in self.entries:
            for e in row:
                for nm, idx in free_vars(e):
                    if nm in ("x", "xi") and idx >= self.d:
                        raise ValueError(
                            f"entry uses axis {idx + 1} but d = {self.d}")
                if not _periodic_in_x(e):
                    raise ValueError(
                        "entries must be 2pi-periodic in x: x may enter only "
                        "through sin/cos of integer multiples")

    @property
    def N(self) -> int:
        return len(self.entries)

    @property
    def time_dependent(self) -> bool:
        return any(("t", 0) in free_vars(e) for row in self.entries for e in row)

    def entry(self, i: int, j: int) -> SymbolExpr:
        return self.entries[i][j]

    # algebra: declared orders add under products, max under sums

    def __add__(self, other: "MatrixSymbol") -> "MatrixSymbol":
        if self.N != other.N or self.d != other.d:
            raise ValueError("shape mismatch")
        rows = tuple(tuple(a + b for a, b in zip(ra, rb))
                     for ra, rb in zip(self.entries, other.entries))
        return MatrixSymbol(rows, self.d, max(self.order, other.order))

    def __matmul__(self, other: "MatrixSymbol") -> "MatrixSymbol":
        if self.N != other.N or self.d != other.d:
            raise ValueError("shape mismatch")
        n = self.N
        rows = tuple(
            tuple(add(*[mul(self.entries[i][k], other.entries[k][j])
                        for k in range(n)])
                  for j in range(n))
            for i in range(n))
        return MatrixSymbol(rows, self.d, self.order + other.order)

    def scale(self, c) -> "MatrixSymbol":
        c = _coerce(c)
        rows = tuple(tuple(mul(c, e) for e in row) for row in self.entries)
        return MatrixSymbol(rows, self.d, self.order)

    def differentiate(self, alpha, beta, max_order: int = _DEFAULT_MAX_ORDER
                      ) -> "MatrixSymbol":
        return differentiate(self, alpha, beta, max_order=max_order)

    @staticmethod
    def identity(N: int, d: int = 1) -> "MatrixSymbol":
        rows = tuple(tuple(const(1 if i == j else 0) for j in range(N))
                     for i in range(N))
        return MatrixSymbol(rows, d, 0.0)

    @staticmethod
    def scalar(e, d: int = 1, order: float = 0.0) -> "MatrixSymbol":
        return MatrixSymbol(((_coerce(e),),), d, order)


@dataclass(frozen=True)
class SampledSymbol:
    """Evaluation table: values[j, k] is the N x N matrix at the j-th
    spatial grid point and k-th lattice point (row-major flat orders of
    GridSpec).  scaled marks semiclassical sampling at xi = eps*k."""
    values: np.ndarray
    order: float
    grid: GridSpec
    scaled: bool

    def __post_init__(self):
        g = self.grid
        want = (g.n_points, g.n_modes)
        v = np.asarray(self.values, dtype=complex)
        if v.ndim == 2:
            v = v[:, :, None, None]
        if v.shape[:2] != want or v.ndim != 4 or v.shape[2] != v.shape[3]:
            raise ValueError(f"values must have shape {want} x N x N")
        if not np.all(np.isfinite(v)):
            raise ValueError("sampled symbol has non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def N(self) -> int:
        return self.values.shape[2]


def _normalize_mi(mi, d: int) -> tuple:
    if isinstance(mi, (int, np.integer)):
        mi = (int(mi),)
    mi = tuple(int(v) for v in mi)
    if len(mi) > d:
        raise ValueError("multi-index longer than dimension")
    mi = mi + (0,) * (d - len(mi))
    if any(v < 0 for v in mi):
        raise ValueError("multi-index entries must be nonnegative")
    return mi


def multi_indices(d: int, max_total: int):
    """All d-tuples of nonnegative ints with sum <= max_total."""
    for total in range(max_total + 1):
        for mi in iproduct(range(total + 1), repeat=d):
            if sum(mi) == total:
                yield mi


def differentiate(s: MatrixSymbol, alpha, beta,
                  max_order: int = _DEFAULT_MAX_ORDER) -> MatrixSymbol:
    """Exact entrywise d_x^alpha d_xi^beta; declared order drops by |beta|."""
    alpha = _normalize_mi(alpha, s.d)
    beta = _normalize_mi(beta, s.d)
    total = sum(alpha) + sum(beta)
    if total > max_order:
        raise OrderExceededError(
            f"derivative order {total} exceeds cap {max_order}")

    def dd(e):
        for i, a in enumerate(alpha):
            for _ in range(a):
                e = diff_expr(e, "x", i)
        for i, b in enumerate(beta):
            for _ in range(b):
                e = diff_expr(e, "xi", i)
        return e

    rows = tuple(tuple(dd(e) for e in row) for row in s.entries)
    return MatrixSymbol(rows, s.d, s.order - sum(beta))


def sample(s: MatrixSymbol, g: GridSpec, scale_freq: bool,
           t: float = 0.0) -> SampledSymbol:
    """values[j, k] = s(x_j, eps*k) if scale_freq else s(x_j, k)."""
    if s.d != g.d:
        raise ValueError("symbol and grid dimensions differ")
    xg = g.x_grid()
    kg = g.k_lattice().astype(float)
    if scale_freq:
        kg = g.eps * kg
    x = [xg[i][:, None] for i in range(g.d)]
    xi = [kg[i][None, :] for i in range(g.d)]
    n = s.N
    out = np.zeros((g.n_points, g.n_modes, n, n), dtype=complex)
    memo: dict = {}
    for i in range(n):
        for j in range(n):
            out[:, :, i, j] = eval_expr(s.entry(i, j), x, xi, t, memo=memo)
    return SampledSymbol(out, s.order, g, scale_freq)


def _weighted_sup(s: MatrixSymbol, alpha, beta, x, xi, wk) -> float:
    """sup over the sample set of <xi>^(|beta|-m) |entry| for the given
    derivative, sharing one evaluation memo across entries."""
    memo: dict = {}
    best = 0.0
    for row in s.entries:
        for e in row:
            v = np.abs(eval_expr(e, x, xi, memo=memo))
            m = float(np.max(v * wk)) if v.size else 0.0
            best = max(best, m)
    return best


def symbol_norm(s: MatrixSymbol, r: int, g: GridSpec,
                max_order: int = _DEFAULT_MAX_ORDER) -> float:
    """Grid sup norm: max over |alpha|+|beta| <= r + 2(floor(d/2)+1) of
    <xi>^(|beta|-m) |d^alpha_x d^beta_xi s| over the x grid and the
    unscaled lattice extended to 4K (decay probe).  Exact derivatives."""
    rng = r + 2 * (g.d // 2 + 1)
    xg = g.x_grid()
    kg = g.k_lattice(extend=4).astype(float)
    x = [xg[i][:, None] for i in range(g.d)]
    xi = [kg[i][None, :] for i in range(g.d)]
    jap = (1.0 + np.sum(kg ** 2, axis=0))[None, :] ** 0.5
    best = 0.0
    for alpha in multi_indices(s.d, rng):
        for beta in multi_indices(s.d, rng - sum(alpha)):
            ds = differentiate(s, alpha, beta, max_order=max_order)
            wk = jap ** (sum(beta) - s.order)
            best = max(best, _weighted_sup(ds, alpha, beta, x, xi, wk))
    return best


@dataclass(frozen=True)
class ClassReport:
    """Per-derivative observed constants and lattice growth slopes."""
    order: float
    constants: dict
    slopes: dict
    failures: tuple
    passed: bool


def check_class(s: MatrixSymbol, m: float, r: int, g: GridSpec,
                max_order: int = _DEFAULT_MAX_ORDER,
                slope_tol: float = 0.1) -> ClassReport:
    """Check membership in the order-m class: for each derivative pair up
    to the norm range, record C_ab = sup <xi>^(|beta|-m) |d^a d^b s| and
    flag growth along the extended lattice (log-log slope > slope_tol)."""
    rng = r + 2 * (g.d // 2 + 1)
    xg = g.x_grid()
    kg = g.k_lattice(extend=4).astype(float)
    x = [xg[i][:, None] for i in range(g.d)]
    xi = [kg[i][None, :] for i in range(g.d)]
    jap = (1.0 + np.sum(kg ** 2, axis=0)) ** 0.5
    constants, slopes, failures = {}, {}, []
    for alpha in multi_indices(s.d, rng):
        for beta in multi_indices(s.d, rng - sum(alpha)):
            ds = differentiate(s, alpha, beta, max_order=max_order)
            memo: dict = {}
            prof = np.zeros(kg.shape[1])
            for row in ds.entries:
                for e in row:
                    v = np.abs(eval_expr(e, x, xi, memo=memo))
                    v = np.broadcast_to(v, (xg.shape[1], kg.shape[1]))
                    prof = np.maximum(prof, v.max(axis=0))
            prof = prof * jap ** (sum(beta) - m)
            key = (alpha, beta)
            constants[key] = float(prof.max())
            # max over japanese-bracket shells, then least squares in logs
            shells: dict = {}
            for jv, pv in zip(jap, prof):
                shells[jv] = max(shells.get(jv, 0.0), pv)
            pts = [(math.log(jv), math.log(pv)) for jv, pv in shells.items()
                   if pv > 1e-290 and jv > 1.0]
            if len(pts) >= 2:
                lx = np.array([p[0] for p in pts])
                ly = np.array([p[1] for p in pts])
                sl = float(np.polyfit(lx, ly, 1)[0])
            else:
                sl = 0.0
            slopes[key] = sl
            if sl > slope_tol:
                failures.append((alpha, beta, sl))
    return ClassReport(order=m, constants=constants, slopes=slopes,
                       failures=tuple(failures), passed=not failures)
