"""Text mini-language for symbols, with a canonical printer.

Expressions over x1..xd, xi1..xid, t, sin, cos, exp, bracket(s), i, pi,
numbers, + - * / ^int and parentheses; matrices as [[e, e], [e, e]].
glue(n, expr) exposes the smooth cutoff primitive (an extension token).

parse and print are mutually inverse on canonical forms: parse(print(e))
returns the identical interned node, and printing is deterministic.

Grammar (precedence climbing):
  expr   := term (('+' | '-') term)*
  term   := factor (('*' | '/') factor)*
  factor := '-' factor | power
  power  := atom ['^' ['-'] INT]
"""

from __future__ import annotations

import math
import re

from .symbols import (
    Bracket, Const, Cos, Exp, Glue, MatrixSymbol, Power, Prod, Sin, Sum, Var,
    add, bracket, const, cos_of, exp_of, glue, mul, pow_int, sin_of,
    var_t, var_x, var_xi,
)

__all__ = ["parse_expr", "print_expr", "parse_matrix", "print_matrix",
           "ParseError"]


class ParseError(ValueError):
    pass


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()\[\],]))")

_AXIS_RE = re.compile(r"^(xi|x)([0-9]+)$")


def _tokenize(text: str):
    toks, pos = [], 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            if text[pos:].strip() == "":
                break
            raise ParseError(f"bad character at position {pos}: {text[pos]!r}")
        pos = m.end()
        for kind in ("num", "name", "op"):
            if m.group(kind) is not None:
                toks.append((kind, m.group(kind)))
                break
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.pos = 0

    def peek(self):
        return self.toks[self.pos] if self.pos < len(self.toks) else (None, None)

    def next(self):
        tok = self.peek()
        self.pos += 1
        return tok

    def expect(self, text: str):
        kind, got = self.next()
        if got != text:
            raise ParseError(f"expected {text!r}, got {got!r}")

    def at_end(self) -> bool:
        return self.pos >= len(self.toks)

    # precedence levels

    def expr(self):
        e = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.next()[1]
            rhs = self.term()
            e = add(e, rhs) if op == "+" else add(e, mul(const(-1), rhs))
        return e

    def term(self):
        e = self.factor()
        while self.peek()[1] in ("*", "/"):
            op = self.next()[1]
            rhs = self.factor()
            e = mul(e, rhs) if op == "*" else mul(e, pow_int(rhs, -1))
        return e

    def factor(self):
        if self.peek()[1] == "-":
            self.next()
            return mul(const(-1), self.factor())
        return self.power()

    def power(self):
        e = self.atom()
        if self.peek()[1] == "^":
            self.next()
            neg = False
            if self.peek()[1] == "-":
                self.next()
                neg = True
            n = self.integer()
            e = pow_int(e, -n if neg else n)
        return e

    def integer(self) -> int:
        kind, text = self.next()
        if kind != "num":
            raise ParseError(f"expected integer, got {text!r}")
        v = float(text)
        if v != int(v):
            raise ParseError(f"expected integer, got {text!r}")
        return int(v)

    def atom(self):
        kind, text = self.next()
        if kind == "num":
            return const(float(text))
        if kind == "op" and text == "(":
            e = self.expr()
            self.expect(")")
            return e
        if kind != "name":
            raise ParseError(f"unexpected token {text!r}")
        if text == "i":
            return const(1j)
        if text == "pi":
            return const(math.pi)
        if text == "t":
            return var_t()
        m = _AXIS_RE.match(text)
        if m:
            idx = int(m.group(2))
            if idx < 1:
                raise ParseError("axis indices are 1-based")
            return var_xi(idx - 1) if m.group(1) == "xi" else var_x(idx - 1)
        if text in ("x", "xi"):
            raise ParseError(f"axis index required, e.g. {text}1")
        if text in ("sin", "cos", "exp"):
            self.expect("(")
            arg = self.expr()
            self.expect(")")
            return {"sin": sin_of, "cos": cos_of, "exp": exp_of}[text](arg)
        if text == "bracket":
            self.expect("(")
            arg = self.expr()
            self.expect(")")
            if not (isinstance(arg, Const) and arg.value.imag == 0):
                raise ParseError("bracket takes a real constant exponent")
            return bracket(arg.value.real)
        if text == "glue":
            self.expect("(")
            n = self.integer()
            self.expect(",")
            arg = self.expr()
            self.expect(")")
            return glue(arg, n)
        raise ParseError(f"unknown name {text!r}")


def parse_expr(text: str):
    p = _Parser(text)
    e = p.expr()
    if not p.at_end():
        raise ParseError(f"trailing input at token {p.peek()[1]!r}")
    return e


def parse_matrix(text: str):
    """[[expr, ...], ...] -> tuple of tuples of SymbolExpr (square checked
    by MatrixSymbol).  A bare expression parses as a 1x1 matrix."""
    p = _Parser(text)
    if p.peek()[1] != "[":
        e = p.expr()
        if not p.at_end():
            raise ParseError(f"trailing input at token {p.peek()[1]!r}")
        return ((e,),)
    p.expect("[")
    rows = []
    while True:
        p.expect("[")
        row = [p.expr()]
        while p.peek()[1] == ",":
            p.next()
            row.append(p.expr())
        p.expect("]")
        rows.append(tuple(row))
        if p.peek()[1] == ",":
            p.next()
            continue
        break
    p.expect("]")
    if not p.at_end():
        raise ParseError(f"trailing input at token {p.peek()[1]!r}")
    return tuple(rows)


# ---------------------------------------------------------------------------
# canonical printer

_PREC_SUM, _PREC_PROD, _PREC_POW, _PREC_ATOM = 10, 20, 30, 40


def _print_real(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def _print_const(c: complex) -> tuple:
    re_, im = c.real, c.imag
    if im == 0:
        return _print_real(re_), _PREC_ATOM
    if re_ == 0:
        if im == 1:
            return "i", _PREC_ATOM
        if im == -1:
            return "-i", _PREC_PROD
        return f"{_print_real(im)}*i", _PREC_PROD
    ims = "i" if abs(im) == 1 else f"{_print_real(abs(im))}*i"
    sign = "+" if im > 0 else "-"
    return f"({_print_real(re_)} {sign} {ims})", _PREC_ATOM


def _render(e) -> tuple:
    if isinstance(e, Const):
        return _print_const(e.value)
    if isinstance(e, Var):
        if e.name == "t":
            return "t", _PREC_ATOM
        return f"{e.name}{e.index + 1}", _PREC_ATOM
    if isinstance(e, Sum):
        parts = [_pp(tm, _PREC_SUM) for tm in e.terms]
        out = parts[0]
        for p in parts[1:]:
            out += f" - {p[1:]}" if p.startswith("-") else f" + {p}"
        return out, _PREC_SUM
    if isinstance(e, Prod):
        fs = e.factors
        lead = ""
        if isinstance(fs[0], Const) and fs[0].value == -1:
            lead, fs = "-", fs[1:]
        out = lead + "*".join(_pp(f, _PREC_PROD + 1) for f in fs)
        return out, _PREC_PROD
    if isinstance(e, Power):
        return f"{_pp(e.base, _PREC_POW + 1)}^{e.exponent}", _PREC_POW
    if isinstance(e, Sin):
        return f"sin({_pp(e.arg, 0)})", _PREC_ATOM
    if isinstance(e, Cos):
        return f"cos({_pp(e.arg, 0)})", _PREC_ATOM
    if isinstance(e, Exp):
        return f"exp({_pp(e.arg, 0)})", _PREC_ATOM
    if isinstance(e, Bracket):
        return f"bracket({_print_real(e.power)})", _PREC_ATOM
    if isinstance(e, Glue):
        return f"glue({e.order}, {_pp(e.arg, 0)})", _PREC_ATOM
    raise TypeError(f"unknown node {type(e).__name__}")


def _pp(e, ctx: int) -> str:
    s, prec = _render(e)
    return f"({s})" if prec < ctx else s


def print_expr(e) -> str:
    return _pp(e, 0)


def print_matrix(m) -> str:
    rows = m.entries if isinstance(m, MatrixSymbol) else m
    inner = ", ".join(
        "[" + ", ".join(print_expr(e) for e in row) + "]" for row in rows)
    return f"[{inner}]"
