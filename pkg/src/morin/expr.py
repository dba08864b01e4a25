"""Symbolic expressions over a fixed slate of variables.

Small exact-arithmetic expression kernel used by the rest of the package:
rational constants, the four arithmetic operations, nonnegative integer
powers, and a handful of analytic functions (sqrt, sin, cos, exp, log).
It provides parsing, structural simplification, differentiation, batched
numeric evaluation over numpy point arrays, and determinants of symbolic
matrices.

Expression trees are immutable. Three properties are load-bearing for the
callers and are covered by the test suite:

* ``simplify`` is idempotent, never increases the node count, and preserves
  values (up to roundoff) wherever the expression is defined;
* structural hashing uses integer tuples only, so hashes and all derived
  orderings are identical across processes;
* every constructor enforces a global node budget (``NODE_CAP``) so runaway
  symbolic growth raises :class:`ExpressionTooLarge` instead of hanging.
"""

from __future__ import annotations

import math
from fractions import Fraction
from functools import cmp_to_key
from typing import Iterable, Sequence

import numpy as np

NODE_CAP = 200_000

_FUNCTIONS = ("sqrt", "sin", "cos", "exp", "log")

# Stable small integer per node kind; feeds hashes and canonical ordering.
_UNARY_CODE = {"neg": 2, "sqrt": 3, "sin": 4, "cos": 5, "exp": 6, "log": 7}
_BINARY_CODE = {"add": 8, "sub": 9, "mul": 10, "div": 11}


class ExpressionTooLarge(Exception):
    """Raised when an expression would exceed ``NODE_CAP`` nodes."""


class EvalDomainError(ArithmeticError):
    """Raised by strict evaluation on division by zero, sqrt of a negative
    value, or log of a nonpositive value."""


class ParseError(ValueError):
    """Syntax error with a character offset into the source text."""

    def __init__(self, message: str, position: int):
        super().__init__(f"at offset {position}: {message}")
        self.position = position


class Expr:
    """Base class for expression nodes. Instances are immutable."""

    __slots__ = ("node_count", "_hash", "_ordkey", "_simplified", "_deriv")

    def _init_node(self, count: int) -> None:
        if count > NODE_CAP:
            raise ExpressionTooLarge(
                f"expression would have {count} nodes (budget {NODE_CAP})"
            )
        self.node_count = count
        self._simplified = None
        self._deriv = None

    def _kids(self) -> tuple:
        return ()

    def _scalar(self):
        return 0

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other) -> bool:
        if self is other:
            return True
        if not isinstance(other, Expr):
            return NotImplemented
        if self._hash != other._hash or self.node_count != other.node_count:
            return False
        stack = [(self, other)]
        while stack:
            a, b = stack.pop()
            if a is b:
                continue
            if a.__class__ is not b.__class__ or a._scalar() != b._scalar():
                return False
            stack.extend(zip(a._kids(), b._kids()))
        return True

    def __repr__(self) -> str:
        if self.node_count <= 60:
            return f"Expr<{format_expr(self)}>"
        return f"Expr<{self.node_count} nodes>"


class Const(Expr):
    """Exact rational constant.

    Accepts int, Fraction, or float; floats are converted exactly, so the
    tree never holds inexact values and formatting stays deterministic.
    """

    __slots__ = ("value",)

    def __init__(self, value):
        if isinstance(value, float) and not math.isfinite(value):
            raise ValueError("constant must be finite")
        v = value if isinstance(value, Fraction) else Fraction(value)
        self.value = v
        self._hash = hash((0, v.numerator, v.denominator))
        self._ordkey = 99  # constants sort last among siblings
        self._init_node(1)

    def _scalar(self):
        return (self.value.numerator, self.value.denominator)


class Var(Expr):
    """Variable identified by its column index into a point array."""

    __slots__ = ("index",)

    def __init__(self, index: int):
        if not isinstance(index, int) or index < 0:
            raise ValueError("variable index must be a nonnegative integer")
        self.index = index
        self._hash = hash((1, index))
        self._ordkey = 1
        self._init_node(1)

    def _scalar(self):
        return self.index


class Unary(Expr):
    """Negation or one of the supported functions applied to a child."""

    __slots__ = ("op", "child")

    def __init__(self, op: str, child: Expr):
        code = _UNARY_CODE.get(op)
        if code is None:
            raise ValueError(f"unknown unary operation {op!r}")
        self.op = op
        self.child = child
        self._hash = hash((code, child._hash))
        self._ordkey = code
        self._init_node(1 + child.node_count)

    def _kids(self):
        return (self.child,)


class Binary(Expr):
    """One of ``add``, ``sub``, ``mul``, ``div`` on two children."""

    __slots__ = ("op", "left", "right")

    def __init__(self, op: str, left: Expr, right: Expr):
        code = _BINARY_CODE.get(op)
        if code is None:
            raise ValueError(f"unknown binary operation {op!r}")
        self.op = op
        self.left = left
        self.right = right
        self._hash = hash((code, left._hash, right._hash))
        self._ordkey = code
        self._init_node(1 + left.node_count + right.node_count)

    def _kids(self):
        return (self.left, self.right)


class Pow(Expr):
    """Integer power with a nonnegative exponent stored outside the tree."""

    __slots__ = ("base", "exponent")

    def __init__(self, base: Expr, exponent: int):
        if not isinstance(exponent, int) or isinstance(exponent, bool) or exponent < 0:
            raise ValueError("exponent must be a nonnegative integer")
        self.base = base
        self.exponent = exponent
        self._hash = hash((12, exponent, base._hash))
        self._ordkey = 12
        self._init_node(1 + base.node_count)

    def _kids(self):
        return (self.base,)

    def _scalar(self):
        return self.exponent


_ZERO = Const(0)
_ONE = Const(1)


# ---------------------------------------------------------------------------
# Construction helpers. These fold only trivial identities (0, 1, constant
# arithmetic), which keeps differentiation output compact without doing the
# work of full simplification.

def const(value) -> Const:
    return Const(value)


def var(index: int) -> Var:
    return Var(index)


def _is_const(e: Expr, value=None) -> bool:
    return isinstance(e, Const) and (value is None or e.value == value)


def add(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0):
        return b
    if _is_const(b, 0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    return Binary("add", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 0):
        return a
    if _is_const(a, 0):
        return neg(b)
    if a is b:
        return _ZERO
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    return Binary("sub", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0) or _is_const(b, 0):
        return _ZERO
    if _is_const(a, 1):
        return b
    if _is_const(b, 1):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    return Binary("mul", a, b)


def div(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 1):
        return a
    if _is_const(b, 0):
        return Binary("div", a, b)  # division by a zero constant never folds
    if _is_const(a, 0):
        return _ZERO
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value / b.value)
    return Binary("div", a, b)


def neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Unary) and a.op == "neg":
        return a.child
    return Unary("neg", a)


def power(base: Expr, exponent: int) -> Expr:
    if not isinstance(exponent, int) or exponent < 0:
        raise ValueError("exponent must be a nonnegative integer")
    if exponent == 0:
        return _ONE
    if exponent == 1:
        return base
    if isinstance(base, Const):
        return Const(base.value ** exponent)
    return Pow(base, exponent)


def fn(name: str, child: Expr) -> Expr:
    if name not in _FUNCTIONS:
        raise ValueError(f"unknown function {name!r}")
    return Unary(name, child)


# ---------------------------------------------------------------------------
# Canonical ordering. Total order on trees: kind code, then scalar payload,
# then children left to right. Uses only integers and Fractions, so the
# order is identical in every process.

def _cmp(a: Expr, b: Expr) -> int:
    stack = [(a, b)]
    while stack:
        x, y = stack.pop()
        if x is y:
            continue
        if x._ordkey != y._ordkey:
            return -1 if x._ordkey < y._ordkey else 1
        sx, sy = x._scalar(), y._scalar()
        if sx != sy:
            return -1 if sx < sy else 1
        stack.extend(reversed(list(zip(x._kids(), y._kids()))))
    return 0


_cmp_key = cmp_to_key(_cmp)


# ---------------------------------------------------------------------------
# Parsing.
#
#   expr   := term (("+" | "-") term)*
#   term   := factor (("*" | "/") factor)*
#   factor := base ("^" unsigned-integer)?
#   base   := number | identifier | function "(" expr ")" | "(" expr ")"
#           | "-" base
#
# Note the last production: a leading minus binds to the base, so "-x^2"
# parses as (-x)^2. Numbers are unsigned decimals; "p/q" comes out of the
# grammar as a division and folds to an exact rational in simplify().

def _tokenize(text: str) -> list:
    toks = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch in " \t\r\n":
            i += 1
            continue
        if ch.isdigit():
            j = i + 1
            while j < n and text[j].isdigit():
                j += 1
            if j < n and text[j] == ".":
                j += 1
                if j >= n or not text[j].isdigit():
                    raise ParseError("expected digits after decimal point", j)
                while j < n and text[j].isdigit():
                    j += 1
            toks.append(("num", text[i:j], i))
            i = j
        elif ch.isalpha() or ch == "_":
            j = i + 1
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            toks.append(("name", text[i:j], i))
            i = j
        elif ch in "+-*/^()":
            toks.append((ch, ch, i))
            i += 1
        else:
            raise ParseError(f"unexpected character {ch!r}", i)
    toks.append(("end", "", n))
    return toks


def parse(text: str, var_names: Sequence[str] = ()) -> Expr:
    """Parse ``text`` into an expression tree.

    Parameters
    ----------
    text : str
        Source in the grammar above.
    var_names : sequence of str
        Allowed identifiers; identifier k maps to variable index k.
        Function names are reserved and cannot be used as variables.

    Raises
    ------
    ParseError
        On any syntax error or unknown identifier, with ``position`` set
        to the character offset.
    """
    index_of = {}
    for k, name in enumerate(var_names):
        if name in _FUNCTIONS:
            raise ValueError(f"variable name {name!r} shadows a function")
        if name in index_of:
            raise ValueError(f"duplicate variable name {name!r}")
        index_of[name] = k

    toks = _tokenize(text)
    cur = [0]

    def peek():
        return toks[cur[0]]

    def advance():
        t = toks[cur[0]]
        cur[0] += 1
        return t

    def p_expr():
        node = p_term()
        while peek()[0] in ("+", "-"):
            op = advance()[0]
            node = Binary("add" if op == "+" else "sub", node, p_term())
        return node

    def p_term():
        node = p_factor()
        while peek()[0] in ("*", "/"):
            op = advance()[0]
            node = Binary("mul" if op == "*" else "div", node, p_factor())
        return node

    def p_factor():
        node = p_base()
        if peek()[0] == "^":
            advance()
            kind, text_, pos = peek()
            if kind != "num" or not text_.isdigit():
                raise ParseError("exponent must be an unsigned integer", pos)
            advance()
            node = Pow(node, int(text_))
        return node

    def p_base():
        kind, text_, pos = peek()
        if kind == "num":
            advance()
            return Const(Fraction(text_))
        if kind == "name":
            advance()
            if text_ in _FUNCTIONS:
                if peek()[0] != "(":
                    raise ParseError(
                        f"function {text_!r} requires a parenthesized argument",
                        peek()[2],
                    )
                advance()
                inner = p_expr()
                if peek()[0] != ")":
                    raise ParseError("expected ')'", peek()[2])
                advance()
                return Unary(text_, inner)
            if text_ in index_of:
                return Var(index_of[text_])
            raise ParseError(f"unknown identifier {text_!r}", pos)
        if kind == "(":
            advance()
            inner = p_expr()
            if peek()[0] != ")":
                raise ParseError("expected ')'", peek()[2])
            advance()
            return inner
        if kind == "-":
            advance()
            return Unary("neg", p_base())
        raise ParseError("expected a number, identifier, or '('", pos)

    node = p_expr()
    if peek()[0] != "end":
        raise ParseError("unexpected trailing input", peek()[2])
    return node


# ---------------------------------------------------------------------------
# Formatting. Output reparses to an expression with identical values whose
# simplification equals that of the original (exact structural round-trips
# are impossible because the grammar has no negative or fractional literals).

def _prec(n: Expr) -> int:
    if isinstance(n, Const):
        if n.value.denominator != 1:
            return 2
        return 3 if n.value < 0 else 5
    if isinstance(n, Var):
        return 5
    if isinstance(n, Pow):
        return 4
    if isinstance(n, Unary):
        return 3 if n.op == "neg" else 5
    return 1 if n.op in ("add", "sub") else 2


def format_expr(e: Expr, var_names: Sequence[str] | None = None) -> str:
    """Render ``e`` as parseable text with minimal parentheses."""

    def name_of(i: int) -> str:
        if var_names is not None and i < len(var_names):
            return var_names[i]
        return f"x{i + 1}"

    def wrap(child: Expr, min_prec: int) -> str:
        s = strs[id(child)]
        return s if _prec(child) >= min_prec else f"({s})"

    strs: dict = {}
    stack = [(e, False)]
    while stack:
        n, expanded = stack.pop()
        if id(n) in strs:
            continue
        if not expanded:
            stack.append((n, True))
            for k in n._kids():
                stack.append((k, False))
            continue
        if isinstance(n, Const):
            v = n.value
            s = str(v.numerator) if v.denominator == 1 else f"{v.numerator}/{v.denominator}"
        elif isinstance(n, Var):
            s = name_of(n.index)
        elif isinstance(n, Pow):
            base = strs[id(n.base)]
            if _prec(n.base) not in (3, 5):
                base = f"({base})"
            s = f"{base}^{n.exponent}"
        elif isinstance(n, Unary):
            if n.op == "neg":
                # A power child must be parenthesized: "-u^2" would reparse
                # as (-u)^2 because the minus binds to the base.
                if isinstance(n.child, Pow):
                    s = f"-({strs[id(n.child)]})"
                else:
                    s = "-" + wrap(n.child, 3)
            else:
                s = f"{n.op}({strs[id(n.child)]})"
        else:
            sym = {"add": "+", "sub": "-", "mul": "*", "div": "/"}[n.op]
            lmin = 1 if n.op in ("add", "sub") else 2
            rmin = lmin + 1
            s = f"{wrap(n.left, lmin)} {sym} {wrap(n.right, rmin)}"
        strs[id(n)] = s
    return strs[id(e)]


# ---------------------------------------------------------------------------
# Simplification.
#
# Strategy: canonicalize maximal sum chains (add/sub/neg) by collecting
# structurally equal terms with exact rational coefficients, and maximal
# product chains (mul/div) by merging factor powers and folding constants.
# Products of sums are never expanded, so the result cannot blow up; if a
# canonical rebuild would exceed the size of the original chain with
# simplified leaves, the original shape is kept instead.

class _OpaqueDiv(Exception):
    """Internal: a division by a literal zero was met during factoring."""


def _sum_leaves(root: Expr, memo: dict) -> tuple:
    """Flatten the add/sub/neg chain at ``root`` to (sign, leaf) pairs."""
    out = []
    ops = 0
    stack = [(root, 1)]
    while stack:
        n, s = stack.pop()
        if n is not root and id(n) in memo:
            out.append((s, n))
        elif isinstance(n, Binary) and n.op in ("add", "sub"):
            ops += 1
            stack.append((n.right, -s if n.op == "sub" else s))
            stack.append((n.left, s))
        elif isinstance(n, Unary) and n.op == "neg":
            ops += 1
            stack.append((n.child, -s))
        else:
            out.append((s, n))
    return out, ops


def _prod_leaves(root: Expr, memo: dict) -> tuple:
    """Flatten the mul/div chain at ``root`` to (direction, leaf) pairs."""
    out = []
    ops = 0
    stack = [(root, 1)]
    while stack:
        n, d = stack.pop()
        if n is not root and id(n) in memo:
            out.append((d, n))
        elif isinstance(n, Binary) and n.op in ("mul", "div"):
            ops += 1
            stack.append((n.right, -d if n.op == "div" else d))
            stack.append((n.left, d))
        else:
            out.append((d, n))
    return out, ops


def _terms_of(canon: Expr) -> list:
    """Split an already-canonical expression into (sign, term) pairs."""
    out = []
    stack = [(canon, 1)]
    while stack:
        n, s = stack.pop()
        if isinstance(n, Binary) and n.op in ("add", "sub"):
            stack.append((n.right, -s if n.op == "sub" else s))
            stack.append((n.left, s))
        elif isinstance(n, Unary) and n.op == "neg":
            stack.append((n.child, -s))
        elif _is_const(n, 0):
            continue
        else:
            out.append((s, n))
    return out


def _peel(t: Expr) -> tuple:
    """Factor a canonical non-sum term into (coeff, numerator, denominator).

    The factor lists are tuples of (base, exponent) sorted canonically.
    Raises _OpaqueDiv when the term divides by a literal zero.
    """
    coeff = Fraction(1)
    nets: dict = {}
    stack = [(t, 1)]
    while stack:
        n, d = stack.pop()
        if isinstance(n, Binary) and n.op == "mul":
            stack.append((n.right, d))
            stack.append((n.left, d))
        elif isinstance(n, Binary) and n.op == "div":
            if _is_const(n.right, 0):
                raise _OpaqueDiv
            stack.append((n.right, -d))
            stack.append((n.left, d))
        elif isinstance(n, Unary) and n.op == "neg":
            coeff = -coeff
            stack.append((n.child, d))
        elif isinstance(n, Const):
            if n.value == 0:
                if d < 0:
                    raise _OpaqueDiv
                return Fraction(0), (), ()
            coeff = coeff * n.value if d > 0 else coeff / n.value
        elif isinstance(n, Pow):
            nets[n.base] = nets.get(n.base, 0) + d * n.exponent
        else:
            nets[n] = nets.get(n, 0) + d
    fkey = cmp_to_key(lambda p, q: _cmp(p[0], q[0]))
    num = tuple(sorted(((b, e) for b, e in nets.items() if e > 0), key=fkey))
    den = tuple(sorted(((b, -e) for b, e in nets.items() if e < 0), key=fkey))
    return coeff, num, den


def _balanced(op: str, items: list) -> Expr:
    """Combine items pairwise into a balanced tree to keep the depth low."""
    while len(items) > 1:
        paired = [
            Binary(op, items[i], items[i + 1]) for i in range(0, len(items) - 1, 2)
        ]
        if len(items) % 2:
            paired.append(items[-1])
        items = paired
    return items[0]


def _rebuild_term(cabs: Fraction, num: tuple, den: tuple) -> Expr:
    nf = [b if e == 1 else Pow(b, e) for b, e in num]
    df = [b if e == 1 else Pow(b, e) for b, e in den]
    if nf:
        top = _balanced("mul", nf)
        if cabs != 1:
            top = Binary("mul", Const(cabs), top)
    else:
        top = Const(cabs)
    if df:
        return Binary("div", top, _balanced("mul", df))
    return top


def _rebuild_chain(root: Expr, memo: dict, prod: bool) -> Expr:
    """Reproduce the chain at ``root`` with simplified leaves substituted."""

    def is_chain(n: Expr) -> bool:
        if n is not root and id(n) in memo:
            return False
        if prod:
            return isinstance(n, Binary) and n.op in ("mul", "div")
        return (isinstance(n, Binary) and n.op in ("add", "sub")) or (
            isinstance(n, Unary) and n.op == "neg"
        )

    done: dict = {}
    stack = [(root, False)]
    while stack:
        n, expanded = stack.pop()
        if id(n) in done:
            continue
        if not is_chain(n):
            done[id(n)] = memo[id(n)]
            continue
        if not expanded:
            stack.append((n, True))
            for k in n._kids():
                stack.append((k, False))
        else:
            ks = [done[id(k)] for k in n._kids()]
            if isinstance(n, Binary):
                done[id(n)] = Binary(n.op, ks[0], ks[1])
            else:
                done[id(n)] = Unary("neg", ks[0])
    return done[id(root)]


def _build_sum(node: Expr, leaves: list, ops: int, memo: dict) -> Expr:
    acc: dict = {}
    parts: dict = {}
    for sign, leaf in leaves:
        for s2, t in _terms_of(memo[id(leaf)]):
            try:
                c, num, den = _peel(t)
            except _OpaqueDiv:
                c, num, den = Fraction(1), ((t, 1),), ()
            c *= sign * s2
            if c == 0:
                continue
            key = (num, den)
            acc[key] = acc.get(key, Fraction(0)) + c
            parts[key] = (num, den)
    entries = [(c, *parts[k]) for k, c in acc.items() if c != 0]
    if not entries:
        res = _ZERO
    else:
        built = [(c > 0, _rebuild_term(abs(c), num, den)) for c, num, den in entries]
        built.sort(key=cmp_to_key(lambda p, q: _cmp(p[1], q[1])))
        pos = [e for positive, e in built if positive]
        negs = [e for positive, e in built if not positive]
        if pos and negs:
            res = Binary("sub", _balanced("add", pos), _balanced("add", negs))
        elif pos:
            res = _balanced("add", pos)
        elif len(negs) == 1 and isinstance(negs[0], Const):
            res = Const(-negs[0].value)
        else:
            res = Unary("neg", _balanced("add", negs))
    naive = ops + sum(memo[id(leaf)].node_count for _, leaf in leaves)
    if res.node_count > naive:
        res = _rebuild_chain(node, memo, prod=False)
    return res


def _build_prod(node: Expr, leaves: list, ops: int, memo: dict) -> Expr:
    coeff = Fraction(1)
    nets: dict = {}
    bail = False
    for d, leaf in leaves:
        canon = memo[id(leaf)]
        if d < 0 and _is_const(canon, 0):
            bail = True
            break
        try:
            c, num, den = _peel(canon)
        except _OpaqueDiv:
            c, num, den = Fraction(1), ((canon, 1),), ()
        if d < 0 and c == 0:
            bail = True
            break
        if d > 0:
            coeff *= c
            for b, e in num:
                nets[b] = nets.get(b, 0) + e
            for b, e in den:
                nets[b] = nets.get(b, 0) - e
        else:
            coeff /= c
            for b, e in num:
                nets[b] = nets.get(b, 0) - e
            for b, e in den:
                nets[b] = nets.get(b, 0) + e
    if bail:
        return _rebuild_chain(node, memo, prod=True)
    if coeff == 0:
        return _ZERO
    fkey = cmp_to_key(lambda p, q: _cmp(p[0], q[0]))
    num = tuple(sorted(((b, e) for b, e in nets.items() if e > 0), key=fkey))
    den = tuple(sorted(((b, -e) for b, e in nets.items() if e < 0), key=fkey))
    core = _rebuild_term(abs(coeff), num, den)
    if coeff < 0:
        res = Const(coeff) if isinstance(core, Const) else Unary("neg", core)
    else:
        res = core
    naive = ops + sum(memo[id(leaf)].node_count for _, leaf in leaves)
    if res.node_count > naive:
        res = _rebuild_chain(node, memo, prod=True)
    return res


def _build_pow(node: Pow, memo: dict) -> Expr:
    base = memo[id(node.base)]
    e = node.exponent
    if e == 0:
        return _ONE
    if isinstance(base, Const):
        return Const(base.value ** e)
    if e == 1:
        return base
    if isinstance(base, Pow):
        return Pow(base.base, base.exponent * e)
    if isinstance(base, Unary) and base.op == "neg":
        inner = Pow(base.child, e)
        return inner if e % 2 == 0 else Unary("neg", inner)
    return Pow(base, e)


def _build_fn(node: Unary, memo: dict) -> Expr:
    child = memo[id(node.child)]
    if isinstance(child, Const):
        v = child.value
        if node.op == "sqrt" and v >= 0:
            rn, rd = math.isqrt(v.numerator), math.isqrt(v.denominator)
            if rn * rn == v.numerator and rd * rd == v.denominator:
                return Const(Fraction(rn, rd))
        elif node.op == "sin" and v == 0:
            return _ZERO
        elif node.op == "cos" and v == 0:
            return _ONE
        elif node.op == "exp" and v == 0:
            return _ONE
        elif node.op == "log" and v == 1:
            return _ZERO
    return Unary(node.op, child)


def _is_sum_kind(n: Expr) -> bool:
    return (isinstance(n, Binary) and n.op in ("add", "sub")) or (
        isinstance(n, Unary) and n.op == "neg"
    )


def _is_prod_kind(n: Expr) -> bool:
    return isinstance(n, Binary) and n.op in ("mul", "div")


def simplify(e: Expr) -> Expr:
    """Return the canonical form of ``e``.

    The result is a fixed point of ``simplify``, has at most as many nodes
    as ``e``, and evaluates to the same values wherever ``e`` is defined.
    """
    if e._simplified is not None:
        return e._simplified
    memo: dict = {}
    stack: list = [("visit", e, None)]
    while stack:
        tag, node, payload = stack.pop()
        if tag == "visit":
            if id(node) in memo:
                continue
            if node._simplified is not None:
                memo[id(node)] = node._simplified
                continue
            if isinstance(node, (Const, Var)):
                memo[id(node)] = node
            elif _is_sum_kind(node):
                leaves, ops = _sum_leaves(node, memo)
                pending = {id(n): n for _, n in leaves if id(n) not in memo}
                stack.append(("sum", node, (leaves, ops)))
                for n in pending.values():
                    stack.append(("visit", n, None))
            elif _is_prod_kind(node):
                leaves, ops = _prod_leaves(node, memo)
                pending = {id(n): n for _, n in leaves if id(n) not in memo}
                stack.append(("prod", node, (leaves, ops)))
                for n in pending.values():
                    stack.append(("visit", n, None))
            elif isinstance(node, Pow):
                stack.append(("pow", node, None))
                stack.append(("visit", node.base, None))
            else:
                stack.append(("fn", node, None))
                stack.append(("visit", node.child, None))
            continue
        if tag == "sum":
            leaves, ops = payload
            res = _build_sum(node, leaves, ops, memo)
        elif tag == "prod":
            leaves, ops = payload
            res = _build_prod(node, leaves, ops, memo)
        elif tag == "pow":
            res = _build_pow(node, memo)
        else:
            res = _build_fn(node, memo)
        memo[id(node)] = res
        node._simplified = res
        res._simplified = res
    return memo[id(e)]


# ---------------------------------------------------------------------------
# Differentiation. Derivatives are cached per (node, variable); repeated
# Jacobian construction over the same system reuses subtrees, which also
# makes batched evaluation deduplicate the shared work.

def differentiate(e: Expr, var_index: int) -> Expr:
    """Partial derivative of ``e`` with respect to variable ``var_index``.

    The result is built with the light folding of the construction helpers;
    callers that need a canonical form should ``simplify`` it.
    """
    if e._deriv is not None and var_index in e._deriv:
        return e._deriv[var_index]
    order = []
    seen = set()
    stack = [(e, False)]
    while stack:
        n, expanded = stack.pop()
        if expanded:
            order.append(n)
            continue
        if id(n) in seen or (n._deriv is not None and var_index in n._deriv):
            continue
        seen.add(id(n))
        stack.append((n, True))
        for k in n._kids():
            stack.append((k, False))
    for n in order:
        d = _diff_node(n, var_index)
        if n._deriv is None:
            n._deriv = {}
        n._deriv[var_index] = d
    return e._deriv[var_index]


def _diff_node(n: Expr, v: int) -> Expr:
    if isinstance(n, Const):
        return _ZERO
    if isinstance(n, Var):
        return _ONE if n.index == v else _ZERO
    if isinstance(n, Pow):
        db = n.base._deriv[v]
        return mul(mul(Const(n.exponent), power(n.base, n.exponent - 1)), db)
    if isinstance(n, Unary):
        dc = n.child._deriv[v]
        if n.op == "neg":
            return neg(dc)
        if n.op == "sqrt":
            return div(dc, mul(Const(2), n))
        if n.op == "sin":
            return mul(Unary("cos", n.child), dc)
        if n.op == "cos":
            return neg(mul(Unary("sin", n.child), dc))
        if n.op == "exp":
            return mul(n, dc)
        return div(dc, n.child)  # log
    dl, dr = n.left._deriv[v], n.right._deriv[v]
    if n.op == "add":
        return add(dl, dr)
    if n.op == "sub":
        return sub(dl, dr)
    if n.op == "mul":
        return add(mul(dl, n.right), mul(n.left, dr))
    num = sub(mul(dl, n.right), mul(n.left, dr))
    return div(num, power(n.right, 2))


# ---------------------------------------------------------------------------
# Evaluation.

def _postorder(roots: Iterable[Expr]) -> list:
    order = []
    seen = set()
    stack = [(r, False) for r in reversed(list(roots))]
    while stack:
        n, expanded = stack.pop()
        if expanded:
            order.append(n)
            continue
        if id(n) in seen:
            continue
        seen.add(id(n))
        stack.append((n, True))
        for k in n._kids():
            stack.append((k, False))
    return order


def variables_used(e: Expr) -> set:
    """Indices of all variables occurring in ``e``."""
    return {n.index for n in _postorder([e]) if isinstance(n, Var)}


def eval_block(exprs: Sequence[Expr], points, strict: bool = False) -> np.ndarray:
    """Evaluate several expressions over a batch of points.

    Parameters
    ----------
    exprs : sequence of Expr
    points : array-like, shape (P, D) or (D,)
        Rows are points; column k feeds variable index k.
    strict : bool
        When true, raise :class:`EvalDomainError` on division by zero,
        sqrt of a negative value, or log of a nonpositive value. When
        false those produce nan or inf quietly.

    Returns
    -------
    ndarray, shape (len(exprs), P)
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(1, -1)
    npts, dim = pts.shape
    exprs = list(exprs)
    order = _postorder(exprs)

    refs: dict = {}
    for n in order:
        for k in n._kids():
            refs[id(k)] = refs.get(id(k), 0) + 1
    for r in exprs:
        refs[id(r)] = refs.get(id(r), 0) + 1

    vals: dict = {}

    def release(n: Expr) -> None:
        refs[id(n)] -= 1
        if refs[id(n)] == 0:
            del vals[id(n)]

    with np.errstate(all="ignore"):
        for n in order:
            if isinstance(n, Const):
                try:
                    v = np.float64(n.value)
                except OverflowError:
                    v = np.float64(math.inf if n.value > 0 else -math.inf)
            elif isinstance(n, Var):
                if n.index >= dim:
                    raise ValueError(
                        f"expression uses variable index {n.index} but points "
                        f"have dimension {dim}"
                    )
                v = pts[:, n.index]
            elif isinstance(n, Pow):
                v = vals[id(n.base)] ** n.exponent
                release(n.base)
            elif isinstance(n, Unary):
                c = vals[id(n.child)]
                if n.op == "neg":
                    v = -c
                elif n.op == "sqrt":
                    if strict and np.any(c < 0):
                        raise EvalDomainError("square root of a negative value")
                    v = np.sqrt(c)
                elif n.op == "sin":
                    v = np.sin(c)
                elif n.op == "cos":
                    v = np.cos(c)
                elif n.op == "exp":
                    v = np.exp(c)
                else:
                    if strict and np.any(c <= 0):
                        raise EvalDomainError("log of a nonpositive value")
                    v = np.log(c)
                release(n.child)
            else:
                l, r = vals[id(n.left)], vals[id(n.right)]
                if n.op == "add":
                    v = l + r
                elif n.op == "sub":
                    v = l - r
                elif n.op == "mul":
                    v = l * r
                else:
                    if strict and np.any(r == 0):
                        raise EvalDomainError("division by zero")
                    v = l / r
                release(n.left)
                release(n.right)
            vals[id(n)] = v

        out = np.empty((len(exprs), npts), dtype=float)
        for i, r in enumerate(exprs):
            out[i, :] = vals[id(r)]
            release(r)
    return out


def evaluate(e: Expr, point, strict: bool = True) -> float:
    """Evaluate a single expression at a single point."""
    return float(eval_block([e], np.asarray(point, dtype=float), strict=strict)[0, 0])


# ---------------------------------------------------------------------------
# Symbolic determinants.

def symbolic_determinant(matrix: Sequence[Sequence[Expr]]) -> Expr:
    """Determinant of a square matrix of expressions, fully simplified.

    Uses minor expansion along columns with memoization on row subsets,
    simplifying at every level so that exact cancellations happen inside
    the expansion rather than in one giant final pass. The empty matrix
    has determinant one. Sizes above 12 are rejected; expansion cost is
    exponential and callers never need more.
    """
    rows = [list(r) for r in matrix]
    n = len(rows)
    if n == 0:
        return _ONE
    if any(len(r) != n for r in rows):
        raise ValueError("matrix must be square")
    if n > 12:
        raise ValueError("determinant expansion is limited to 12x12")
    rows = [[simplify(e) for e in r] for r in rows]
    memo: dict = {}

    def minor(avail: tuple) -> Expr:
        col = n - len(avail)
        if len(avail) == 1:
            return rows[avail[0]][col]
        res = memo.get(avail)
        if res is not None:
            return res
        acc = _ZERO
        for i, r in enumerate(avail):
            entry = rows[r][col]
            if _is_const(entry, 0):
                continue
            term = mul(entry, minor(avail[:i] + avail[i + 1 :]))
            acc = add(acc, term) if i % 2 == 0 else sub(acc, term)
        res = simplify(acc)
        memo[avail] = res
        return res

    return minor(tuple(range(n)))
