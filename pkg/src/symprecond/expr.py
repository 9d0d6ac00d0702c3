"""Prefix-notation expressions over a small operator library.

Tokens are strings: the operators ``+ - * / ^`` (``^`` is ``pow``),
``sqrt exp log``, the literal ``1.0``, the constant placeholder ``c`` and
variables ``x1, x2, ...``.  An :class:`Expression` is a complete prefix
sequence plus one value per placeholder, in order of appearance.

Evaluation is protected: any out-of-domain operation makes the result
Invalid, represented as ``None`` for scalars and ``nan`` for arrays.

>>> e = parse("1.0 + 1.0/(x2 + 1.2)")
>>> e.tokens
('+', '1.0', '/', '1.0', '+', 'x2', 'c')
>>> round(eval_expr(e, [0.0, 0.0]), 4)
1.8333
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _exprjit as _jit

__all__ = [
    "Library",
    "Expression",
    "TraversalState",
    "ExprError",
    "ParseError",
    "traversal_step",
    "constraint_mask",
    "eval_expr",
    "eval_batch",
    "serialize",
    "to_json",
    "from_json",
    "parse",
    "optimize_constants",
    "nrmse",
    "reward",
    "check_constraints",
    "MIN_LENGTH",
    "MAX_LENGTH",
]

MIN_LENGTH = 4
MAX_LENGTH = 64
EMPTY = None

BINARY = ("+", "-", "*", "/", "^")
UNARY = ("sqrt", "exp", "log")
ONE = "1.0"
CONST = "c"
_INVERSE = {"log": "exp", "exp": "log"}

_CODES = {"+": _jit.ADD, "-": _jit.SUB, "*": _jit.MUL, "/": _jit.DIV, "^": _jit.POW,
          "sqrt": _jit.SQRT, "exp": _jit.EXP, "log": _jit.LOG, ONE: _jit.ONE,
          CONST: _jit.CONST}


class ExprError(ValueError):
    pass


class ParseError(ExprError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


def arity(token: str) -> int:
    if token in BINARY:
        return 2
    if token in UNARY:
        return 1
    return 0


def is_constant(token) -> bool:
    return token in (ONE, CONST)


def _is_variable(token: str) -> bool:
    return bool(re.fullmatch(r"x[1-9][0-9]*", token))


def var_index(token: str) -> int:
    return int(token[1:]) - 1


@dataclass(frozen=True)
class Library:
    """The ordered token set: operators, ``1.0``, ``c`` and ``n_vars`` variables."""

    n_vars: int
    use_const: bool = True

    @property
    def tokens(self) -> tuple:
        consts = (ONE, CONST) if self.use_const else (ONE,)
        return BINARY[:4] + UNARY + ("^",) + consts + tuple(
            f"x{k + 1}" for k in range(self.n_vars))

    def __len__(self):
        return len(self.tokens)

    def index(self, token: str) -> int:
        return self.tokens.index(token)

    @property
    def arities(self) -> np.ndarray:
        return np.array([arity(t) for t in self.tokens])


# -- traversal --------------------------------------------------------------


@dataclass(frozen=True)
class TraversalState:
    """Bookkeeping for a partial prefix sequence.

    ``parent`` is the most recent operator still missing an operand and
    ``sibling`` its already-complete operand (``None`` when empty).
    """

    tokens: tuple = ()
    open_slots: int = 1
    parent: str | None = EMPTY
    sibling: str | None = EMPTY

    @property
    def complete(self) -> bool:
        return len(self.tokens) > 0 and self.open_slots == 0

    @property
    def length(self) -> int:
        return len(self.tokens)


def traversal_step(state: TraversalState, token: str) -> TraversalState:
    """Append ``token`` and recompute parent and sibling.

    >>> s = traversal_step(TraversalState(), "+")
    >>> (s.parent, s.sibling, s.open_slots)
    ('+', None, 2)
    >>> s = traversal_step(s, "x1")
    >>> (s.parent, s.sibling, s.open_slots)
    ('+', 'x1', 1)
    """
    if state.complete:
        raise ExprError("expression is already complete")
    tokens = state.tokens + (token,)
    open_slots = state.open_slots + arity(token) - 1
    if arity(token) > 0:
        return TraversalState(tokens, open_slots, token, EMPTY)
    parent = sibling = EMPTY
    count = 0
    # walk back to the last operator that still lacks an operand
    for i in range(len(tokens) - 1, -1, -1):
        count += arity(tokens[i]) - 1
        if count == 0:
            parent, sibling = tokens[i], tokens[i + 1]
            break
    return TraversalState(tokens, open_slots, parent, sibling)


def constraint_mask(state: TraversalState, library: Library,
                    min_length: int = MIN_LENGTH, max_length: int = MAX_LENGTH,
                    return_flag: bool = False):
    """Boolean mask over ``library.tokens`` of tokens allowed next.

    Rules, in order: length bounds, no binary operator with two constant
    operands, no ``log``/``exp`` directly under its inverse.  If every
    token would be masked the rules are dropped from the last one
    backwards until something is allowed, and the flag is set.
    """
    toks = library.tokens
    ar = library.arities
    n = len(state.tokens)
    s = state.open_slots
    rules = []
    # (a) length: room to close every slot, and no early completion
    too_long = n + 1 + (s + ar - 1) > max_length
    too_short = (s + ar - 1 == 0) & (n + 1 < min_length)
    rules.append(~(too_long | too_short))
    # (b) constant-constant binary operands
    b = np.ones(len(toks), dtype=bool)
    if state.parent in BINARY and is_constant(state.sibling):
        b &= ~np.array([is_constant(t) for t in toks])
    rules.append(b)
    # (c) inverse nesting
    c = np.ones(len(toks), dtype=bool)
    if state.parent in _INVERSE:
        c &= np.array([t != _INVERSE[state.parent] for t in toks])
    rules.append(c)
    relaxed = False
    while True:
        mask = np.logical_and.reduce(rules)
        if mask.any() or not rules:
            break
        rules.pop()
        relaxed = True
    if not mask.any():
        mask = np.ones(len(toks), dtype=bool)
    return (mask, relaxed) if return_flag else mask


# -- expressions ------------------------------------------------------------


@dataclass(frozen=True)
class Expression:
    tokens: tuple
    constants: tuple = field(default=None)
    codes: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        toks = tuple(str(t) for t in self.tokens)
        for t in toks:
            if not (t in BINARY or t in UNARY or is_constant(t) or _is_variable(t)):
                raise ExprError(f"unknown token {t!r}")
        open_slots = 1
        for i, t in enumerate(toks):
            if open_slots == 0:
                raise ExprError(f"trailing tokens after position {i}")
            open_slots += arity(t) - 1
        if open_slots != 0 or not toks:
            raise ExprError("incomplete prefix sequence")
        n_const = toks.count(CONST)
        consts = (1.0,) * n_const if self.constants is None else tuple(
            float(v) for v in self.constants)
        if len(consts) != n_const:
            raise ExprError(f"{n_const} placeholders but {len(consts)} constants")
        object.__setattr__(self, "tokens", toks)
        object.__setattr__(self, "constants", consts)
        object.__setattr__(self, "codes", _codes(self))

    def __len__(self):
        return len(self.tokens)

    @property
    def n_constants(self) -> int:
        return len(self.constants)

    @property
    def max_var(self) -> int:
        idx = [var_index(t) for t in self.tokens if _is_variable(t)]
        return max(idx) + 1 if idx else 0

    def with_constants(self, values) -> "Expression":
        return Expression(self.tokens, tuple(values))

    def __str__(self):
        return serialize(self)


def _codes(e: Expression) -> np.ndarray:
    return np.array([_CODES[t] if t in _CODES else _jit.VAR0 + var_index(t)
                     for t in e.tokens], dtype=np.int64)


def eval_batch(e: Expression, X, constants=None) -> np.ndarray:
    """Evaluate on every row of ``X``; Invalid rows are ``nan``."""
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=float)))
    if e.max_var > X.shape[1]:
        raise ExprError(f"expression uses x{e.max_var} but rows have {X.shape[1]} features")
    consts = np.asarray(e.constants if constants is None else constants, dtype=float)
    return _jit.eval_program(e.codes, consts, X)


def eval_expr(e: Expression, x: Sequence[float]):
    """Scalar evaluation; returns ``None`` when Invalid.

    >>> eval_expr(Expression(("+", "x1", "1.0")), [2.0])
    3.0
    >>> eval_expr(Expression(("/", "1.0", "x1")), [0.0]) is None
    True
    """
    v = eval_batch(e, np.asarray(x, dtype=float)[None, :])[0]
    return None if math.isnan(v) else float(v)


# -- text and JSON ----------------------------------------------------------

_INFIX = {"+": "+", "-": "-", "*": "*", "/": "/", "^": "^"}


def serialize(e: Expression, show_constants: bool = True) -> str:
    """Fully parenthesized infix text.

    Placeholders print as their value, or as ``c`` when the value is
    exactly 1.0 (so the text never confuses them with the ``1.0`` token).

    >>> serialize(Expression(("+", "x1", "1.0")))
    '(x1 + 1.0)'
    """
    consts = iter(e.constants)
    pos = 0

    def rec():
        nonlocal pos
        t = e.tokens[pos]
        pos += 1
        if t in BINARY:
            a = rec()
            b = rec()
            return f"({a} {_INFIX[t]} {b})"
        if t in UNARY:
            return f"{t}({rec()})"
        if t == CONST:
            v = next(consts)
            return repr(v) if show_constants and v != 1.0 else "c"
        return t

    return rec()


def to_json(e: Expression) -> dict:
    return {"tokens": list(e.tokens), "constants": list(e.constants), "infix": serialize(e)}


def from_json(obj: dict) -> Expression:
    return Expression(tuple(obj["tokens"]), tuple(obj.get("constants", ())))


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][-+]?\d+)?|\d+(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


def _lex(text):
    out = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            pos += len(text[pos:]) - len(text[pos:].lstrip())
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        start = m.start(kind)
        out.append((kind, m.group(kind), start))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    """Precedence-climbing parser producing prefix tokens."""

    def __init__(self, text):
        self.toks = _lex(text)
        self.i = 0
        self.constants = []

    def peek(self):
        return self.toks[self.i]

    def take(self, value=None):
        tok = self.toks[self.i]
        if value is not None and tok[1] != value:
            what = "end of input" if tok[0] == "end" else repr(tok[1])
            raise ParseError(f"expected {value!r} but found {what}", tok[2])
        self.i += 1
        return tok

    def expr(self):
        out = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            out = [op] + out + self.term()
        return out

    def term(self):
        out = self.power()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            out = [op] + out + self.power()
        return out

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            return ["^"] + base + self.power()
        return base

    def atom(self):
        kind, val, pos = self.peek()
        if kind == "end":
            raise ParseError("unexpected end of input", pos)
        if val == "(":
            self.take()
            out = self.expr()
            self.take(")")
            return out
        if val == "-" and self.toks[self.i + 1][0] == "num":
            self.take()
            return self._number("-" + self.take()[1])
        if kind == "num":
            return self._number(self.take()[1])
        if kind == "name":
            self.take()
            if val in UNARY:
                self.take("(")
                out = self.expr()
                self.take(")")
                return [val] + out
            if val == "pow":
                self.take("(")
                a = self.expr()
                self.take(",")
                b = self.expr()
                self.take(")")
                return ["^"] + a + b
            if val == CONST:
                self.constants.append(1.0)
                return [CONST]
            if _is_variable(val):
                return [val]
            raise ParseError(f"unknown name {val!r}", pos)
        raise ParseError(f"unexpected {val!r}", pos)

    def _number(self, text):
        if text == ONE:
            return [ONE]
        self.constants.append(float(text))
        return [CONST]


def parse(text: str) -> Expression:
    """Parse infix text (full parentheses optional) into an Expression.

    ``1.0`` is the literal token, ``c`` a placeholder with value 1.0 and
    any other number a placeholder holding that value.

    >>> parse("(x1 +")
    Traceback (most recent call last):
    ...
    symprecond.expr.ParseError: unexpected end of input at offset 5
    """
    p = _Parser(text)
    tokens = p.expr()
    kind, val, pos = p.peek()
    if kind != "end":
        raise ParseError(f"unexpected {val!r}", pos)
    return Expression(tuple(tokens), tuple(p.constants))


# -- fitting ----------------------------------------------------------------


def nrmse(y, y_hat) -> float:
    """Root-mean-square error over the population std of ``y``.

    Returns ``nan`` if any prediction is Invalid and ``inf`` if ``y``
    is constant.
    """
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if np.isnan(y_hat).any():
        return math.nan
    sigma = float(np.std(y))
    if sigma == 0.0:
        return math.inf
    with np.errstate(over="ignore"):
        return float(np.sqrt(np.mean((y - y_hat) ** 2)) / sigma)


def reward(e: Expression, X, y, return_flag: bool = False):
    """``1 / (1 + NRMSE)``; 0 for any Invalid prediction or constant ``y``.

    >>> e = Expression(("*", "x1", "1.0"))
    >>> reward(e, [[1.0], [1.0]], [0.0, 2.0])
    0.5
    """
    y = np.asarray(y, dtype=float)
    if len(y) < 2:
        raise ExprError("reward needs at least two rows")
    degenerate = float(np.std(y)) == 0.0
    err = nrmse(y, eval_batch(e, X))
    r = 0.0 if math.isnan(err) or math.isinf(err) else 1.0 / (1.0 + err)
    return (r, degenerate) if return_flag else r


def optimize_constants(e: Expression, X, y, max_iter: int = 200,
                       xatol: float = 1e-10, fatol: float = 1e-14) -> Expression:
    """Fit placeholder values by Nelder-Mead on NRMSE, starting from all ones.

    The simplex method is the standard non-adaptive one (as in
    ``scipy.optimize.minimize(method="Nelder-Mead")``), compiled together
    with the evaluator.  The result is never worse than the all-ones
    start.  If the expression has no placeholders, ``y`` is constant, or
    every trial point is Invalid, ``e`` comes back with all-ones constants.
    """
    if e.n_constants == 0:
        return e
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=float)))
    y = np.asarray(y, dtype=float)
    sigma = float(np.std(y))
    x0 = np.ones(e.n_constants)
    if sigma == 0.0:
        return e.with_constants(x0)
    xbest, fbest, _ = _jit.nelder_mead(e.codes, X, y, sigma, x0, max_iter, xatol, fatol)
    f0 = _jit.nrmse_program(e.codes, x0, X, y, sigma)
    if not fbest < f0:
        return e.with_constants(x0)
    return e.with_constants(xbest)


def check_constraints(e: Expression, min_length: int = MIN_LENGTH,
                      max_length: int = MAX_LENGTH) -> list[str]:
    """Names of the sampling rules that ``e`` breaks (empty if none)."""
    bad = []
    if not min_length <= len(e) <= max_length:
        bad.append("length")
    state = TraversalState()
    for t in e.tokens:
        if state.parent in BINARY and is_constant(state.sibling) and is_constant(t):
            bad.append("constant-operands")
        if state.parent in _INVERSE and t == _INVERSE[state.parent]:
            bad.append("inverse-nesting")
        state = traversal_step(state, t)
    return sorted(set(bad))
