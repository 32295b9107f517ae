"""Expression language for formulaic alpha factors.

An alpha expression is a tree of operator calls over eight daily market
data fields, written in a functional syntax:

    Div(Sub($close, Mean($vwap, 2)), Std($amount, 5))

Fields are prefixed with ``$``. Operators take expression arguments first,
then any integer window arguments, then any real parameters (Quantile's q,
Power's n). This module defines the AST, the operator catalog, the parser,
the canonical printer, structural validation, a commutation-normalizing
64-bit hash, and the warmup (lookback) analysis.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

FIELD_NAMES = ("open", "high", "low", "close", "volume", "amount", "change", "vwap")

CATEGORY_MATHEMATICAL = "mathematical"
CATEGORY_TIME_SERIES = "time_series"
CATEGORY_REGRESSION = "regression"
CATEGORY_STATISTICAL = "statistical"
CATEGORY_CONDITIONAL = "conditional"
CATEGORY_LOGICAL = "logical"


@dataclass(frozen=True)
class OperatorKind:
    """Catalog entry: name, category, and argument layout."""

    name: str
    category: str
    arity: int
    window_params: int = 0
    extra_params: int = 0

    @property
    def total_args(self) -> int:
        return self.arity + self.window_params + self.extra_params


def _build_catalog() -> dict[str, OperatorKind]:
    specs: list[tuple[str, str, int, int, int]] = [
        # mathematical (8)
        ("Add", CATEGORY_MATHEMATICAL, 2, 0, 0),
        ("Sub", CATEGORY_MATHEMATICAL, 2, 0, 0),
        ("Mul", CATEGORY_MATHEMATICAL, 2, 0, 0),
        ("Div", CATEGORY_MATHEMATICAL, 2, 0, 0),
        ("Log", CATEGORY_MATHEMATICAL, 1, 0, 0),
        ("Abs", CATEGORY_MATHEMATICAL, 1, 0, 0),
        ("Power", CATEGORY_MATHEMATICAL, 1, 0, 1),
        ("Sign", CATEGORY_MATHEMATICAL, 1, 0, 0),
        # time series, rolling (15)
        ("Mean", CATEGORY_TIME_SERIES, 1, 1, 0),
        ("Std", CATEGORY_TIME_SERIES, 1, 1, 0),
        ("Var", CATEGORY_TIME_SERIES, 1, 1, 0),
        ("Sum", CATEGORY_TIME_SERIES, 1, 1, 0),
        ("Max", CATEGORY_TIME_SERIES, 1, 1, 0),
        ("Min", CATEGORY_TIME_SERIES, 1, 1, 0),
        ("Med", CATEGORY_TIME_SERIES, 1, 1, 0),
        ("Mad", CATEGORY_TIME_SERIES, 1, 1, 0),
        ("Rank", CATEGORY_TIME_SERIES, 1, 1, 0),
        ("Quantile", CATEGORY_TIME_SERIES, 1, 1, 1),
        ("Count", CATEGORY_TIME_SERIES, 1, 1, 0),
        ("Ref", CATEGORY_TIME_SERIES, 1, 1, 0),
        ("Delta", CATEGORY_TIME_SERIES, 1, 1, 0),
        ("IdxMax", CATEGORY_TIME_SERIES, 1, 1, 0),
        ("IdxMin", CATEGORY_TIME_SERIES, 1, 1, 0),
        # regression over a rolling window (3)
        ("Resi", CATEGORY_REGRESSION, 1, 1, 0),
        ("Slope", CATEGORY_REGRESSION, 1, 1, 0),
        ("Rsquare", CATEGORY_REGRESSION, 1, 1, 0),
        # statistical over a rolling window (4)
        ("Skew", CATEGORY_STATISTICAL, 1, 1, 0),
        ("Kurt", CATEGORY_STATISTICAL, 1, 1, 0),
        ("Corr", CATEGORY_STATISTICAL, 2, 1, 0),
        ("Cov", CATEGORY_STATISTICAL, 2, 1, 0),
        # conditional (7)
        ("If", CATEGORY_CONDITIONAL, 3, 0, 0),
        ("Gt", CATEGORY_CONDITIONAL, 2, 0, 0),
        ("Lt", CATEGORY_CONDITIONAL, 2, 0, 0),
        ("Ge", CATEGORY_CONDITIONAL, 2, 0, 0),
        ("Le", CATEGORY_CONDITIONAL, 2, 0, 0),
        ("Eq", CATEGORY_CONDITIONAL, 2, 0, 0),
        ("Ne", CATEGORY_CONDITIONAL, 2, 0, 0),
        # logical (3)
        ("And", CATEGORY_LOGICAL, 2, 0, 0),
        ("Or", CATEGORY_LOGICAL, 2, 0, 0),
        ("Not", CATEGORY_LOGICAL, 1, 0, 0),
    ]
    return {name: OperatorKind(name, cat, ar, wp, ep) for name, cat, ar, wp, ep in specs}


OPERATORS: dict[str, OperatorKind] = _build_catalog()

# Operators whose expression operands may be reordered without changing
# the result; used only for hash normalization, never for evaluation.
COMMUTATIVE_OPERATORS = frozenset({"Add", "Mul", "And", "Or", "Eq", "Ne", "Corr", "Cov"})

# Window-consuming operators where the output at row t uses rows t-N+1..t.
ROLLING_CATEGORIES = frozenset(
    {CATEGORY_TIME_SERIES, CATEGORY_REGRESSION, CATEGORY_STATISTICAL}
)
# Lag-style operators: the output at row t is a function of row t-N.
SHIFT_OPERATORS = frozenset({"Ref", "Delta"})


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldLeaf:
    """Reference to one of the eight panel fields."""

    kind: str

    def __post_init__(self) -> None:
        if self.kind not in FIELD_NAMES:
            raise ValueError(f"unknown field {self.kind!r}")


@dataclass(frozen=True)
class ConstLeaf:
    """Numeric literal leaf."""

    value: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "value", float(self.value))


@dataclass(frozen=True)
class Node:
    """Operator application: children, then windows, then real params."""

    op: OperatorKind
    children: tuple["Expr", ...]
    windows: tuple[int, ...] = ()
    reals: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "children", tuple(self.children))
        object.__setattr__(self, "windows", tuple(int(w) for w in self.windows))
        object.__setattr__(self, "reals", tuple(float(r) for r in self.reals))
        if len(self.children) != self.op.arity:
            raise ValueError(
                f"{self.op.name} expects {self.op.arity} expression arguments, "
                f"got {len(self.children)}"
            )
        if len(self.windows) != self.op.window_params:
            raise ValueError(
                f"{self.op.name} expects {self.op.window_params} window arguments, "
                f"got {len(self.windows)}"
            )
        if len(self.reals) != self.op.extra_params:
            raise ValueError(
                f"{self.op.name} expects {self.op.extra_params} real parameters, "
                f"got {len(self.reals)}"
            )
        for w in self.windows:
            if w < 1:
                raise ValueError(f"{self.op.name} window must be >= 1, got {w}")
        if self.op.name == "Quantile":
            q = self.reals[0]
            if not 0.0 <= q <= 1.0:
                raise ValueError(f"Quantile q must be in [0, 1], got {q}")


Expr = FieldLeaf | ConstLeaf | Node


# ---------------------------------------------------------------------------
# Limits and validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExprLimits:
    """Structural budget an expression must stay within."""

    max_depth: int = 8
    max_nodes: int = 40
    max_window: int = 250
    operator_whitelist: frozenset[str] | None = None

    def __post_init__(self) -> None:
        if self.max_depth < 1 or self.max_nodes < 1 or self.max_window < 1:
            raise ValueError("limits must be positive")
        if self.operator_whitelist is not None:
            object.__setattr__(
                self, "operator_whitelist", frozenset(self.operator_whitelist)
            )


@dataclass(frozen=True)
class Violation:
    code: str  # DepthExceeded | NodeCountExceeded | WindowTooLarge | OperatorNotAllowed
    message: str


def depth(expr: Expr) -> int:
    """Number of levels in the tree; a bare leaf has depth 1."""
    if isinstance(expr, Node):
        return 1 + max(depth(c) for c in expr.children)
    return 1


def node_count(expr: Expr) -> int:
    """Total number of nodes, leaves included (windows and reals are not nodes)."""
    if isinstance(expr, Node):
        return 1 + sum(node_count(c) for c in expr.children)
    return 1


def fields_used(expr: Expr) -> frozenset[str]:
    if isinstance(expr, FieldLeaf):
        return frozenset({expr.kind})
    if isinstance(expr, Node):
        out: frozenset[str] = frozenset()
        for c in expr.children:
            out |= fields_used(c)
        return out
    return frozenset()


def iter_nodes(expr: Expr):
    """Yield every node of the tree, root first."""
    yield expr
    if isinstance(expr, Node):
        for c in expr.children:
            yield from iter_nodes(c)


def validate(expr: Expr, limits: ExprLimits) -> list[Violation]:
    """Return the list of limit violations; empty means the expression is ok."""
    violations: list[Violation] = []
    d = depth(expr)
    if d > limits.max_depth:
        violations.append(
            Violation("DepthExceeded", f"depth {d} exceeds max_depth {limits.max_depth}")
        )
    n = node_count(expr)
    if n > limits.max_nodes:
        violations.append(
            Violation("NodeCountExceeded", f"{n} nodes exceed max_nodes {limits.max_nodes}")
        )
    for sub in iter_nodes(expr):
        if not isinstance(sub, Node):
            continue
        for w in sub.windows:
            if w > limits.max_window:
                violations.append(
                    Violation(
                        "WindowTooLarge",
                        f"{sub.op.name} window {w} exceeds max_window {limits.max_window}",
                    )
                )
        wl = limits.operator_whitelist
        if wl is not None and sub.op.name not in wl:
            violations.append(
                Violation("OperatorNotAllowed", f"operator {sub.op.name} is not whitelisted")
            )
    return violations


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

class ExprSyntaxError(ValueError):
    """Base parse error; carries the character offset of the offending token."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class UnknownOperator(ExprSyntaxError):
    pass


class UnknownField(ExprSyntaxError):
    pass


class ArityMismatch(ExprSyntaxError):
    pass


class MalformedNumber(ExprSyntaxError):
    pass


class UnbalancedParens(ExprSyntaxError):
    pass


class WindowNotPositiveInteger(ExprSyntaxError):
    pass


class InvalidParameter(ExprSyntaxError):
    """Real parameter out of its documented range (e.g. Quantile q outside [0, 1])."""


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<field>\$[A-Za-z_][A-Za-z0-9_]*)
  | (?P<number>[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<lparen>\()
  | (?P<rparen>\))
  | (?P<comma>,)
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    offset: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup or ""
        if kind != "ws":
            if kind == "number":
                nxt = m.end()
                # "1.2.3" or "5x" would otherwise split into two tokens
                if nxt < len(text) and (text[nxt].isalnum() or text[nxt] == "."):
                    raise MalformedNumber(f"malformed number near {m.group(0)!r}", pos)
            tokens.append(_Token(kind, m.group(0), pos))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> _Token | None:
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def next(self) -> _Token:
        tok = self.peek()
        if tok is None:
            raise UnbalancedParens("unexpected end of input", len(self.text))
        self.i += 1
        return tok

    def parse(self) -> Expr:
        expr = self.parse_expr()
        trailing = self.peek()
        if trailing is not None:
            if trailing.kind == "rparen":
                raise UnbalancedParens("unmatched ')'", trailing.offset)
            raise ExprSyntaxError(f"unexpected trailing input {trailing.text!r}", trailing.offset)
        return expr

    def parse_expr(self) -> Expr:
        tok = self.next()
        if tok.kind == "field":
            name = tok.text[1:]
            if name not in FIELD_NAMES:
                raise UnknownField(f"unknown field {tok.text!r}", tok.offset)
            return FieldLeaf(name)
        if tok.kind == "number":
            return ConstLeaf(self._to_number(tok))
        if tok.kind == "ident":
            return self.parse_call(tok)
        if tok.kind == "rparen":
            raise UnbalancedParens("unmatched ')'", tok.offset)
        raise ExprSyntaxError(f"unexpected token {tok.text!r}", tok.offset)

    def parse_call(self, name_tok: _Token) -> Expr:
        op = OPERATORS.get(name_tok.text)
        if op is None:
            raise UnknownOperator(f"unknown operator {name_tok.text!r}", name_tok.offset)
        opening = self.next()
        if opening.kind != "lparen":
            raise ExprSyntaxError(f"expected '(' after {op.name}", opening.offset)
        args: list[tuple[Expr, int]] = []
        first = self.peek()
        if first is not None and first.kind == "rparen":
            self.next()
        else:
            while True:
                start = self.peek()
                arg_offset = start.offset if start is not None else len(self.text)
                args.append((self.parse_expr(), arg_offset))
                sep = self.next()
                if sep.kind == "rparen":
                    break
                if sep.kind != "comma":
                    raise ExprSyntaxError(f"expected ',' or ')' but got {sep.text!r}", sep.offset)
        if len(args) != op.total_args:
            raise ArityMismatch(
                f"{op.name} takes {op.total_args} arguments, got {len(args)}",
                name_tok.offset,
            )
        children = tuple(a for a, _ in args[: op.arity])
        windows: list[int] = []
        for arg, off in args[op.arity : op.arity + op.window_params]:
            if (
                not isinstance(arg, ConstLeaf)
                or not float(arg.value).is_integer()
                or arg.value < 1
            ):
                raise WindowNotPositiveInteger(
                    f"{op.name} window must be a positive integer literal", off
                )
            windows.append(int(arg.value))
        reals: list[float] = []
        for arg, off in args[op.arity + op.window_params :]:
            if not isinstance(arg, ConstLeaf):
                raise InvalidParameter(f"{op.name} parameter must be a numeric literal", off)
            reals.append(arg.value)
        if op.name == "Quantile" and not 0.0 <= reals[0] <= 1.0:
            raise InvalidParameter("Quantile q must be in [0, 1]", args[-1][1])
        return Node(op, children, tuple(windows), tuple(reals))

    @staticmethod
    def _to_number(tok: _Token) -> float:
        try:
            return float(tok.text)
        except ValueError:
            raise MalformedNumber(f"malformed number {tok.text!r}", tok.offset) from None


def parse(text: str) -> Expr:
    """Parse expression text into an AST; raises ExprSyntaxError subclasses."""
    if not text or not text.strip():
        raise ExprSyntaxError("empty expression", 0)
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Printing
# ---------------------------------------------------------------------------

def _format_number(value: float) -> str:
    if float(value).is_integer() and abs(value) < 1e16:
        return str(int(value))
    return repr(float(value))


def format_expr(expr: Expr) -> str:
    """Canonical text: single space after commas, no redundant parentheses.

    parse(format_expr(e)) is structurally identical to e.
    """
    if isinstance(expr, FieldLeaf):
        return f"${expr.kind}"
    if isinstance(expr, ConstLeaf):
        return _format_number(expr.value)
    parts = [format_expr(c) for c in expr.children]
    parts.extend(str(w) for w in expr.windows)
    parts.extend(_format_number(r) for r in expr.reals)
    return f"{expr.op.name}({', '.join(parts)})"


# ---------------------------------------------------------------------------
# Canonical hashing
# ---------------------------------------------------------------------------

def _canonical_key(expr: Expr) -> str:
    if isinstance(expr, FieldLeaf):
        return f"${expr.kind}"
    if isinstance(expr, ConstLeaf):
        return f"#{_format_number(expr.value)}"
    keys = [_canonical_key(c) for c in expr.children]
    if expr.op.name in COMMUTATIVE_OPERATORS:
        keys.sort()
    parts = keys + [str(w) for w in expr.windows] + [_format_number(r) for r in expr.reals]
    return f"{expr.op.name}({','.join(parts)})"


def canonical_hash(expr: Expr) -> int:
    """Structural 64-bit digest, invariant under commutation of symmetric operators."""
    key = _canonical_key(expr)
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


# ---------------------------------------------------------------------------
# Warmup analysis
# ---------------------------------------------------------------------------

def warmup_rows(expr: Expr) -> int:
    """Smallest row index r such that rows >= r are defined on a NaN-free panel.

    Leaves need nothing. Ref/Delta(x, N) add N rows on top of x's warmup.
    A rolling window of N adds N-1. Elementwise operators take the max over
    children. Count is the exception among rolling operators: it tolerates
    NaN inside the window, so its output is defined as soon as N rows exist,
    regardless of its child's warmup.
    """
    if not isinstance(expr, Node):
        return 0
    child_warmup = max((warmup_rows(c) for c in expr.children), default=0)
    op = expr.op
    if op.name == "Count":
        return expr.windows[0] - 1
    if op.name in SHIFT_OPERATORS:
        return child_warmup + expr.windows[0]
    if op.category in ROLLING_CATEGORIES:
        return child_warmup + expr.windows[0] - 1
    return child_warmup
