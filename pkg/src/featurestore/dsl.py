"""Transformation DSL: rolling-window aggregations and row expressions.

Surface grammar, one statement per line, ``#`` starts a comment::

    agg <fn>(<column>) over <N><unit> as <name>     fn in sum count avg min max latest
    expr <arith> as <name>                           + - * / over columns and numbers
    group by <col>[, <col>...]                       optional, defaults to entity index
    timestamp <col>                                  optional, defaults to source ts column

Units are ``ms s m h d``. Execution emits one output row per group at every
multiple of the schedule interval inside the feature window, provided the
group has at least one source row in ``[t - horizon, t)`` where ``horizon`` is
the longest aggregation window (the schedule interval when there are no
aggregations). Each aggregation at ``t`` covers source rows with timestamp in
``[t - window, t)``; row expressions are evaluated on the most recent source
row of the horizon.
"""

from __future__ import annotations

import math
import re
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Optional, Union

from .errors import DslParseError, SchemaConflict, TypeMismatch, UnknownColumn
from .intervals import FeatureWindow

SCALAR_TYPES = ("string", "int64", "float64")
NUMERIC_TYPES = ("int64", "float64")
AGG_FUNCTIONS = ("sum", "count", "avg", "min", "max", "latest")
KEYWORDS = frozenset({"agg", "expr", "over", "as", "group", "by", "timestamp"})

UNIT_MS = {"d": 86_400_000, "h": 3_600_000, "m": 60_000, "s": 1_000, "ms": 1}


# --------------------------------------------------------------------------- frames


@dataclass
class Frame:
    schema: list[tuple[str, str]]
    rows: list[tuple] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return [name for name, _ in self.schema]

    def index_of(self, name: str) -> int:
        return self.columns.index(name)

    def types(self) -> dict[str, str]:
        return dict(self.schema)

    def to_dicts(self) -> list[dict[str, Any]]:
        cols = self.columns
        return [dict(zip(cols, row)) for row in self.rows]


def check_value(value: Any, type_: str) -> Any:
    """Coerce ``value`` to ``type_`` or raise TypeError. ``None`` is always allowed."""
    if value is None:
        return None
    if type_ == "string":
        if isinstance(value, str):
            return value
    elif type_ == "int64":
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif type_ == "float64":
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    else:
        raise TypeError(f"unknown scalar type {type_!r}")
    raise TypeError(f"{value!r} is not a {type_}")


# ---------------------------------------------------------------------------- AST


@dataclass(frozen=True)
class Col:
    name: str


@dataclass(frozen=True, eq=False)
class Num:
    value: Union[int, float]

    def __eq__(self, other):
        return (
            isinstance(other, Num)
            and type(self.value) is type(other.value)
            and self.value == other.value
        )

    def __hash__(self):
        return hash((type(self.value), self.value))


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


Expr = Union[Col, Num, Neg, BinOp]


@dataclass(frozen=True)
class AggSpec:
    output: str
    function: str
    column: str
    window: int  # ms


@dataclass(frozen=True)
class RowExpr:
    output: str
    expr: Expr


@dataclass(frozen=True)
class DslProgram:
    aggregations: tuple[AggSpec, ...] = ()
    row_exprs: tuple[RowExpr, ...] = ()
    group_keys: Optional[tuple[str, ...]] = None
    timestamp_column: Optional[str] = None

    @property
    def outputs(self) -> list[str]:
        return [a.output for a in self.aggregations] + [r.output for r in self.row_exprs]


def expr_columns(e: Expr) -> list[str]:
    if isinstance(e, Col):
        return [e.name]
    if isinstance(e, Neg):
        return expr_columns(e.operand)
    if isinstance(e, BinOp):
        return expr_columns(e.left) + expr_columns(e.right)
    return []


def _is_zero_literal(e: Expr) -> bool:
    if isinstance(e, Num):
        return e.value == 0
    return isinstance(e, Neg) and _is_zero_literal(e.operand)


# ---------------------------------------------------------------------------- lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<duration>\d+(?:ms|s|m|h|d))(?![A-Za-z0-9_])
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)(?![A-Za-z0-9_.])
  | (?P<ident>[A-Za-z0-9_]*[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/(),])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # duration number ident op eol
    text: str
    line: int
    column: int


def _tokenize_line(text: str, line_no: int) -> list[Token]:
    code = text.split("#", 1)[0]
    pos = 0
    tokens = []
    while pos < len(code):
        m = _TOKEN_RE.match(code, pos)
        if m is None:
            raise DslParseError(f"unexpected character {code[pos]!r}", line_no, pos + 1)
        if m.lastgroup != "ws":
            tokens.append(Token(m.lastgroup, m.group(), line_no, pos + 1))
        pos = m.end()
    tokens.append(Token("eol", "", line_no, len(code.rstrip()) + 1))
    return tokens


def is_identifier(name: str) -> bool:
    if name in KEYWORDS or "#" in name:
        return False
    try:
        toks = _tokenize_line(name, 1)
    except DslParseError:
        return False
    return len(toks) == 2 and toks[0].kind == "ident" and toks[0].text == name


def parse_duration(text: str) -> int:
    m = re.fullmatch(r"(\d+)(ms|s|m|h|d)", text)
    if not m:
        raise ValueError(f"bad duration {text!r}")
    return int(m.group(1)) * UNIT_MS[m.group(2)]


def format_duration(ms: int) -> str:
    for unit in ("d", "h", "m", "s"):
        if ms % UNIT_MS[unit] == 0:
            return f"{ms // UNIT_MS[unit]}{unit}"
    return f"{ms}ms"


# --------------------------------------------------------------------------- parser


class _LineParser:
    def __init__(self, tokens: list[Token]):
        self.toks = tokens
        self.i = 0

    @property
    def cur(self) -> Token:
        return self.toks[self.i]

    def fail(self, expected, what: Optional[str] = None):
        tok = self.cur
        got = "end of line" if tok.kind == "eol" else repr(tok.text)
        raise DslParseError(what or f"unexpected {got}", tok.line, tok.column, expected)

    def advance(self) -> Token:
        tok = self.cur
        self.i += 1
        return tok

    def expect_op(self, op: str) -> Token:
        if self.cur.kind == "op" and self.cur.text == op:
            return self.advance()
        self.fail({repr(op)})

    def expect_keyword(self, kw: str) -> Token:
        if self.cur.kind == "ident" and self.cur.text == kw:
            return self.advance()
        self.fail({kw})

    def expect_name(self) -> str:
        if self.cur.kind == "ident" and self.cur.text not in KEYWORDS:
            return self.advance().text
        self.fail({"identifier"})

    def expect_eol(self):
        if self.cur.kind != "eol":
            self.fail({"end of line"})

    # expr := term (('+'|'-') term)* ; term := unary (('*'|'/') unary)*
    def expr(self) -> Expr:
        left = self.term()
        while self.cur.kind == "op" and self.cur.text in "+-":
            op = self.advance().text
            left = BinOp(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.cur.kind == "op" and self.cur.text in "*/":
            op_tok = self.advance()
            right = self.unary()
            if op_tok.text == "/" and _is_zero_literal(right):
                raise DslParseError("division by literal zero", op_tok.line, op_tok.column)
            left = BinOp(op_tok.text, left, right)
        return left

    def unary(self) -> Expr:
        if self.cur.kind == "op" and self.cur.text == "-":
            self.advance()
            # a minus directly followed by a number literal is a negative literal
            if self.cur.kind == "number":
                return Num(-_number(self.advance().text))
            return Neg(self.unary())
        return self.primary()

    def primary(self) -> Expr:
        tok = self.cur
        if tok.kind == "number":
            self.advance()
            return Num(_number(tok.text))
        if tok.kind == "ident" and tok.text not in KEYWORDS:
            self.advance()
            return Col(tok.text)
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            inner = self.expr()
            self.expect_op(")")
            return inner
        self.fail({"number", "identifier", "'('", "'-'"})


def _number(text: str) -> Union[int, float]:
    if re.fullmatch(r"\d+", text):
        return int(text)
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(text)
    return value


def parse(text: str) -> DslProgram:
    aggs: list[AggSpec] = []
    exprs: list[RowExpr] = []
    group_keys = None
    ts_col = None
    seen: set[str] = set()

    def claim(name: str, tok: Token):
        if name in seen:
            raise DslParseError(f"duplicate output name {name!r}", tok.line, tok.column)
        seen.add(name)

    for line_no, line in enumerate(text.splitlines(), start=1):
        p = _LineParser(_tokenize_line(line, line_no))
        head = p.cur
        if head.kind == "eol":
            continue
        if head.kind != "ident" or head.text not in ("agg", "expr", "group", "timestamp"):
            p.fail({"agg", "expr", "group", "timestamp"})
        p.advance()
        if head.text == "agg":
            fn_tok = p.cur
            if fn_tok.kind != "ident" or fn_tok.text not in AGG_FUNCTIONS:
                p.fail(set(AGG_FUNCTIONS))
            p.advance()
            p.expect_op("(")
            col = p.expect_name()
            p.expect_op(")")
            p.expect_keyword("over")
            if p.cur.kind != "duration":
                p.fail({"duration"})
            dur_tok = p.advance()
            window = parse_duration(dur_tok.text)
            if window <= 0:
                raise DslParseError("window must be positive", dur_tok.line, dur_tok.column)
            p.expect_keyword("as")
            name_tok = p.cur
            name = p.expect_name()
            p.expect_eol()
            claim(name, name_tok)
            aggs.append(AggSpec(name, fn_tok.text, col, window))
        elif head.text == "expr":
            e = p.expr()
            p.expect_keyword("as")
            name_tok = p.cur
            name = p.expect_name()
            p.expect_eol()
            claim(name, name_tok)
            exprs.append(RowExpr(name, e))
        elif head.text == "group":
            p.expect_keyword("by")
            if group_keys is not None:
                raise DslParseError("duplicate group by", head.line, head.column)
            keys = [p.expect_name()]
            while p.cur.kind == "op" and p.cur.text == ",":
                p.advance()
                keys.append(p.expect_name())
            p.expect_eol()
            group_keys = tuple(keys)
        else:
            if ts_col is not None:
                raise DslParseError("duplicate timestamp", head.line, head.column)
            ts_col = p.expect_name()
            p.expect_eol()

    if not aggs and not exprs:
        raise DslParseError("program has no agg or expr statement", 1, 1, {"agg", "expr"})
    return DslProgram(tuple(aggs), tuple(exprs), group_keys, ts_col)


# --------------------------------------------------------------------- pretty print

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _prec(e: Expr) -> int:
    if isinstance(e, BinOp):
        return _PREC[e.op]
    if isinstance(e, Neg):
        return 3
    return 4


def _fmt_num(v: Union[int, float]) -> str:
    return str(v) if isinstance(v, int) else repr(v)


def format_expr(e: Expr) -> str:
    if isinstance(e, Col):
        return e.name
    if isinstance(e, Num):
        return _fmt_num(e.value)
    if isinstance(e, Neg):
        inner = format_expr(e.operand)
        # "-3" would read back as a negative literal, and "--x" is fine
        if isinstance(e.operand, Num) or _prec(e.operand) < 3:
            inner = f"({inner})"
        return f"-{inner}"
    left = format_expr(e.left)
    right = format_expr(e.right)
    if _prec(e.left) < _PREC[e.op]:
        left = f"({left})"
    if _prec(e.right) <= _PREC[e.op]:
        right = f"({right})"
    return f"{left} {e.op} {right}"


def pretty_print(p: DslProgram) -> str:
    lines = []
    if p.group_keys is not None:
        lines.append("group by " + ", ".join(p.group_keys))
    if p.timestamp_column is not None:
        lines.append(f"timestamp {p.timestamp_column}")
    for a in p.aggregations:
        lines.append(f"agg {a.function}({a.column}) over {format_duration(a.window)} as {a.output}")
    for r in p.row_exprs:
        lines.append(f"expr {format_expr(r.expr)} as {r.output}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------- bind


@dataclass(frozen=True)
class BoundProgram:
    program: DslProgram
    group_keys: tuple[str, ...]
    timestamp_column: str
    output_timestamp_column: str
    interval: int
    source_types: dict
    output_schema: tuple[tuple[str, str], ...]

    @property
    def horizon(self) -> int:
        return required_lookback(self.program, self.interval)


def required_lookback(p: DslProgram, interval: int) -> int:
    if p.aggregations:
        return max(a.window for a in p.aggregations)
    return interval


def _expr_type(e: Expr, types: dict[str, str]) -> str:
    if isinstance(e, Num):
        return "int64" if isinstance(e.value, int) else "float64"
    if isinstance(e, Col):
        t = types[e.name]
        if t not in NUMERIC_TYPES:
            raise TypeMismatch(f"column {e.name!r} of type {t} used in arithmetic")
        return t
    if isinstance(e, Neg):
        return _expr_type(e.operand, types)
    lt, rt = _expr_type(e.left, types), _expr_type(e.right, types)
    if e.op == "/" or "float64" in (lt, rt):
        return "float64"
    return "int64"


def bind(
    p: DslProgram,
    source_schema: list[tuple[str, str]],
    entity_index_columns: list[str],
    timestamp_column: str,
    interval: int,
    output_timestamp_column: Optional[str] = None,
) -> BoundProgram:
    types = dict(source_schema)
    if interval <= 0:
        raise ValueError("interval must be positive")
    ts_col = p.timestamp_column or timestamp_column
    if p.group_keys is not None and set(p.group_keys) != set(entity_index_columns):
        raise SchemaConflict(
            f"group by {list(p.group_keys)} differs from entity index {entity_index_columns}"
        )
    keys = tuple(entity_index_columns)
    for col in keys + (ts_col,):
        if col not in types:
            raise UnknownColumn(f"column {col!r} not in source")
    if types[ts_col] != "int64":
        raise TypeMismatch(f"timestamp column {ts_col!r} must be int64")

    out_ts = output_timestamp_column or ts_col
    outputs: list[tuple[str, str]] = []
    for a in p.aggregations:
        if a.column not in types:
            raise UnknownColumn(f"column {a.column!r} not in source")
        in_type = types[a.column]
        if a.function in ("sum", "avg", "min", "max") and in_type not in NUMERIC_TYPES:
            raise TypeMismatch(f"{a.function}({a.column}) needs a numeric column, got {in_type}")
        if a.function == "count":
            out = "int64"
        elif a.function == "avg":
            out = "float64"
        else:
            out = in_type
        outputs.append((a.output, out))
    for r in p.row_exprs:
        for col in expr_columns(r.expr):
            if col not in types:
                raise UnknownColumn(f"column {col!r} not in source")
        outputs.append((r.output, _expr_type(r.expr, types)))

    schema = [(k, types[k]) for k in keys] + [(out_ts, "int64")] + outputs
    names = [n for n, _ in schema]
    if len(set(names)) != len(names):
        raise SchemaConflict(f"output columns collide: {names}")
    return BoundProgram(p, keys, ts_col, out_ts, interval, types, tuple(schema))


# -------------------------------------------------------------------------- execute


def eval_expr(e: Expr, row: dict[str, Any]) -> Any:
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Col):
        return row[e.name]
    if isinstance(e, Neg):
        v = eval_expr(e.operand, row)
        return None if v is None else -v
    a, b = eval_expr(e.left, row), eval_expr(e.right, row)
    if a is None or b is None:
        return None
    if e.op == "+":
        return a + b
    if e.op == "-":
        return a - b
    if e.op == "*":
        return a * b
    if b == 0:
        return None
    return a / b


def grid_points(lo: int, hi: int, interval: int) -> range:
    """Multiples of ``interval`` in ``[lo, hi)``."""
    first = -(-lo // interval) * interval
    return range(first, hi, interval)


class _AggState:
    """Sliding state of one aggregation over one group's time-sorted rows."""

    def __init__(self, spec: AggSpec, values: list, in_type: str):
        self.spec = spec
        self.values = values
        # exact accumulator per type; strings are only counted
        self.exact = {"float64": Fraction, "int64": int}.get(in_type)
        self.lo = 0
        self.hi = 0
        self.total = 0
        self.count = 0
        self.minq: deque = deque()
        self.maxq: deque = deque()

    def _push(self, i: int):
        v = self.values[i]
        if v is None:
            return
        self.count += 1
        if self.exact is not None:
            self.total += self.exact(v)
        while self.minq and self.minq[-1][1] >= v:
            self.minq.pop()
        self.minq.append((i, v))
        while self.maxq and self.maxq[-1][1] <= v:
            self.maxq.pop()
        self.maxq.append((i, v))

    def _pop(self, i: int):
        v = self.values[i]
        if v is None:
            return
        self.count -= 1
        if self.exact is not None:
            self.total -= self.exact(v)
        if self.minq and self.minq[0][0] == i:
            self.minq.popleft()
        if self.maxq and self.maxq[0][0] == i:
            self.maxq.popleft()

    def advance(self, ts: list[int], hi: int, t: int):
        while self.hi < hi:
            self._push(self.hi)
            self.hi += 1
        lower = t - self.spec.window
        while self.lo < self.hi and ts[self.lo] < lower:
            self._pop(self.lo)
            self.lo += 1

    def value(self):
        fn = self.spec.function
        if fn == "count":
            return self.count
        if fn == "sum":
            return float(self.total) if self.exact is Fraction else self.total
        if fn == "latest":
            return self.values[self.hi - 1] if self.hi > self.lo else None
        if self.count == 0:
            return None
        if fn == "avg":
            return float(Fraction(self.total) / self.count)
        if fn == "min":
            return self.minq[0][1]
        return self.maxq[0][1]


def execute(bp: BoundProgram, source: Frame, feature_window: FeatureWindow) -> Frame:
    """Run a bound program over ``source`` and emit rows inside ``feature_window``.

    Single pass per group over time-sorted rows; each aggregation keeps its
    own sliding lower bound plus monotonic deques for min/max. Float sums are
    accumulated exactly and rounded once.
    """
    cols = source.columns
    src_types = source.types()
    for col, t in bp.source_types.items():
        if col in src_types and src_types[col] != t:
            raise TypeMismatch(f"column {col!r} is {src_types[col]}, program bound to {t}")
    key_idx = [cols.index(k) for k in bp.group_keys]
    ts_idx = cols.index(bp.timestamp_column)

    groups: dict[tuple, list[tuple]] = {}
    for row in source.rows:
        key = tuple(row[i] for i in key_idx)
        if row[ts_idx] is None or None in key:
            continue
        groups.setdefault(key, []).append(row)

    horizon = bp.horizon
    interval = bp.interval
    prog = bp.program
    agg_cols = [cols.index(a.column) for a in prog.aggregations]
    out_rows = []
    for key in sorted(groups):
        rows = sorted(groups[key], key=lambda r: r[ts_idx])  # stable: keeps source order on ties
        ts = [r[ts_idx] for r in rows]
        states = [
            _AggState(a, [r[ci] for r in rows], src_types[a.column])
            for a, ci in zip(prog.aggregations, agg_cols)
        ]
        # output instants: t with some row in [t - horizon, t), i.e. t in (ts, ts + horizon]
        spans: list[list[int]] = []
        for x in ts:
            s, e = max(x + 1, feature_window.start_ts), min(x + horizon + 1, feature_window.end_ts)
            if s >= e:
                continue
            if spans and s <= spans[-1][1]:
                spans[-1][1] = max(spans[-1][1], e)
            else:
                spans.append([s, e])
        hi = 0
        for s, e in spans:
            for t in grid_points(s, e, interval):
                while hi < len(rows) and ts[hi] < t:
                    hi += 1
                out = list(key) + [t]
                for st in states:
                    st.advance(ts, hi, t)
                    out.append(st.value())
                if prog.row_exprs:
                    last = dict(zip(cols, rows[hi - 1]))
                    out.extend(eval_expr(r.expr, last) for r in prog.row_exprs)
                out_rows.append(tuple(out))
    return Frame(list(bp.output_schema), out_rows)
