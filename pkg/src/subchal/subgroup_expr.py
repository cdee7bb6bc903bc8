"""Subgroup definition expressions: parsing, printing and evaluation.

Grammar, loosest binding first::

    expr  := or
    or    := and ('|' and)*
    and   := cmp ('&' cmp)*
    cmp   := sum (('>'|'>='|'<'|'<='|'=='|'!=') sum)?   # non-associative
    sum   := term (('+'|'-') term)*
    term  := unary (('*'|'/') unary)*
    unary := ('!'|'-') unary | atom
    atom  := NUMBER | STRING | IDENT | '(' expr ')'

Identifiers name covariates; ``true``/``false`` (any case) are numeric
literals 1 and 0. The root of an expression must be boolean-valued.

Evaluation is three-valued: any comparison or arithmetic touching a
missing covariate is unknown, ``unknown & false`` is false and
``unknown | true`` is true. Division by zero is unknown. A boolean
comparison result used in arithmetic coerces to 1/0, and boolean
covariates compare equal to the strings 'Yes'/'No'.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass
from typing import Union

from .trial_data import SubjectRecord, TrialDataset


class ParseError(ValueError):
    """Syntax or static type error in an expression, with position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class EvalError(ValueError):
    """An expression cannot be evaluated against a subject."""


@dataclass(frozen=True)
class Number:
    value: float


@dataclass(frozen=True)
class String:
    value: str


@dataclass(frozen=True)
class Ref:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str  # "!" or "-"
    operand: "SubgroupExpr"


@dataclass(frozen=True)
class Arith:
    op: str  # one of + - * /
    left: "SubgroupExpr"
    right: "SubgroupExpr"


@dataclass(frozen=True)
class Compare:
    op: str  # one of > >= < <= == !=
    left: "SubgroupExpr"
    right: "SubgroupExpr"


@dataclass(frozen=True)
class Logic:
    op: str  # "&" or "|"
    left: "SubgroupExpr"
    right: "SubgroupExpr"


SubgroupExpr = Union[Number, String, Ref, Unary, Arith, Compare, Logic]


class TriState(enum.Enum):
    IN = "in"
    OUT = "out"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class MembershipVector:
    subject_ids: tuple[str, ...]
    flags: tuple[bool, ...]
    unknown_count: int

    @property
    def size(self) -> int:
        return sum(self.flags)


# Static value kinds used while parsing. ANY marks covariate references,
# whose kind is only known against a schema at evaluation time.
_NUM, _STR, _BOOL, _ANY = "number", "string", "boolean", "any"

_TOKEN_RE = re.compile(
    r"""(?P<ws>\s+)
      | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
      | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
      | (?P<string>'[^'\\]*'|\"[^\"\\]*\")
      | (?P<op><=|>=|==|!=|[<>!&|+\-*/()])
    """,
    re.VERBOSE,
)

_CMP_OPS = (">", ">=", "<", "<=", "==", "!=")
_ORDER_OPS = (">", ">=", "<", "<=")


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unknown token {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append((kind, m.group(), pos))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def advance(self) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def parse(self) -> SubgroupExpr:
        node, kind = self.or_expr()
        tok_kind, text, pos = self.peek()
        if tok_kind != "end":
            raise ParseError(f"unexpected {text!r}", pos)
        if kind not in (_BOOL, _ANY):
            raise ParseError("expression is not boolean-valued", 0)
        return node

    def or_expr(self):
        node, kind = self.and_expr()
        while self.peek()[:2] == ("op", "|"):
            _, _, pos = self.advance()
            self._want_bool(kind, "|", pos)
            right, rkind = self.and_expr()
            self._want_bool(rkind, "|", pos)
            node, kind = Logic("|", node, right), _BOOL
        return node, kind

    def and_expr(self):
        node, kind = self.cmp_expr()
        while self.peek()[:2] == ("op", "&"):
            _, _, pos = self.advance()
            self._want_bool(kind, "&", pos)
            right, rkind = self.cmp_expr()
            self._want_bool(rkind, "&", pos)
            node, kind = Logic("&", node, right), _BOOL
        return node, kind

    def cmp_expr(self):
        node, kind = self.sum_expr()
        tok_kind, text, pos = self.peek()
        if tok_kind == "op" and text in _CMP_OPS:
            self.advance()
            if text in _ORDER_OPS:
                self._want_num(kind, text, pos)
            right, rkind = self.sum_expr()
            if text in _ORDER_OPS:
                self._want_num(rkind, text, pos)
            node, kind = Compare(text, node, right), _BOOL
            nk, ntext, npos = self.peek()
            if nk == "op" and ntext in _CMP_OPS:
                raise ParseError("comparisons cannot be chained", npos)
        return node, kind

    def sum_expr(self):
        node, kind = self.term_expr()
        while self.peek()[0] == "op" and self.peek()[1] in ("+", "-"):
            _, op, pos = self.advance()
            self._want_num(kind, op, pos)
            right, rkind = self.term_expr()
            self._want_num(rkind, op, pos)
            node, kind = Arith(op, node, right), _NUM
        return node, kind

    def term_expr(self):
        node, kind = self.unary_expr()
        while self.peek()[0] == "op" and self.peek()[1] in ("*", "/"):
            _, op, pos = self.advance()
            self._want_num(kind, op, pos)
            right, rkind = self.unary_expr()
            self._want_num(rkind, op, pos)
            node, kind = Arith(op, node, right), _NUM
        return node, kind

    def unary_expr(self):
        tok_kind, text, pos = self.peek()
        if tok_kind == "op" and text == "!":
            self.advance()
            operand, kind = self.unary_expr()
            self._want_bool(kind, "!", pos)
            return Unary("!", operand), _BOOL
        if tok_kind == "op" and text == "-":
            self.advance()
            operand, kind = self.unary_expr()
            self._want_num(kind, "-", pos)
            return Unary("-", operand), _NUM
        return self.atom()

    def atom(self):
        tok_kind, text, pos = self.advance()
        if tok_kind == "number":
            return Number(float(text)), _NUM
        if tok_kind == "string":
            return String(text[1:-1]), _STR
        if tok_kind == "ident":
            if text.lower() == "true":
                return Number(1.0), _NUM
            if text.lower() == "false":
                return Number(0.0), _NUM
            return Ref(text), _ANY
        if tok_kind == "op" and text == "(":
            node, kind = self.or_expr()
            nk, ntext, npos = self.advance()
            if (nk, ntext) != ("op", ")"):
                raise ParseError("expected ')'", npos)
            return node, kind
        raise ParseError(f"expected a value, found {text!r}" if text else "unexpected end of expression", pos)

    @staticmethod
    def _want_bool(kind: str, op: str, pos: int) -> None:
        if kind not in (_BOOL, _ANY):
            raise ParseError(f"operand of {op!r} is not boolean", pos)

    @staticmethod
    def _want_num(kind: str, op: str, pos: int) -> None:
        if kind == _STR:
            raise ParseError(f"string operand is not allowed for {op!r}", pos)


def parse(text: str) -> SubgroupExpr:
    """Parse an expression into its AST. Raises ParseError with position."""
    return _Parser(text).parse()


_LEVEL_OR, _LEVEL_AND, _LEVEL_CMP, _LEVEL_SUM, _LEVEL_TERM, _LEVEL_UNARY, _LEVEL_ATOM = range(1, 8)


def _level(node: SubgroupExpr) -> int:
    if isinstance(node, Logic):
        return _LEVEL_OR if node.op == "|" else _LEVEL_AND
    if isinstance(node, Compare):
        return _LEVEL_CMP
    if isinstance(node, Arith):
        return _LEVEL_SUM if node.op in ("+", "-") else _LEVEL_TERM
    if isinstance(node, Unary):
        return _LEVEL_UNARY
    return _LEVEL_ATOM


def _format_number(value: float) -> str:
    if value == int(value) and abs(value) < 1e16:
        return str(int(value))
    return repr(value)


def format_expr(expr: SubgroupExpr) -> str:
    """Canonical text form; parse(format_expr(e)) is structurally equal to e."""
    if isinstance(expr, Number):
        return _format_number(expr.value)
    if isinstance(expr, String):
        return f"'{expr.value}'"
    if isinstance(expr, Ref):
        return expr.name
    if isinstance(expr, Unary):
        inner = format_expr(expr.operand)
        if _level(expr.operand) < _LEVEL_UNARY:
            inner = f"({inner})"
        return f"{expr.op}{inner}"
    level = _level(expr)
    left = format_expr(expr.left)
    right = format_expr(expr.right)
    if isinstance(expr, Compare):
        # non-associative: parenthesize same-level operands on both sides
        if _level(expr.left) <= level:
            left = f"({left})"
        if _level(expr.right) <= level:
            right = f"({right})"
    else:
        if _level(expr.left) < level:
            left = f"({left})"
        if _level(expr.right) <= level:
            right = f"({right})"
    return f"{left} {expr.op} {right}"


def variables_used(expr: SubgroupExpr) -> set[str]:
    """Distinct covariate names referenced anywhere in the AST."""
    if isinstance(expr, Ref):
        return {expr.name}
    if isinstance(expr, Unary):
        return variables_used(expr.operand)
    if isinstance(expr, (Arith, Compare, Logic)):
        return variables_used(expr.left) | variables_used(expr.right)
    return set()


_Value = Union[float, str, bool, None]


def _as_number(value: _Value, context: str) -> float:
    if isinstance(value, bool):
        return 1.0 if value else 0.0
    if isinstance(value, float):
        return value
    raise EvalError(f"string value in {context}")


def _equal(a: _Value, b: _Value) -> bool:
    if isinstance(a, bool) or isinstance(b, bool):
        if isinstance(a, bool) and isinstance(b, bool):
            return a == b
        flag, other = (a, b) if isinstance(a, bool) else (b, a)
        if isinstance(other, float):
            return (1.0 if flag else 0.0) == other
        if other in ("Yes", "No"):
            return flag == (other == "Yes")
        raise EvalError(f"cannot compare a boolean with {other!r}")
    if isinstance(a, str) != isinstance(b, str):
        raise EvalError("cannot compare a number with a string")
    return a == b


def _eval(expr: SubgroupExpr, covariates: dict[str, _Value]) -> _Value:
    if isinstance(expr, Number):
        return expr.value
    if isinstance(expr, String):
        return expr.value
    if isinstance(expr, Ref):
        if expr.name not in covariates:
            raise EvalError(f"unknown covariate {expr.name!r}")
        return covariates[expr.name]
    if isinstance(expr, Unary):
        value = _eval(expr.operand, covariates)
        if value is None:
            return None
        if expr.op == "-":
            return -_as_number(value, "arithmetic")
        if not isinstance(value, bool):
            raise EvalError("'!' needs a boolean operand")
        return not value
    if isinstance(expr, Arith):
        left = _eval(expr.left, covariates)
        right = _eval(expr.right, covariates)
        if left is None or right is None:
            return None
        a = _as_number(left, "arithmetic")
        b = _as_number(right, "arithmetic")
        if expr.op == "+":
            result = a + b
        elif expr.op == "-":
            result = a - b
        elif expr.op == "*":
            result = a * b
        else:
            if b == 0.0:
                return None
            result = a / b
        return result if math.isfinite(result) else None
    if isinstance(expr, Compare):
        left = _eval(expr.left, covariates)
        right = _eval(expr.right, covariates)
        if left is None or right is None:
            return None
        if expr.op == "==":
            return _equal(left, right)
        if expr.op == "!=":
            return not _equal(left, right)
        a = _as_number(left, "an order comparison")
        b = _as_number(right, "an order comparison")
        if expr.op == ">":
            return a > b
        if expr.op == ">=":
            return a >= b
        if expr.op == "<":
            return a < b
        return a <= b
    # Logic node; operands are evaluated strictly (no short circuit) so
    # type errors surface regardless of the other side.
    left = _eval(expr.left, covariates)
    right = _eval(expr.right, covariates)
    for v in (left, right):
        if v is not None and not isinstance(v, bool):
            raise EvalError(f"{expr.op!r} needs boolean operands")
    if expr.op == "&":
        if left is False or right is False:
            return False
        if left is None or right is None:
            return None
        return True
    if left is True or right is True:
        return True
    if left is None or right is None:
        return None
    return False


def evaluate(expr: SubgroupExpr, subject: SubjectRecord) -> TriState:
    """Evaluate one subject to in / out / unknown under Kleene logic."""
    value = _eval(expr, subject.covariates)
    if value is None:
        return TriState.UNKNOWN
    if value is True:
        return TriState.IN
    if value is False:
        return TriState.OUT
    raise EvalError("subgroup expression is not boolean-valued")


def membership(expr: SubgroupExpr, ds: TrialDataset) -> MembershipVector:
    """Per-subject membership flags in dataset order.

    Unknown evaluations are conservative: the subject is flagged out of
    the subgroup and counted in unknown_count.
    """
    unknown_names = variables_used(expr) - set(ds.schema.names)
    if unknown_names:
        raise EvalError(f"unknown covariate(s): {', '.join(sorted(unknown_names))}")
    flags = []
    unknown = 0
    for subject in ds.subjects:
        state = evaluate(expr, subject)
        flags.append(state is TriState.IN)
        if state is TriState.UNKNOWN:
            unknown += 1
    return MembershipVector(
        subject_ids=tuple(s.subject_id for s in ds.subjects),
        flags=tuple(flags),
        unknown_count=unknown,
    )


def jaccard_distance(a: MembershipVector, b: MembershipVector) -> float:
    """1 minus intersection over union of the two member sets; 0 if both empty."""
    if a.subject_ids != b.subject_ids:
        raise ValueError("membership vectors cover different subject lists")
    set_a = {i for i, f in enumerate(a.flags) if f}
    set_b = {i for i, f in enumerate(b.flags) if f}
    union = len(set_a | set_b)
    if union == 0:
        return 0.0
    return 1.0 - len(set_a & set_b) / union
