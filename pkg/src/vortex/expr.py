"""Closed expression language for resource formulas, rule conditions and templates.

Values are 64-bit floats, strings, booleans or lists of strings. There is no
implicit coercion between them: ``1 + "a"`` and ``1 == "1"`` are type errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence, Union

Value = Union[float, str, bool, tuple]

KEYWORDS = {"and", "or", "not", "true", "false"}
COMPARISONS = ("<=", ">=", "==", "!=", "<", ">")
FUNCTIONS = {"int", "float", "min", "max", "ceil", "floor", "contains"}


class ExpressionError(Exception):
    """Base class for every lexing, parsing and evaluation failure."""

    def __init__(self, message: str, offset: int | None = None, source: str | None = None):
        self.message = message
        self.offset = offset
        self.source = source
        super().__init__(self._render())

    def _render(self) -> str:
        if self.offset is None:
            return self.message
        return f"{self.message} (at offset {self.offset})"


class ExprSyntaxError(ExpressionError):
    """Raised for lexical and grammatical errors; ``offset`` is a byte offset."""

    def __init__(self, message: str, offset: int, source: str, expected: Sequence[str] = ()):
        self.expected = tuple(expected)
        super().__init__(message, offset, source)

    def _render(self) -> str:
        text = super()._render()
        if self.expected:
            text += f"; expected {' or '.join(self.expected)}"
        return text


class ExprEvalError(ExpressionError):
    pass


class UnboundIdentifier(ExprEvalError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unbound identifier {name!r}")


class ExprTypeError(ExprEvalError):
    pass


class DivisionByZero(ExprEvalError):
    pass


# --------------------------------------------------------------------- AST


@dataclass(frozen=True)
class Literal:
    value: Value


@dataclass(frozen=True)
class Name:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    operand: "Node"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


Node = Union[Literal, Name, Unary, Binary, Call]


@dataclass(frozen=True)
class Expression:
    """A parsed expression that remembers its source text."""

    source: str
    ast: Node

    def __str__(self) -> str:
        return self.source

    def identifiers(self) -> frozenset[str]:
        return _identifiers(self.ast)

    def evaluate(self, bindings: Mapping[str, Value]) -> Value:
        return evaluate(self, bindings)


def _identifiers(node: Node) -> frozenset[str]:
    if isinstance(node, Name):
        return frozenset({node.name})
    if isinstance(node, Unary):
        return _identifiers(node.operand)
    if isinstance(node, Binary):
        return _identifiers(node.left) | _identifiers(node.right)
    if isinstance(node, Call):
        out: frozenset[str] = frozenset()
        for arg in node.args:
            out |= _identifiers(arg)
        return out
    return frozenset()


# ------------------------------------------------------------------- lexer


@dataclass(frozen=True)
class Token:
    kind: str  # NUM, STR, NAME, OP, EOF
    text: str
    value: Value | None
    offset: int  # character offset; converted to bytes for errors


def _byte_offset(source: str, index: int) -> int:
    return len(source[:index].encode("utf-8", "surrogatepass"))


def _tokenize(source: str) -> list[Token]:
    tokens: list[Token] = []
    i, n = 0, len(source)
    while i < n:
        ch = source[i]
        if ch in " \t\r\n":
            i += 1
            continue
        start = i
        if ch.isascii() and (ch.isdigit() or (ch == "." and i + 1 < n and source[i + 1].isascii() and source[i + 1].isdigit())):
            while i < n and source[i].isascii() and source[i].isdigit():
                i += 1
            if i < n and source[i] == ".":
                i += 1
                while i < n and source[i].isascii() and source[i].isdigit():
                    i += 1
            if i < n and source[i] in "eE":
                j = i + 1
                if j < n and source[j] in "+-":
                    j += 1
                if j < n and source[j].isascii() and source[j].isdigit():
                    i = j
                    while i < n and source[i].isascii() and source[i].isdigit():
                        i += 1
            text = source[start:i]
            tokens.append(Token("NUM", text, float(text), start))
            continue
        if ch.isascii() and (ch.isalpha() or ch == "_"):
            while i < n and source[i].isascii() and (source[i].isalnum() or source[i] == "_"):
                i += 1
            text = source[start:i]
            kind = "OP" if text in KEYWORDS else "NAME"
            tokens.append(Token(kind, text, None, start))
            continue
        if ch in "'\"":
            quote = ch
            i += 1
            chars = []
            while i < n and source[i] != quote:
                if source[i] == "\\" and i + 1 < n:
                    esc = source[i + 1]
                    chars.append({"n": "\n", "t": "\t"}.get(esc, esc))
                    i += 2
                    continue
                chars.append(source[i])
                i += 1
            if i >= n:
                raise ExprSyntaxError("unterminated string literal", _byte_offset(source, start), source, (quote,))
            i += 1
            tokens.append(Token("STR", source[start:i], "".join(chars), start))
            continue
        two = source[i : i + 2]
        if two in ("<=", ">=", "==", "!="):
            tokens.append(Token("OP", two, None, start))
            i += 2
            continue
        if ch in "+-*/%<>(),":
            tokens.append(Token("OP", ch, None, start))
            i += 1
            continue
        raise ExprSyntaxError(f"unexpected character {ch!r}", _byte_offset(source, start), source)
    tokens.append(Token("EOF", "", None, n))
    return tokens


# ------------------------------------------------------------------ parser


class _Parser:
    # or < and < not < comparison < additive < multiplicative < unary < call

    def __init__(self, source: str):
        self.source = source
        self.tokens = _tokenize(source)
        self.pos = 0

    def peek(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def error(self, message: str, tok: Token, expected: Sequence[str] = ()) -> ExprSyntaxError:
        return ExprSyntaxError(message, _byte_offset(self.source, tok.offset), self.source, expected)

    def at_op(self, *ops: str) -> bool:
        tok = self.peek()
        return tok.kind == "OP" and tok.text in ops

    def expect_op(self, op: str) -> Token:
        tok = self.peek()
        if tok.kind == "OP" and tok.text == op:
            return self.advance()
        found = "end of input" if tok.kind == "EOF" else repr(tok.text)
        raise self.error(f"unexpected {found}", tok, (repr(op),))

    def parse(self) -> Node:
        node = self.parse_or()
        tok = self.peek()
        if tok.kind != "EOF":
            raise self.error(f"unexpected {tok.text!r}", tok, ("operator", "end of input"))
        return node

    def parse_or(self) -> Node:
        node = self.parse_and()
        while self.at_op("or"):
            self.advance()
            node = Binary("or", node, self.parse_and())
        return node

    def parse_and(self) -> Node:
        node = self.parse_not()
        while self.at_op("and"):
            self.advance()
            node = Binary("and", node, self.parse_not())
        return node

    def parse_not(self) -> Node:
        if self.at_op("not"):
            self.advance()
            return Unary("not", self.parse_not())
        return self.parse_comparison()

    def parse_comparison(self) -> Node:
        node = self.parse_additive()
        if self.at_op(*COMPARISONS):
            op = self.advance().text
            node = Binary(op, node, self.parse_additive())
            if self.at_op(*COMPARISONS):
                raise self.error("chained comparisons are not supported", self.peek(), ("parentheses",))
        return node

    def parse_additive(self) -> Node:
        node = self.parse_multiplicative()
        while self.at_op("+", "-"):
            op = self.advance().text
            node = Binary(op, node, self.parse_multiplicative())
        return node

    def parse_multiplicative(self) -> Node:
        node = self.parse_unary()
        while self.at_op("*", "/", "%"):
            op = self.advance().text
            node = Binary(op, node, self.parse_unary())
        return node

    def parse_unary(self) -> Node:
        if self.at_op("-", "+"):
            op = self.advance().text
            return Unary(op, self.parse_unary())
        return self.parse_primary()

    def parse_primary(self) -> Node:
        tok = self.peek()
        if tok.kind in ("NUM", "STR"):
            self.advance()
            return Literal(tok.value)
        if tok.kind == "OP" and tok.text in ("true", "false"):
            self.advance()
            return Literal(tok.text == "true")
        if tok.kind == "NAME":
            self.advance()
            if self.at_op("("):
                return self.parse_call(tok)
            return Name(tok.text)
        if self.at_op("("):
            self.advance()
            node = self.parse_or()
            self.expect_op(")")
            return node
        found = "end of input" if tok.kind == "EOF" else repr(tok.text)
        raise self.error(f"unexpected {found}", tok, ("number", "string", "identifier", "'('"))

    def parse_call(self, name_tok: Token) -> Node:
        if name_tok.text not in FUNCTIONS:
            raise self.error(f"unknown function {name_tok.text!r}", name_tok, tuple(sorted(FUNCTIONS)))
        self.expect_op("(")
        args = []
        if not self.at_op(")"):
            args.append(self.parse_or())
            while self.at_op(","):
                self.advance()
                args.append(self.parse_or())
        self.expect_op(")")
        arity = _ARITY[name_tok.text]
        if not arity[0] <= len(args) <= arity[1]:
            raise self.error(f"{name_tok.text}() takes {_arity_text(arity)} argument(s), got {len(args)}", name_tok)
        return Call(name_tok.text, tuple(args))


_ARITY = {
    "int": (1, 1),
    "float": (1, 1),
    "ceil": (1, 1),
    "floor": (1, 1),
    "min": (2, 64),
    "max": (2, 64),
    "contains": (2, 2),
}


def _arity_text(arity: tuple[int, int]) -> str:
    lo, hi = arity
    return str(lo) if lo == hi else f"at least {lo}"


@lru_cache(maxsize=4096)
def parse(source: str | bytes) -> Expression:
    """Parse ``source`` into an :class:`Expression`.

    Raises :class:`ExprSyntaxError` carrying the byte offset of the offending
    token and a hint of what was expected there.
    """
    if isinstance(source, bytes):
        try:
            source = source.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ExprSyntaxError("source is not valid UTF-8", exc.start, repr(source)) from None
    if not isinstance(source, str):
        raise TypeError(f"expression source must be str, not {type(source).__name__}")
    try:
        return Expression(source, _Parser(source).parse())
    except RecursionError:
        raise ExprSyntaxError("expression nested too deeply", 0, source) from None


def literal(value: float | int | bool | str) -> Expression:
    """Wrap a plain config scalar (``cores: 12``) as an expression."""
    if isinstance(value, bool):
        return Expression("true" if value else "false", Literal(value))
    if isinstance(value, (int, float)):
        return Expression(render(float(value)), Literal(float(value)))
    return parse(value)


# -------------------------------------------------------------- evaluation


def type_name(value: Value) -> str:
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, float):
        return "number"
    if isinstance(value, str):
        return "string"
    return "list"


def normalize(value) -> Value:
    """Convert a Python binding into the canonical value representation."""
    if isinstance(value, bool):
        return value
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        return value
    if isinstance(value, (list, tuple)):
        return tuple(str(v) for v in value)
    raise ExprTypeError(f"cannot bind value of type {type(value).__name__}")


def _number(value: Value, what: str) -> float:
    if isinstance(value, float):
        return value
    raise ExprTypeError(f"{what} expects a number, got {type_name(value)}")


def _boolean(value: Value, what: str) -> bool:
    if isinstance(value, bool):
        return value
    raise ExprTypeError(f"{what} expects a boolean, got {type_name(value)}")


def _eval(node: Node, env: Mapping[str, Value]) -> Value:
    if isinstance(node, Literal):
        return node.value
    if isinstance(node, Name):
        try:
            return env[node.name]
        except KeyError:
            raise UnboundIdentifier(node.name) from None
    if isinstance(node, Unary):
        operand = _eval(node.operand, env)
        if node.op == "not":
            return not _boolean(operand, "'not'")
        value = _number(operand, f"unary {node.op!r}")
        return -value if node.op == "-" else value
    if isinstance(node, Binary):
        return _eval_binary(node, env)
    return _eval_call(node, env)


def _eval_binary(node: Binary, env: Mapping[str, Value]) -> Value:
    op = node.op
    left = _eval(node.left, env)
    if op == "and":
        if not _boolean(left, "'and'"):
            return False
        return _boolean(_eval(node.right, env), "'and'")
    if op == "or":
        if _boolean(left, "'or'"):
            return True
        return _boolean(_eval(node.right, env), "'or'")
    right = _eval(node.right, env)
    if op in ("==", "!="):
        if type_name(left) != type_name(right):
            raise ExprTypeError(f"cannot compare {type_name(left)} with {type_name(right)}")
        return (left == right) if op == "==" else (left != right)
    if op in ("<", "<=", ">", ">="):
        lt, rt = type_name(left), type_name(right)
        if lt != rt or lt not in ("number", "string"):
            raise ExprTypeError(f"cannot order {lt} and {rt}")
        if op == "<":
            return left < right
        if op == "<=":
            return left <= right
        if op == ">":
            return left > right
        return left >= right
    if op == "+" and isinstance(left, str) and isinstance(right, str):
        return left + right
    a = _number(left, repr(op))
    b = _number(right, repr(op))
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if b == 0:
        raise DivisionByZero("division by zero" if op == "/" else "modulo by zero")
    if op == "/":
        return a / b
    return a % b


def _to_number(value: Value, func: str) -> float:
    if isinstance(value, float):
        return value
    if isinstance(value, str):
        try:
            return float(value.strip())
        except ValueError:
            raise ExprTypeError(f"{func}() cannot convert {value!r} to a number") from None
    raise ExprTypeError(f"{func}() expects a number or numeric string, got {type_name(value)}")


def _eval_call(node: Call, env: Mapping[str, Value]) -> Value:
    func = node.func
    args = [_eval(arg, env) for arg in node.args]
    if func == "int":
        value = _to_number(args[0], func)
        if not math.isfinite(value):
            raise ExprEvalError(f"int() of non-finite value {value}")
        return float(math.trunc(value))
    if func == "float":
        return _to_number(args[0], func)
    if func in ("ceil", "floor"):
        value = _number(args[0], f"{func}()")
        if not math.isfinite(value):
            return value
        return float(math.ceil(value) if func == "ceil" else math.floor(value))
    if func in ("min", "max"):
        nums = [_number(a, f"{func}()") for a in args]
        return min(nums) if func == "min" else max(nums)
    haystack, needle = args
    if isinstance(haystack, tuple):
        if not isinstance(needle, str):
            raise ExprTypeError(f"contains() on a list expects a string item, got {type_name(needle)}")
        return needle in haystack
    if isinstance(haystack, str):
        if not isinstance(needle, str):
            raise ExprTypeError(f"contains() on a string expects a string item, got {type_name(needle)}")
        return needle in haystack
    raise ExprTypeError(f"contains() expects a list or string, got {type_name(haystack)}")


def evaluate(expr: Expression | str, bindings: Mapping[str, object]) -> Value:
    """Evaluate ``expr`` against ``bindings``.

    Bindings may hold plain Python ints or lists; they are normalized first.
    """
    if isinstance(expr, str):
        expr = parse(expr)
    env = {k: normalize(v) for k, v in bindings.items()}
    try:
        return _eval(expr.ast, env)
    except RecursionError:
        raise ExprEvalError("expression nested too deeply", None, expr.source) from None
    except ExpressionError as exc:
        if exc.source is None:
            exc.source = expr.source
        raise


# --------------------------------------------------------- static typing


def static_type(expr: Expression, types: Mapping[str, str]) -> str | None:
    """Best-effort result type of ``expr`` or None when it cannot be known.

    ``types`` maps identifier names to "number", "string", "boolean" or "list".
    """
    return _static(expr.ast, types)


def _static(node: Node, types: Mapping[str, str]) -> str | None:
    if isinstance(node, Literal):
        return type_name(node.value)
    if isinstance(node, Name):
        return types.get(node.name)
    if isinstance(node, Unary):
        return "boolean" if node.op == "not" else "number"
    if isinstance(node, Binary):
        if node.op in ("and", "or") or node.op in COMPARISONS:
            return "boolean"
        if node.op == "+":
            left, right = _static(node.left, types), _static(node.right, types)
            if left == right == "string":
                return "string"
            if "number" in (left, right):
                return "number"
            return None
        return "number"
    if node.func == "contains":
        return "boolean"
    return "number"


# ------------------------------------------------------------- templates


def render(value: Value) -> str:
    """String form used by interpolation: integral numbers lose their ``.0``."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if value.is_integer():
            return str(int(value))
        return repr(value)
    if isinstance(value, str):
        return value
    return ",".join(value)


@dataclass(frozen=True)
class Template:
    source: str
    parts: tuple  # str literals and (offset, Expression) pairs

    def identifiers(self) -> frozenset[str]:
        out: frozenset[str] = frozenset()
        for part in self.parts:
            if not isinstance(part, str):
                out |= part[1].identifiers()
        return out


def _find_close(template: str, start: int) -> int:
    """Index of the ``}`` closing the segment opened at ``start``; quotes are skipped."""
    i, n = start + 1, len(template)
    quote = None
    while i < n:
        ch = template[i]
        if quote:
            if ch == "\\":
                i += 2
                continue
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
        elif ch == "}":
            return i
        i += 1
    return -1


@lru_cache(maxsize=4096)
def parse_template(template: str) -> Template:
    """Split ``template`` into literal text and ``{expr}`` segments.

    ``{{`` and ``}}`` stand for literal braces. Errors carry the byte offset of
    the problem within the whole template.
    """
    parts: list = []
    buf: list[str] = []
    i, n = 0, len(template)
    while i < n:
        ch = template[i]
        if ch == "{":
            if template.startswith("{{", i):
                buf.append("{")
                i += 2
                continue
            end = _find_close(template, i)
            if end < 0:
                raise ExprSyntaxError("unterminated '{' in template", _byte_offset(template, i), template, ("'}'",))
            inner = template[i + 1 : end]
            try:
                expr = parse(inner)
            except ExprSyntaxError as exc:
                base = _byte_offset(template, i + 1)
                raise ExprSyntaxError(
                    f"in template segment {{{inner}}}: {exc.message}", base + exc.offset, template, exc.expected
                ) from None
            if buf:
                parts.append("".join(buf))
                buf = []
            parts.append((_byte_offset(template, i), expr))
            i = end + 1
            continue
        if ch == "}":
            if template.startswith("}}", i):
                buf.append("}")
                i += 2
                continue
            raise ExprSyntaxError("single '}' in template", _byte_offset(template, i), template, ("'}}'",))
        buf.append(ch)
        i += 1
    if buf:
        parts.append("".join(buf))
    return Template(template, tuple(parts))


def interpolate(template: str | Template, bindings: Mapping[str, object]) -> str:
    """Replace every ``{expr}`` segment of ``template`` with its rendered value."""
    tpl = template if isinstance(template, Template) else parse_template(template)
    env = {k: normalize(v) for k, v in bindings.items()}
    out = []
    for part in tpl.parts:
        if isinstance(part, str):
            out.append(part)
            continue
        offset, expr = part
        try:
            out.append(render(_eval(expr.ast, env)))
        except ExprEvalError as exc:
            exc.message = f"in template segment {{{expr.source}}}: {exc.message}"
            exc.offset = offset
            exc.source = tpl.source
            exc.args = (exc._render(),)
            raise
    return "".join(out)
