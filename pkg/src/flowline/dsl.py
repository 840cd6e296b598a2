"""The `.fl` configuration language: lexer, parser, printer, evaluator.

One block-structured language serves both infrastructure documents
(provider/resource/output blocks) and pipeline documents (pipeline blocks).

Grammar:

    file      := item* ;
    item      := block | attribute ;
    block     := IDENT STRING? STRING? "{" item* "}" ;
    attribute := IDENT "=" expr ;
    expr      := STRING | NUMBER | BOOL | list | ref ;
    list      := "[" (expr ("," expr)*)? "]" ;
    ref       := "${"? IDENT ("." IDENT)+ "}"?

Identifiers match ``[A-Za-z_][A-Za-z0-9_-]*``. Strings are double-quoted
with escapes ``\\" \\\\ \\n \\t \\$`` and may embed ``${kind.name.attr}``
interpolations. Numbers are decimal integers or decimals (no exponent).
``#`` starts a comment running to end of line. There is no arithmetic and
no control flow: documents are purely declarative.
"""

from __future__ import annotations

import string as _string
from dataclasses import dataclass, field
from typing import Union

Value = Union[str, int, float, bool, list]

_IDENT_START = set(_string.ascii_letters + "_")
_IDENT_CONT = set(_string.ascii_letters + _string.digits + "_-")
_PUNCT_SINGLE = set("={}[],.")
_ESCAPES = {'"': '"', "\\": "\\", "n": "\n", "t": "\t", "$": "$"}


class PositionedError(Exception):
    """Error carrying a 1-based line:col source position."""

    def __init__(self, line: int, col: int, message: str):
        super().__init__(f"{line}:{col}: {message}")
        self.line = line
        self.col = col
        self.message = message


class LexError(PositionedError):
    pass


class ParseError(PositionedError):
    def __init__(self, line: int, col: int, expected: str, found: str):
        super().__init__(line, col, f"expected {expected}, found {found}")
        self.expected = expected
        self.found = found


class ValidationError(PositionedError):
    """Document is well-formed but violates a semantic rule."""

    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(line, col, message)


class UnknownRef(Exception):
    def __init__(self, path):
        self.path = tuple(path)
        super().__init__("unknown reference: " + ".".join(self.path))


class TypeMismatch(Exception):
    pass


@dataclass(frozen=True)
class Token:
    kind: str  # ident | string | number | bool | punct | eof
    lexeme: str
    line: int
    col: int
    # For string tokens: decoded segments, each a literal str or a ref-path
    # tuple. Internal to the parser; not part of token identity.
    parts: tuple = field(default=None, compare=False, repr=False)


# --- AST ---------------------------------------------------------------


@dataclass(frozen=True)
class Ref:
    path: tuple

    def dotted(self) -> str:
        return ".".join(self.path)


@dataclass(frozen=True)
class Str:
    # Alternating literal-text and Ref segments, in source order.
    parts: tuple

    @property
    def text(self) -> str:
        return "".join(
            p if isinstance(p, str) else "${" + p.dotted() + "}" for p in self.parts
        )

    @property
    def interpolations(self) -> tuple:
        return tuple(p for p in self.parts if isinstance(p, Ref))


@dataclass(frozen=True)
class Num:
    value: Union[int, float]


@dataclass(frozen=True)
class Bool:
    value: bool


@dataclass(frozen=True)
class ListExpr:
    items: tuple


Expr = Union[Str, Num, Bool, ListExpr, Ref]


@dataclass(frozen=True)
class Attribute:
    name: str
    value: Expr
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Block:
    keyword: str
    labels: tuple
    body: tuple
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


Item = Union[Block, Attribute]


@dataclass(frozen=True)
class Document:
    items: tuple
    source_name: str = field(default="<string>", compare=False)


# --- Lexer -------------------------------------------------------------


def tokenize(source: str, source_name: str = "<string>") -> list:
    """Produce the full token stream for `source`, ending in one eof token."""
    tokens = []
    i, line, col = 0, 1, 1
    n = len(source)

    def advance(count=1):
        nonlocal i, line, col
        for _ in range(count):
            if i < n and source[i] == "\n":
                line += 1
                col = 1
            else:
                col += 1
            i += 1

    while i < n:
        ch = source[i]
        if ch in " \t\r\n":
            advance()
            continue
        if ch == "#":
            while i < n and source[i] != "\n":
                advance()
            continue
        if ch in _PUNCT_SINGLE:
            tokens.append(Token("punct", ch, line, col))
            advance()
            continue
        if ch == "$":
            if i + 1 < n and source[i + 1] == "{":
                tokens.append(Token("punct", "${", line, col))
                advance(2)
                continue
            raise LexError(line, col, "illegal character '$' outside a string")
        if ch == '"':
            tok_line, tok_col = line, col
            advance()  # opening quote
            parts, buf = [], []
            while True:
                if i >= n or source[i] == "\n":
                    raise LexError(tok_line, tok_col, "unterminated string")
                c = source[i]
                if c == '"':
                    advance()
                    break
                if c == "\\":
                    if i + 1 >= n:
                        raise LexError(tok_line, tok_col, "unterminated string")
                    esc = source[i + 1]
                    if esc not in _ESCAPES:
                        raise LexError(line, col, f"invalid escape '\\{esc}'")
                    buf.append(_ESCAPES[esc])
                    advance(2)
                    continue
                if c == "$" and i + 1 < n and source[i + 1] == "{":
                    if buf:
                        parts.append("".join(buf))
                        buf = []
                    advance(2)
                    parts.append(_lex_interpolation_path(source, advance, lambda: (i, line, col), n))
                    continue
                buf.append(c)
                advance()
            if buf:
                parts.append("".join(buf))
            decoded = "".join(
                p if isinstance(p, str) else "${" + ".".join(p) + "}" for p in parts
            )
            tokens.append(Token("string", decoded, tok_line, tok_col, parts=tuple(parts)))
            continue
        if ch.isdigit() or (ch == "-" and i + 1 < n and source[i + 1].isdigit()):
            tok_line, tok_col = line, col
            start = i
            advance()  # sign or first digit
            while i < n and source[i].isdigit():
                advance()
            if i + 1 < n and source[i] == "." and source[i + 1].isdigit():
                advance()
                while i < n and source[i].isdigit():
                    advance()
            tokens.append(Token("number", source[start:i], tok_line, tok_col))
            continue
        if ch in _IDENT_START:
            tok_line, tok_col = line, col
            start = i
            while i < n and source[i] in _IDENT_CONT:
                advance()
            word = source[start:i]
            kind = "bool" if word in ("true", "false") else "ident"
            tokens.append(Token(kind, word, tok_line, tok_col))
            continue
        raise LexError(line, col, f"illegal character {ch!r}")

    tokens.append(Token("eof", "", line, col))
    return tokens


def _lex_interpolation_path(source, advance, pos, n):
    """Scan `ident(.ident)+}` after an opening `${` inside a string."""
    segments = []
    while True:
        i, line, col = pos()
        if i >= n or source[i] not in _IDENT_START:
            raise LexError(line, col, "expected identifier in interpolation")
        start = i
        while True:
            i, _, _ = pos()
            if i < n and source[i] in _IDENT_CONT:
                advance()
            else:
                break
        segments.append(source[start:i])
        i, line, col = pos()
        if i < n and source[i] == ".":
            advance()
            continue
        if i < n and source[i] == "}":
            advance()
            break
        raise LexError(line, col, "expected '.' or '}' in interpolation")
    if len(segments) < 2:
        i, line, col = pos()
        raise LexError(line, col, "reference needs at least two segments (kind.name)")
    return tuple(segments)


# --- Parser ------------------------------------------------------------


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> Token:
        return self.tokens[self.pos]

    def next(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def error(self, expected: str, tok: Token = None):
        tok = tok or self.peek()
        found = f"'{tok.lexeme}'" if tok.lexeme else "end of input"
        raise ParseError(tok.line, tok.col, expected, found)

    def expect_punct(self, lexeme: str) -> Token:
        tok = self.peek()
        if tok.kind == "punct" and tok.lexeme == lexeme:
            return self.next()
        self.error(f"'{lexeme}'")

    def parse_items(self, top_level: bool) -> tuple:
        items = []
        seen_attrs = {}
        while True:
            tok = self.peek()
            if tok.kind == "eof":
                if not top_level:
                    self.error("'}'")
                break
            if tok.kind == "punct" and tok.lexeme == "}" and not top_level:
                break
            if tok.kind != "ident":
                self.error("identifier")
            item = self.parse_item()
            if isinstance(item, Attribute):
                if item.name in seen_attrs:
                    raise ParseError(
                        item.line,
                        item.col,
                        "unique attribute name",
                        f"duplicate attribute '{item.name}'",
                    )
                seen_attrs[item.name] = item
            items.append(item)
        return tuple(items)

    def parse_item(self) -> Item:
        name_tok = self.next()
        tok = self.peek()
        if tok.kind == "punct" and tok.lexeme == "=":
            self.next()
            value = self.parse_expr()
            return Attribute(name_tok.lexeme, value, name_tok.line, name_tok.col)
        labels = []
        while self.peek().kind == "string":
            if len(labels) == 2:
                self.error("'{' (blocks carry at most 2 labels)")
            str_tok = self.next()
            if any(not isinstance(p, str) for p in str_tok.parts):
                raise ParseError(
                    str_tok.line, str_tok.col, "plain string label", "interpolation"
                )
            labels.append(str_tok.lexeme)
        self.expect_punct("{")
        body = self.parse_items(top_level=False)
        self.expect_punct("}")
        return Block(name_tok.lexeme, tuple(labels), body, name_tok.line, name_tok.col)

    def parse_expr(self) -> Expr:
        tok = self.peek()
        if tok.kind == "string":
            self.next()
            return Str(tuple(p if isinstance(p, str) else Ref(p) for p in tok.parts))
        if tok.kind == "number":
            self.next()
            text = tok.lexeme
            return Num(float(text) if "." in text else int(text))
        if tok.kind == "bool":
            self.next()
            return Bool(tok.lexeme == "true")
        if tok.kind == "punct" and tok.lexeme == "[":
            self.next()
            items = []
            if not (self.peek().kind == "punct" and self.peek().lexeme == "]"):
                items.append(self.parse_expr())
                while self.peek().kind == "punct" and self.peek().lexeme == ",":
                    self.next()
                    items.append(self.parse_expr())
            self.expect_punct("]")
            return ListExpr(tuple(items))
        if tok.kind == "punct" and tok.lexeme == "${":
            self.next()
            ref = self.parse_ref()
            self.expect_punct("}")
            return ref
        if tok.kind == "ident":
            return self.parse_ref()
        self.error("expression")

    def parse_ref(self) -> Ref:
        first = self.peek()
        if first.kind != "ident":
            self.error("identifier")
        segments = [self.next().lexeme]
        while self.peek().kind == "punct" and self.peek().lexeme == ".":
            self.next()
            seg = self.peek()
            if seg.kind != "ident":
                self.error("identifier after '.'")
            segments.append(self.next().lexeme)
        if len(segments) < 2:
            self.error("'.' (references need at least two segments)", self.peek())
        return Ref(tuple(segments))


def parse(tokens, source_name: str = "<string>") -> Document:
    parser = _Parser(tokens)
    items = parser.parse_items(top_level=True)
    return Document(items, source_name)


def parse_source(source: str, source_name: str = "<string>") -> Document:
    return parse(tokenize(source, source_name), source_name)


# --- Canonical printer -------------------------------------------------


def _escape_string_literal(text: str) -> str:
    out = []
    for ch in text:
        if ch == "\\":
            out.append("\\\\")
        elif ch == '"':
            out.append('\\"')
        elif ch == "\n":
            out.append("\\n")
        elif ch == "\t":
            out.append("\\t")
        elif ch == "$":
            out.append("\\$")
        else:
            out.append(ch)
    return "".join(out)


def _number_text(value) -> str:
    if isinstance(value, int):
        return str(value)
    if value != value or value in (float("inf"), float("-inf")):
        raise ValueError("non-finite numbers cannot be rendered")
    text = repr(value)
    if "e" in text or "E" in text:
        # No exponent form in the language; expand to plain decimal digits.
        from decimal import Decimal

        text = format(Decimal(value), "f")
        if "." not in text:
            text += ".0"
    return text


def render_expr(expr: Expr) -> str:
    if isinstance(expr, Str):
        rendered = []
        for part in expr.parts:
            if isinstance(part, str):
                rendered.append(_escape_string_literal(part))
            else:
                rendered.append("${" + part.dotted() + "}")
        return '"' + "".join(rendered) + '"'
    if isinstance(expr, Num):
        return _number_text(expr.value)
    if isinstance(expr, Bool):
        return "true" if expr.value else "false"
    if isinstance(expr, ListExpr):
        return "[" + ", ".join(render_expr(e) for e in expr.items) + "]"
    if isinstance(expr, Ref):
        return expr.dotted()
    raise TypeError(f"not an expression: {expr!r}")


def _render_items(items, depth, lines):
    pad = "  " * depth
    for item in items:
        if isinstance(item, Attribute):
            lines.append(f"{pad}{item.name} = {render_expr(item.value)}")
        else:
            head = item.keyword
            for label in item.labels:
                head += f' "{_escape_string_literal(label)}"'
            if item.body:
                lines.append(f"{pad}{head} {{")
                _render_items(item.body, depth + 1, lines)
                lines.append(f"{pad}}}")
            else:
                lines.append(f"{pad}{head} {{}}")


def format_document(doc: Document) -> str:
    """Render `doc` canonically: parse(format_document(d)) == d."""
    lines = []
    _render_items(doc.items, 0, lines)
    return "".join(line + "\n" for line in lines)


# --- Evaluator ---------------------------------------------------------


def value_to_text(value: Value) -> str:
    """Render a runtime value the way interpolation splices it into text."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return _number_text(value)
    if isinstance(value, str):
        return value
    raise TypeMismatch(f"cannot render {type(value).__name__} value as text")


def eval_expr(expr: Expr, scope) -> Value:
    """Evaluate `expr` against `scope`, a mapping from dotted ref path to Value."""
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, Bool):
        return expr.value
    if isinstance(expr, Ref):
        key = expr.dotted()
        if key not in scope:
            raise UnknownRef(expr.path)
        return scope[key]
    if isinstance(expr, ListExpr):
        return [eval_expr(e, scope) for e in expr.items]
    if isinstance(expr, Str):
        out = []
        for part in expr.parts:
            if isinstance(part, str):
                out.append(part)
            else:
                key = part.dotted()
                if key not in scope:
                    raise UnknownRef(part.path)
                value = scope[key]
                if isinstance(value, list):
                    raise TypeMismatch(
                        f"cannot interpolate list value {key} into a string"
                    )
                out.append(value_to_text(value))
        return "".join(out)
    raise TypeError(f"not an expression: {expr!r}")


def expr_refs(expr: Expr):
    """All Ref nodes reachable from `expr`, in source order."""
    if isinstance(expr, Ref):
        yield expr
    elif isinstance(expr, Str):
        yield from (p for p in expr.parts if isinstance(p, Ref))
    elif isinstance(expr, ListExpr):
        for item in expr.items:
            yield from expr_refs(item)
