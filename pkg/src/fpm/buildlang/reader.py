"""S-expression reader and printer for the build language.

Data model: symbols are :class:`Symbol`, strings are ``str``, integers are
``int`` (signed 64-bit), booleans are ``bool`` and lists are :class:`SList`
(a ``list`` that remembers where each element was read from).
"""

from __future__ import annotations

import re

from ..errors import NotSerializable, ParseError

INT_MIN = -(2**63)
INT_MAX = 2**63 - 1


class Symbol:
    __slots__ = ("name",)
    _table: dict[str, Symbol] = {}

    def __new__(cls, name: str):
        sym = cls._table.get(name)
        if sym is None:
            fresh = super().__new__(cls)
            fresh.name = name
            sym = cls._table.setdefault(name, fresh)
        return sym

    def __repr__(self):
        return self.name

    def __reduce__(self):
        return (Symbol, (self.name,))

    @property
    def is_keyword(self) -> bool:
        return self.name.startswith("#:")


class SList(list):
    """A list read from source text; ``locs`` holds (line, col) per element."""

    def __init__(self, items=(), loc=None, locs=None):
        super().__init__(items)
        self.loc = loc
        self.locs = locs or []


QUOTE = Symbol("quote")
QUASIQUOTE = Symbol("quasiquote")
UNQUOTE = Symbol("unquote")

_PREFIXES = {"'": QUOTE, "`": QUASIQUOTE, ",": UNQUOTE}
_ESCAPES = {'"': '"', "\\": "\\", "n": "\n", "t": "\t"}
_INT_RE = re.compile(r"^[+-]?[0-9]+$")
_DELIMS = set("()'`,\";") | set(" \t\r\n\f\v")


class _Reader:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.line = 1
        self.col = 1

    def error(self, message, line=None, col=None):
        raise ParseError(message, line or self.line, col or self.col)

    def peek(self):
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def advance(self):
        ch = self.text[self.pos]
        self.pos += 1
        if ch == "\n":
            self.line += 1
            self.col = 1
        else:
            self.col += 1
        return ch

    def skip_ws(self):
        while self.pos < len(self.text):
            ch = self.peek()
            if ch == ";":
                while self.pos < len(self.text) and self.peek() != "\n":
                    self.advance()
            elif ch.isspace():
                self.advance()
            else:
                break

    def read_all(self):
        items = SList(loc=(1, 1))
        while True:
            self.skip_ws()
            if self.pos >= len(self.text):
                return items
            items.locs.append((self.line, self.col))
            items.append(self.read(0))

    def read(self, qq_depth):
        self.skip_ws()
        if self.pos >= len(self.text):
            self.error("unexpected end of input")
        line, col = self.line, self.col
        ch = self.peek()
        if ch == "(":
            self.advance()
            items = SList(loc=(line, col))
            while True:
                self.skip_ws()
                if self.pos >= len(self.text):
                    self.error(f"unbalanced parenthesis opened at line {line}, column {col}")
                if self.peek() == ")":
                    self.advance()
                    return items
                items.locs.append((self.line, self.col))
                items.append(self.read(qq_depth))
        if ch == ")":
            self.error("unexpected ')'")
        if ch in _PREFIXES:
            self.advance()
            head = _PREFIXES[ch]
            depth = qq_depth
            if head is QUASIQUOTE:
                if qq_depth:
                    self.error("nested quasiquote is not supported", line, col)
                depth = 1
            inner_loc = (self.line, self.col)
            return SList([head, self.read(depth)], loc=(line, col), locs=[(line, col), inner_loc])
        if ch == '"':
            return self.read_string()
        return self.read_atom()

    def read_string(self):
        line, col = self.line, self.col
        self.advance()
        out = []
        while True:
            if self.pos >= len(self.text):
                self.error("unterminated string", line, col)
            ch = self.advance()
            if ch == '"':
                return "".join(out)
            if ch == "\\":
                if self.pos >= len(self.text):
                    self.error("unterminated string", line, col)
                esc_line, esc_col = self.line, self.col - 1
                esc = self.advance()
                if esc not in _ESCAPES:
                    self.error(f"bad escape sequence \\{esc}", esc_line, esc_col)
                out.append(_ESCAPES[esc])
            else:
                out.append(ch)

    def read_atom(self):
        line, col = self.line, self.col
        start = self.pos
        while self.pos < len(self.text) and self.peek() not in _DELIMS:
            self.advance()
        token = self.text[start:self.pos]
        if token in ("#t", "#true"):
            return True
        if token in ("#f", "#false"):
            return False
        if _INT_RE.match(token):
            value = int(token)
            if not INT_MIN <= value <= INT_MAX:
                self.error("integer out of 64-bit range", line, col)
            return value
        if token.startswith("#") and not token.startswith("#:"):
            self.error(f"unknown syntax {token}", line, col)
        if token == "#:":
            self.error("empty keyword", line, col)
        return Symbol(token)


def parse(source) -> SList:
    """Read every datum in ``source`` (str or UTF-8 bytes)."""
    if isinstance(source, (bytes, bytearray)):
        try:
            source = source.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(f"invalid UTF-8: {e}") from e
    return _Reader(source).read_all()


def parse_one(source):
    items = parse(source)
    if len(items) != 1:
        raise ParseError(f"expected exactly one expression, found {len(items)}")
    return items[0]


def quote_string(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\t", "\\t") + '"'


def write(datum) -> str:
    """Print a datum so that :func:`parse` reads it back unchanged."""
    if isinstance(datum, bool):
        return "#t" if datum else "#f"
    if isinstance(datum, int):
        return str(datum)
    if isinstance(datum, str):
        return quote_string(datum)
    if isinstance(datum, Symbol):
        return datum.name
    if isinstance(datum, (list, tuple)):
        return "(" + " ".join(write(x) for x in datum) + ")"
    raise NotSerializable(f"cannot serialize {type(datum).__name__} value {datum!r}")
