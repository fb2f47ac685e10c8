"""The build stratum: an s-expression language evaluated inside builds."""

from .reader import QUASIQUOTE, QUOTE, UNQUOTE, SList, Symbol, parse, parse_one, write

__all__ = ["QUASIQUOTE", "QUOTE", "UNQUOTE", "SList", "Symbol", "parse", "parse_one", "write"]
