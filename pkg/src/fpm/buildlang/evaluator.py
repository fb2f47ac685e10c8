"""Applicative-order evaluator for the build language.

The evaluator itself never touches the file system; every effect goes
through a builtin procedure (see :mod:`fpm.buildlang.stdlib`).
"""

from __future__ import annotations

from typing import Callable

from ..errors import ArityError, EvalError, FpmError, UnboundVariable
from .reader import QUASIQUOTE, QUOTE, UNQUOTE, Symbol


class Unspecified:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "#<unspecified>"


UNSPECIFIED = Unspecified()


class Env:
    """One lexical frame; lookups walk outward through ``parent``."""

    __slots__ = ("vars", "parent", "toplevel", "frozen")

    def __init__(self, bindings=None, parent: Env | None = None, toplevel=False, frozen=False):
        self.vars: dict[Symbol, object] = dict(bindings or {})
        self.parent = parent
        self.toplevel = toplevel
        self.frozen = frozen

    def lookup(self, sym: Symbol):
        env = self
        while env is not None:
            try:
                return env.vars[sym]
            except KeyError:
                env = env.parent
        raise UnboundVariable(sym.name)

    def define(self, sym: Symbol, value):
        if self.frozen:
            raise EvalError(f"cannot redefine {sym.name} in a frozen environment")
        self.vars[sym] = value

    def freeze(self) -> Env:
        self.frozen = True
        return self


class Closure:
    __slots__ = ("params", "rest", "body", "env", "name")

    def __init__(self, params, rest, body, env, name=None):
        self.params = params
        self.rest = rest
        self.body = body
        self.env = env
        self.name = name

    def __repr__(self):
        return f"#<procedure {self.name or 'anonymous'}>"


class Builtin:
    __slots__ = ("name", "fn", "min_args", "max_args")

    def __init__(self, name: str, fn: Callable, min_args: int = 0, max_args: int | None = None):
        self.name = name
        self.fn = fn
        self.min_args = min_args
        self.max_args = max_args

    def __repr__(self):
        return f"#<builtin {self.name}>"


def is_true(value) -> bool:
    return value is not False


def is_procedure(value) -> bool:
    return isinstance(value, (Closure, Builtin))


_SPECIAL = {}


def _special(name):
    def register(fn):
        _SPECIAL[Symbol(name)] = fn
        return fn
    return register


def _check_form(x, lo, hi, what):
    n = len(x) - 1
    if n < lo or (hi is not None and n > hi):
        raise EvalError(f"bad syntax: {what} takes {lo}{'' if hi == lo else '+' if hi is None else f'-{hi}'} operand(s)")


class Interpreter:
    """Evaluates expressions against a frozen builtin frame plus a top-level frame."""

    def __init__(self, builtins: Env):
        self.builtins = builtins
        self.globals = Env(parent=builtins, toplevel=True)

    def eval_toplevel(self, forms, env: Env | None = None):
        env = env or self.globals
        result = UNSPECIFIED
        for form in forms:
            result = self.eval(form, env)
        return result

    def eval(self, x, env: Env | None = None):
        env = env or self.globals
        if isinstance(x, Symbol):
            if x.is_keyword:
                return x
            return env.lookup(x)
        if isinstance(x, list):
            if not x:
                raise EvalError("cannot evaluate the empty combination (); quote it")
            head = x[0]
            form = _SPECIAL.get(head) if isinstance(head, Symbol) else None
            if form is not None:
                return form(self, x, env)
            proc = self.eval(head, env)
            args = [self.eval(a, env) for a in x[1:]]
            return self.apply(proc, args)
        # strings, integers, booleans and host objects evaluate to themselves
        return x

    def apply(self, proc, args: list):
        if isinstance(proc, Builtin):
            n = len(args)
            if n < proc.min_args or (proc.max_args is not None and n > proc.max_args):
                raise ArityError(f"{proc.name}: wrong number of arguments ({n})")
            try:
                return proc.fn(*args)
            except FpmError:
                raise
            except RecursionError:
                raise EvalError("recursion too deep") from None
            except OSError as e:
                raise EvalError(f"{proc.name}: {e}") from e
        if isinstance(proc, Closure):
            n = len(proc.params)
            if len(args) < n or (proc.rest is None and len(args) > n):
                raise ArityError(f"{proc.name or 'procedure'}: expected {n} argument(s), got {len(args)}")
            frame = Env(zip(proc.params, args), parent=proc.env)
            if proc.rest is not None:
                frame.vars[proc.rest] = list(args[n:])
            result = UNSPECIFIED
            for form in proc.body:
                result = self.eval(form, frame)
            return result
        raise EvalError(f"not a procedure: {proc!r}")

    def quasi(self, x, env):
        if isinstance(x, list) and not isinstance(x, str):
            if x and x[0] is UNQUOTE:
                _check_form(x, 1, 1, "unquote")
                return self.eval(x[1], env)
            if x and x[0] is QUASIQUOTE:
                raise EvalError("nested quasiquote is not supported")
            return [self.quasi(item, env) for item in x]
        return x


def _params(spec):
    if isinstance(spec, Symbol):
        return [], spec
    if not isinstance(spec, list) or not all(isinstance(p, Symbol) for p in spec):
        raise EvalError("bad syntax: lambda parameters must be symbols")
    if len(set(spec)) != len(spec):
        raise EvalError("bad syntax: duplicate lambda parameter")
    return list(spec), None


@_special("quote")
def _quote(interp, x, env):
    _check_form(x, 1, 1, "quote")
    return x[1]


@_special("quasiquote")
def _quasiquote(interp, x, env):
    _check_form(x, 1, 1, "quasiquote")
    return interp.quasi(x[1], env)


@_special("unquote")
def _unquote(interp, x, env):
    raise EvalError("unquote outside of quasiquote")


@_special("if")
def _if(interp, x, env):
    _check_form(x, 2, 3, "if")
    if is_true(interp.eval(x[1], env)):
        return interp.eval(x[2], env)
    return interp.eval(x[3], env) if len(x) == 4 else UNSPECIFIED


@_special("let")
def _let(interp, x, env):
    _check_form(x, 2, None, "let")
    bindings = x[1]
    if not isinstance(bindings, list):
        raise EvalError("bad syntax: let bindings must be a list")
    frame = Env(parent=env)
    for b in bindings:
        if not (isinstance(b, list) and len(b) == 2 and isinstance(b[0], Symbol)):
            raise EvalError("bad syntax: let binding must be (name expr)")
        frame.vars[b[0]] = interp.eval(b[1], env)
    result = UNSPECIFIED
    for form in x[2:]:
        result = interp.eval(form, frame)
    return result


@_special("lambda")
def _lambda(interp, x, env):
    _check_form(x, 2, None, "lambda")
    params, rest = _params(x[1])
    return Closure(params, rest, list(x[2:]), env)


@_special("begin")
def _begin(interp, x, env):
    result = UNSPECIFIED
    for form in x[1:]:
        result = interp.eval(form, env)
    return result


@_special("define")
def _define(interp, x, env):
    if not env.toplevel:
        raise EvalError("define is only allowed at top level")
    _check_form(x, 2, None, "define")
    target = x[1]
    if isinstance(target, Symbol):
        _check_form(x, 2, 2, "define")
        value = interp.eval(x[2], env)
        if isinstance(value, Closure) and value.name is None:
            value.name = target.name
        env.define(target, value)
    elif isinstance(target, list) and target and isinstance(target[0], Symbol):
        params, rest = _params(list(target[1:]))
        env.define(target[0], Closure(params, rest, list(x[2:]), env, target[0].name))
    else:
        raise EvalError("bad syntax: define")
    return UNSPECIFIED


SPECIAL_FORMS = frozenset(s.name for s in _SPECIAL)
