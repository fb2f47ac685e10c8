"""Package and origin records, package files, and their compilation to derivations.

A package file is data: a sequence of ``(define NAME (package FIELD...))``
forms.  Field values are expressions in the build language, evaluated on
the host with a small pure builtin set.  ``arguments`` and ``inputs`` are
thunked: they are evaluated only when a derivation is requested, with
``(current-system)`` returning the system being targeted.
"""

from __future__ import annotations

import contextvars
import dataclasses
import inspect
import os
import re
import threading
from dataclasses import dataclass
from typing import Callable

from .buildlang.bridge import seed_derivation
from .buildlang.evaluator import Builtin, Env
from .buildlang.reader import QUOTE, SList, Symbol, parse
from .buildlang.stdlib import make_interpreter
from .build_systems import lookup_build_system
from .errors import (
    DependencyCycle,
    DuplicatePackage,
    FpmError,
    MissingField,
    PackageNotFound,
    ParseError,
    UnknownField,
)
from .store import Store, decode_base32, encode_base32

DEFAULT_SYSTEM = "x86_64-linux"
ORIGIN_METHODS = ("local-file", "seed")

current_system: contextvars.ContextVar[str] = contextvars.ContextVar("current_system", default=DEFAULT_SYSTEM)

# field name in files -> attribute name
FIELD_ATTRS = {
    "name": "name",
    "version": "version",
    "source": "source",
    "build-system": "build_system",
    "arguments": "arguments",
    "inputs": "inputs",
    "propagated-inputs": "propagated_inputs",
    "synopsis": "synopsis",
    "description": "description",
    "home-page": "home_page",
    "license": "license",
}
REQUIRED_FIELDS = ("name", "version", "source", "build-system", "synopsis",
                   "description", "home-page", "license")
THUNKED_FIELDS = ("arguments", "inputs")
LITERAL_FIELDS = ("build-system", "license")


class Thunk:
    """A deferred field value, computed at most once per target system."""

    def __init__(self, compute: Callable[[], object], description: str = ""):
        self._compute = compute
        self._values: dict[str, object] = {}
        self._lock = threading.RLock()
        self.description = description
        self.evaluations = 0

    def __repr__(self):
        return f"#<thunk {self.description}>"

    def force(self, system: str | None = None):
        system = system or current_system.get()
        with self._lock:
            if system not in self._values:
                token = current_system.set(system)
                try:
                    self.evaluations += 1
                    self._values[system] = self._compute()
                finally:
                    current_system.reset(token)
            return self._values[system]


def force(value, system: str | None = None):
    return value.force(system) if isinstance(value, Thunk) else value


@dataclass(frozen=True)
class Origin:
    method: str
    uri: str
    sha256: bytes

    @property
    def path(self) -> str:
        return self.uri[len("file://"):] if self.uri.startswith("file://") else self.uri

    @property
    def file_name(self) -> str:
        base = os.path.basename(self.path.rstrip("/")) or "source"
        return re.sub(r"[^A-Za-z0-9+._\-]", "-", base).lstrip(".") or "source"


@dataclass(frozen=True, eq=False)
class Package:
    name: str
    version: str
    source: Origin
    build_system: str
    synopsis: str
    description: str
    home_page: str
    license: str
    arguments: object = ()
    inputs: object = ()
    propagated_inputs: tuple = ()
    location: tuple | None = None

    def __repr__(self):
        return f"#<package {self.name}@{self.version}>"

    @property
    def full_name(self) -> str:
        return f"{self.name}-{self.version}"

    @property
    def spec(self) -> str:
        return f"{self.name}@{self.version}"

    @property
    def location_string(self) -> str:
        if not self.location:
            return "unknown"
        return f"{self.location[0]}:{self.location[1]}"

    def arguments_for(self, system: str | None = None):
        value = force(self.arguments, system)
        return list(value) if value else []

    def inputs_for(self, system: str | None = None) -> list[tuple[str, Package]]:
        return check_inputs(force(self.inputs, system), self, "inputs")


def check_inputs(value, pkg, field) -> list[tuple[str, Package]]:
    where = getattr(pkg, "location_string", "?")
    if value is None or value == ():
        return []
    if not isinstance(value, list):
        raise ParseError(f"{field} of {pkg!r} ({where}) must be a list of (label package)")
    pairs = []
    for item in value:
        if not (isinstance(item, (list, tuple)) and len(item) == 2
                and isinstance(item[0], str) and isinstance(item[1], Package)):
            raise ParseError(f"{field} of {pkg!r} ({where}): entries must be (\"label\" package)")
        pairs.append((item[0], item[1]))
    labels = [label for label, _ in pairs]
    if len(set(labels)) != len(labels):
        raise ParseError(f"{field} of {pkg!r} ({where}): duplicate labels")
    return pairs


def inherit(base: Package, location=None, **overrides) -> Package:
    """A copy of ``base`` with some fields replaced; thunks are shared, not re-run."""
    known = {f.name for f in dataclasses.fields(Package)}
    for key in overrides:
        if key not in known:
            raise UnknownField(f"package has no field {key!r}")
    if location is None:
        caller = inspect.stack()[1]
        location = (caller.filename, caller.lineno, 0)
    return dataclasses.replace(base, location=location, **overrides)


def static_variant(p: Package, flag: str = "--enable-static", _cache=None) -> Package:
    """``p`` and, recursively, all its inputs, configured with ``flag``."""
    cache = {} if _cache is None else _cache
    if p in cache:
        return cache[p]

    def arguments():
        args = p.arguments_for()
        out, seen = [], False
        for key, value in zip(args[0::2], args[1::2]):
            if key is Symbol("#:configure-flags"):
                value = [Symbol("append"), value, [QUOTE, [flag]]]
                seen = True
            out += [key, value]
        if not seen:
            out += [Symbol("#:configure-flags"), [QUOTE, [flag]]]
        return out

    def inputs():
        return [[label, static_variant(dep, flag, cache)] for label, dep in p.inputs_for()]

    variant = inherit(p, location=p.location, name=p.name + "-static",
                      arguments=Thunk(arguments, f"{p.name}-static arguments"),
                      inputs=Thunk(inputs, f"{p.name}-static inputs"))
    cache[p] = variant
    return variant


# -- package files -------------------------------------------------------

def _literal(expr):
    if isinstance(expr, Symbol):
        return expr.name
    if isinstance(expr, list) and len(expr) == 2 and expr[0] is QUOTE and isinstance(expr[1], Symbol):
        return expr[1].name
    if isinstance(expr, str):
        return expr
    return None


class _FileReader:
    def __init__(self, path: str, registry: PackageRegistry | None):
        self.path = os.path.abspath(path)
        self.dir = os.path.dirname(self.path)
        self.registry = registry
        self.interp = make_interpreter(extra={
            "current-system": Builtin("current-system", lambda: current_system.get(), 0, 0),
            "registry-ref": Builtin("registry-ref", self.registry_ref, 1, 1),
        })

    def registry_ref(self, spec):
        if self.registry is None:
            raise PackageNotFound(f"no registry to look up {spec!r}")
        return self.registry.lookup(spec)

    def error(self, message, loc):
        return ParseError(f"{self.path}: {message}", *(loc or (None, None)))

    def read(self) -> list[tuple[str, Package]]:
        with open(self.path, "rb") as f:
            forms = parse(f.read())
        result = []
        for form, loc in zip(forms, forms.locs):
            if not (isinstance(form, list) and len(form) == 3 and form[0] is Symbol("define")
                    and isinstance(form[1], Symbol)):
                raise self.error("expected (define NAME (package ...))", loc)
            value_form = form[2]
            if not (isinstance(value_form, SList) and value_form and value_form[0] is Symbol("package")):
                raise self.error(f"{form[1].name}: only package definitions are allowed", loc)
            pkg = self.package(value_form)
            self.interp.globals.define(form[1], pkg)
            result.append((form[1].name, pkg))
        return result

    def package(self, form: SList) -> Package:
        line, col = form.locs[0]
        location = (self.path, line, col)
        env = Env(parent=self.interp.globals)
        values: dict[str, object] = {}
        base = None
        seen = set()
        for clause, loc in zip(form[1:], form.locs[1:]):
            if not (isinstance(clause, list) and len(clause) == 2 and isinstance(clause[0], Symbol)):
                raise self.error("package fields must be (field value)", loc)
            field = clause[0].name
            if field in seen:
                raise self.error(f"duplicate field {field}", loc)
            seen.add(field)
            if field == "inherit":
                if values:
                    raise self.error("inherit must come first", loc)
                base = self.interp.eval(clause[1], env)
                if not isinstance(base, Package):
                    raise self.error("inherit expects a package", loc)
                for name, attr in FIELD_ATTRS.items():
                    env.vars[Symbol(name)] = getattr(base, attr)
                continue
            if field not in FIELD_ATTRS:
                raise UnknownField(f"{self.path}:{loc[0]}: unknown package field {field!r}")
            value = self.field_value(field, clause[1], env, loc)
            values[field] = value
            env.vars[Symbol(field)] = value
        if base is None:
            for field in REQUIRED_FIELDS:
                if field not in values:
                    raise MissingField(field, f"{self.path}:{line}:{col}")
        for field in ("name", "version"):
            if field in values and not (isinstance(values[field], str) and values[field]):
                raise self.error(f"{field} must be a non-empty string", form.loc)
        kwargs = {FIELD_ATTRS[k]: v for k, v in values.items()}
        if base is not None:
            pkg = inherit(base, location=location, **kwargs)
        else:
            kwargs.setdefault("arguments", ())
            kwargs.setdefault("inputs", ())
            kwargs.setdefault("propagated_inputs", ())
            pkg = Package(location=location, **kwargs)
        if not isinstance(pkg.propagated_inputs, tuple):
            pkg = dataclasses.replace(pkg, propagated_inputs=tuple(
                check_inputs(pkg.propagated_inputs, pkg, "propagated-inputs")))
        return pkg

    def field_value(self, field, expr, env, loc):
        if field in LITERAL_FIELDS:
            value = _literal(expr)
            if value is None:
                raise self.error(f"{field} must be a symbol", loc)
            return value
        if field == "source":
            if isinstance(expr, list) and expr and expr[0] is Symbol("origin"):
                return self.origin(expr, env)
            value = self.interp.eval(expr, env)
            if not isinstance(value, Origin):
                raise self.error("source must be an origin", loc)
            return value
        if field in THUNKED_FIELDS:
            interp = self.interp
            return Thunk(lambda: interp.eval(expr, env), f"{field} at {self.path}:{loc[0]}")
        value = self.interp.eval(expr, env)
        if field in ("synopsis", "description", "home-page") and not isinstance(value, str):
            raise self.error(f"{field} must be a string", loc)
        return value

    def origin(self, form: SList, env) -> Origin:
        fields = {}
        for clause, loc in zip(form[1:], form.locs[1:]):
            if not (isinstance(clause, list) and len(clause) == 2 and isinstance(clause[0], Symbol)):
                raise self.error("origin fields must be (field value)", loc)
            key = clause[0].name
            if key not in ("method", "uri", "sha256"):
                raise UnknownField(f"{self.path}:{loc[0]}: unknown origin field {key!r}")
            fields[key] = (clause[1], loc)
        for key in ("method", "uri", "sha256"):
            if key not in fields:
                raise MissingField(key, f"{self.path}:{form.loc[0]}:{form.loc[1]}")
        method = _literal(fields["method"][0])
        if method not in ORIGIN_METHODS:
            raise self.error(f"unsupported origin method {method!r}", fields["method"][1])
        uri = self.interp.eval(fields["uri"][0], env)
        if not isinstance(uri, str):
            raise self.error("uri must be a string", fields["uri"][1])
        path = uri[len("file://"):] if uri.startswith("file://") else uri
        path = os.path.normpath(os.path.join(self.dir, path))
        sha_expr, sha_loc = fields["sha256"]
        if not (isinstance(sha_expr, list) and len(sha_expr) == 2 and sha_expr[0] is Symbol("base32")
                and isinstance(sha_expr[1], str)):
            raise self.error('sha256 must be (base32 "...")', sha_loc)
        try:
            digest = decode_base32(sha_expr[1], 32)
        except FpmError as e:
            raise self.error(f"bad sha256: {e}", sha_loc) from e
        return Origin(method, path, digest)


def parse_package_file(path, registry: PackageRegistry | None = None) -> list[tuple[str, Package]]:
    return _FileReader(os.fspath(path), registry).read()


# -- registry --------------------------------------------------------------

def version_key(version: str):
    parts = re.split(r"[.\-]", version)
    return tuple((0, int(p), "") if p.isdigit() else (1, 0, p) for p in parts)


class PackageRegistry:
    def __init__(self, packages=()):
        self._by_spec: dict[str, Package] = {}
        self._by_name: dict[str, list[Package]] = {}
        for p in packages:
            self.add(p)

    @classmethod
    def load(cls, directories) -> PackageRegistry:
        if isinstance(directories, (str, os.PathLike)):
            directories = [directories]
        registry = cls()
        for d in directories:
            for dirpath, dirnames, filenames in os.walk(os.fspath(d)):
                dirnames.sort()
                for fn in sorted(filenames):
                    if fn.endswith(".pkg"):
                        for _, pkg in parse_package_file(os.path.join(dirpath, fn), registry):
                            registry.add(pkg)
        return registry

    def add(self, p: Package):
        if p.spec in self._by_spec:
            other = self._by_spec[p.spec]
            raise DuplicatePackage(f"{p.spec} defined twice ({other.location_string} and {p.location_string})")
        self._by_spec[p.spec] = p
        self._by_name.setdefault(p.name, []).append(p)
        self._by_name[p.name].sort(key=lambda q: version_key(q.version))

    def __len__(self):
        return len(self._by_spec)

    def __contains__(self, spec):
        try:
            self.lookup(spec)
            return True
        except PackageNotFound:
            return False

    def lookup(self, spec: str) -> Package:
        """``name@version`` exactly, or the highest version of a bare name."""
        if spec in self._by_spec:
            return self._by_spec[spec]
        versions = self._by_name.get(spec)
        if not versions:
            raise PackageNotFound(f"unknown package {spec!r}")
        return versions[-1]

    def packages(self) -> list[Package]:
        return sorted(self._by_spec.values(), key=lambda p: (p.name, version_key(p.version)))

    def search(self, regex: str | None = None) -> list[Package]:
        pattern = re.compile(regex) if regex else None
        return [p for p in self.packages() if pattern is None or pattern.search(p.name)]


# -- compilation to derivations ----------------------------------------------

_in_progress: contextvars.ContextVar[tuple] = contextvars.ContextVar("packages_in_progress", default=())


def origin_derivation(store: Store, o: Origin, system: str | None = None):
    """Derivation unpacking the origin's file; its sha256 is checked when built."""
    system = system or current_system.get()
    return seed_derivation(store, o.file_name, system, o.path, o.file_name, encode_base32(o.sha256))


def package_derivation(store: Store, p: Package, system: str | None = None):
    """(drv path, Derivation) building ``p`` for ``system``; memoized per store."""
    system = system or current_system.get()
    key = ("package", p, system)
    hit = store.memo.get(key)
    if hit is not None and store.is_valid(hit[0]):
        return hit
    stack = _in_progress.get()
    if p in stack:
        cycle = list(stack[stack.index(p):]) + [p]
        raise DependencyCycle([q.spec for q in cycle])
    token = _in_progress.set(stack + (p,))
    sys_token = current_system.set(system)
    try:
        build_system = lookup_build_system(p.build_system)
        arguments = p.arguments_for(system)
        deps = p.inputs_for(system) + list(p.propagated_inputs)
        labels = [label for label, _ in deps]
        if len(set(labels)) != len(labels):
            raise ParseError(f"{p.spec}: inputs and propagated-inputs share a label")
        input_pairs = [(label, package_derivation(store, dep, system)[0]) for label, dep in deps]
        source, _ = origin_derivation(store, p.source, system)
        result = build_system.build(store, p.full_name, system, source, input_pairs, arguments)
    finally:
        current_system.reset(sys_token)
        _in_progress.reset(token)
    with store.memo_lock:
        store.memo[key] = result
    return result


def propagated_closure(p: Package) -> list[Package]:
    """Packages propagated by ``p``, transitively, in first-seen order."""
    seen, order = set(), []
    stack = [dep for _, dep in reversed(p.propagated_inputs)]
    while stack:
        q = stack.pop()
        if q in seen:
            continue
        seen.add(q)
        order.append(q)
        stack.extend(dep for _, dep in reversed(q.propagated_inputs))
    return order
