"""Build systems: turn (source, inputs, arguments) into a phase-running derivation.

A build system never writes a derivation by hand.  It assembles a build
expression that loads its modules and calls ``run-phases`` on a phase
list, then hands that to :func:`build_expression_to_derivation`.
"""

from __future__ import annotations

from dataclasses import dataclass

from .buildlang.bridge import build_expression_to_derivation
from .buildlang.reader import Symbol, parse_one
from .errors import ArgumentError, KeyNotFound, UnknownBuildSystem

STANDARD_PHASES = ("unpack", "patch-source-shebangs", "configure", "build", "check", "install")
RECOGNIZED_ARGUMENTS = ("configure-flags", "make-flags", "tests?", "phases")
DEFAULTS = {"configure-flags": "'()", "make-flags": "'()", "tests?": "#t"}

_S = Symbol


def parse_arguments(arguments) -> list[tuple[str, object]]:
    """Split a ``(#:key value ...)`` list into (key, unevaluated expression) pairs."""
    if arguments is None:
        return []
    if not isinstance(arguments, list):
        raise ArgumentError(f"build arguments must be a list, got {arguments!r}")
    if len(arguments) % 2:
        raise ArgumentError("build arguments must alternate #:keyword and value (odd length)")
    pairs = []
    for key, value in zip(arguments[0::2], arguments[1::2]):
        if not (isinstance(key, Symbol) and key.is_keyword):
            raise ArgumentError(f"expected a #:keyword in build arguments, got {key!r}")
        name = key.name[2:]
        if name in (k for k, _ in pairs):
            raise ArgumentError(f"duplicate build argument #:{name}")
        pairs.append((name, value))
    return pairs


@dataclass(frozen=True)
class BuildSystem:
    name: str
    description: str
    modules: tuple[str, ...] = ("generic-build-system",)
    # (standard phase name, replacement procedure defined in one of the modules)
    overrides: tuple[tuple[str, str], ...] = ()

    def phase_list_expr(self):
        expr = _S("%standard-phases")
        for phase, proc in self.overrides:
            expr = [_S("alist-replace"), [_S("quote"), _S(phase)], _S(proc), expr]
        return expr

    def build_expression(self, arguments):
        args = dict(parse_arguments(arguments))
        alist = [
            _S("list"),
            [_S("list"), [_S("quote"), _S("source")], [_S("assoc-ref"), _S("%build-inputs"), "source"]],
            [_S("list"), [_S("quote"), _S("out")], _S("%output")],
            [_S("list"), [_S("quote"), _S("system")], _S("%system")],
            [_S("list"), [_S("quote"), _S("inputs")], _S("%build-inputs")],
            [_S("list"), [_S("quote"), _S("build-dir")], [_S("getcwd")]],
        ]
        for key in ("configure-flags", "make-flags", "tests?"):
            value = args.pop(key) if key in args else parse_one(DEFAULTS[key])
            alist.append([_S("list"), [_S("quote"), _S(key)], value])
        phases = args.pop("phases", _S("%standard-phases"))
        # unknown keywords travel along; phases ignore keys they do not use
        for key, value in args.items():
            alist.append([_S("list"), [_S("quote"), _S(key)], value])
        body = [_S("run-phases"), phases, alist]
        if not self.overrides:
            return body
        return [_S("begin"), [_S("define"), _S("%standard-phases"), self.phase_list_expr()], body]

    def build(self, store, name: str, system: str, source, inputs, arguments):
        """Derivation building ``name`` from the origin derivation ``source``."""
        pairs = ([("source", source)] if source is not None else []) + list(inputs)
        return build_expression_to_derivation(store, name, system, self.build_expression(arguments),
                                              pairs, self.modules)


def variant_build_system(base: BuildSystem, name: str, description: str,
                         modules=(), overrides=None) -> BuildSystem:
    """A build system reusing ``base`` with some standard phases replaced."""
    overrides = dict(overrides or {})
    for phase in overrides:
        if phase not in STANDARD_PHASES:
            raise KeyNotFound(f"{name}: no standard phase named {phase!r} to override")
    return BuildSystem(name, description, base.modules + tuple(modules),
                       base.overrides + tuple(overrides.items()))


generic_build_system = BuildSystem(
    "generic-build-system",
    "unpack, configure by recording flags, copy or script the build, check, install",
)

script_build_system = variant_build_system(
    generic_build_system, "script-build-system",
    "generic phases, configured into Makefile.PL.out and tested with test.bl",
    modules=("script-build-system",),
    overrides={"configure": "script-configure", "check": "script-check"},
)

BUILD_SYSTEMS = {b.name: b for b in (generic_build_system, script_build_system)}
ALIASES = {"gnu-build-system": "generic-build-system"}


def lookup_build_system(name) -> BuildSystem:
    if isinstance(name, BuildSystem):
        return name
    key = name.name if isinstance(name, Symbol) else str(name)
    key = ALIASES.get(key, key)
    try:
        return BUILD_SYSTEMS[key]
    except KeyError:
        raise UnknownBuildSystem(f"unknown build system {key!r}") from None


def generic_build(store, name: str, system: str, source, inputs, arguments):
    return generic_build_system.build(store, name, system, source, inputs, arguments)
