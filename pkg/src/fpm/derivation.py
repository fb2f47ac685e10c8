"""The derivation primitive and its canonical on-disk form.

A ``.drv`` file is a single s-expression::

    (derivation
      (name "example-1.0")
      (system "x86_64-linux")
      (builder "/.../xxxx-static-bash")
      (args "-c" "echo hello > $out")
      (env ("out" "/.../yyyy-example-1.0"))
      (inputs ("/.../zzzz-dep.drv" "dep") ...)
      (sources "/.../wwww-file" ...)
      (output "/.../yyyy-example-1.0"))
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Union

from .buildlang.reader import SList, Symbol, parse, quote_string
from .errors import ClosureViolation, ParseError, ReservedKey, UnknownField
from .graph import topological_order
from .store import BASE32_ALPHABET, Store, StorePath, check_name, make_store_path

BUILTIN_TAGS = ("builtin:unpack-seed", "builtin:write-text")
OUTPUT_PLACEHOLDER = "0" * 32
FIELDS = ("name", "system", "builder", "args", "env", "inputs", "sources", "output")


@dataclass(frozen=True)
class BuiltinTag:
    tag: str

    def __post_init__(self):
        if self.tag not in BUILTIN_TAGS:
            raise ValueError(f"unknown builtin builder {self.tag!r}")

    def __str__(self):
        return self.tag


@dataclass(frozen=True)
class DerivationInput:
    drv_path: StorePath
    reason: str = ""


Builder = Union[StorePath, BuiltinTag]


@dataclass(frozen=True)
class Derivation:
    name: str
    system: str
    builder: Builder
    args: tuple[str, ...] = ()
    env: tuple[tuple[str, str], ...] = ()
    inputs: tuple[DerivationInput, ...] = ()
    sources: tuple[StorePath, ...] = ()
    output_path: StorePath = field(default=None)

    @cached_property
    def drv_path(self) -> StorePath:
        data = write_drv(self)
        return make_store_path(self.output_path.root, "derivation",
                               hashlib.sha256(data).digest(), self.name + ".drv")

    @property
    def env_map(self) -> dict[str, str]:
        return dict(self.env)


def coerce_builder(builder) -> Builder:
    if isinstance(builder, (StorePath, BuiltinTag)):
        return builder
    text = str(builder)
    if text.startswith("builtin:"):
        return BuiltinTag(text)
    return StorePath.parse(text)


def coerce_input(item) -> DerivationInput:
    if isinstance(item, DerivationInput):
        return item
    if isinstance(item, (tuple, list)):
        path, label = item
        return DerivationInput(StorePath.parse(path), str(label))
    return DerivationInput(StorePath.parse(item), "")


def _serialize(name, system, builder, args, env, inputs, sources, output) -> bytes:
    q = quote_string
    lines = [
        "(derivation",
        f"  (name {q(name)})",
        f"  (system {q(system)})",
        f"  (builder {q(str(builder))})",
        "  (args" + "".join(" " + q(a) for a in args) + ")",
        "  (env" + "".join(f" ({q(k)} {q(v)})" for k, v in env) + ")",
        "  (inputs" + "".join(f" ({q(str(i.drv_path))} {q(i.reason)})" for i in inputs) + ")",
        "  (sources" + "".join(" " + q(str(s)) for s in sources) + ")",
        f"  (output {q(str(output))}))",
    ]
    return ("\n".join(lines) + "\n").encode("utf-8")


def write_drv(d: Derivation) -> bytes:
    """Canonical byte serialization of a derivation."""
    return _serialize(d.name, d.system, d.builder, d.args, d.env, d.inputs, d.sources, d.output_path)


def _strings(form, what) -> list[str]:
    for x in form[1:]:
        if not isinstance(x, str):
            raise ParseError(f"{what}: expected strings", *(form.loc or (None, None)))
    return list(form[1:])


def _one_string(form, what) -> str:
    values = _strings(form, what)
    if len(values) != 1:
        raise ParseError(f"{what}: expected exactly one string", *(form.loc or (None, None)))
    return values[0]


def _pairs(form, what) -> list[tuple[str, str]]:
    out = []
    for item in form[1:]:
        if not (isinstance(item, list) and len(item) == 2 and all(isinstance(x, str) for x in item)):
            raise ParseError(f"{what}: expected (string string) pairs", *(form.loc or (None, None)))
        out.append((item[0], item[1]))
    return out


def parse_drv(data) -> Derivation:
    """Parse a ``.drv`` file; fields may appear in any order."""
    items = parse(data)
    if len(items) != 1 or not isinstance(items[0], SList) or not items[0] \
            or items[0][0] is not Symbol("derivation"):
        raise ParseError("not a derivation expression", 1, 1)
    top = items[0]
    fields: dict[str, SList] = {}
    for form in top[1:]:
        if not isinstance(form, list) or not form or not isinstance(form[0], Symbol):
            raise ParseError("malformed derivation field", *(getattr(form, "loc", None) or top.loc))
        key = form[0].name
        if key not in FIELDS:
            raise UnknownField(f"unknown derivation field {key!r}")
        if key in fields:
            raise ParseError(f"duplicate derivation field {key!r}", *(form.loc or top.loc))
        fields[key] = form
    missing = [f for f in FIELDS if f not in fields]
    if missing:
        raise ParseError(f"derivation lacks field(s): {', '.join(missing)}", *top.loc)
    try:
        d = Derivation(
            name=_one_string(fields["name"], "name"),
            system=_one_string(fields["system"], "system"),
            builder=coerce_builder(_one_string(fields["builder"], "builder")),
            args=tuple(_strings(fields["args"], "args")),
            env=tuple(_pairs(fields["env"], "env")),
            inputs=tuple(DerivationInput(StorePath.parse(p), r) for p, r in _pairs(fields["inputs"], "inputs")),
            sources=tuple(StorePath.parse(s) for s in _strings(fields["sources"], "sources")),
            output_path=StorePath.parse(_one_string(fields["output"], "output")),
        )
    except (ValueError, TypeError) as e:
        raise ParseError(f"invalid derivation: {e}", *top.loc) from e
    keys = [k for k, _ in d.env]
    if len(set(keys)) != len(keys):
        raise ParseError("duplicate environment key", *fields["env"].loc)
    if d.env_map.get("out") != str(d.output_path):
        raise ParseError("environment 'out' does not match the output path", *fields["env"].loc)
    return d


def compute_derivation(root, name: str, system: str, builder, args: Iterable[str] = (),
                       env: Iterable = (), inputs: Iterable = (), sources: Iterable = ()) -> Derivation:
    """Build the in-memory derivation record, including its output path.

    The output path is the hash of the serialization with the output (and
    the ``out`` variable) set to a placeholder, which breaks the circularity.
    """
    check_name(name)
    root_dir = root.root if isinstance(root, Store) else str(root)
    builder = coerce_builder(builder)
    args = tuple(str(a) for a in args)
    env = [(str(k), str(v)) for k, v in (env.items() if isinstance(env, dict) else env)]
    keys = [k for k, _ in env]
    if "out" in keys:
        raise ReservedKey("environment key 'out' is reserved for the output path")
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate environment keys")
    inputs = tuple(coerce_input(i) for i in inputs)
    sources = tuple(StorePath.parse(s) for s in sources)
    placeholder_env = tuple(env) + (("out", OUTPUT_PLACEHOLDER),)
    text = _serialize(name, system, builder, args, placeholder_env, inputs, sources, OUTPUT_PLACEHOLDER)
    output = make_store_path(root_dir, "output:out", hashlib.sha256(text).digest(), name)
    return Derivation(name, system, builder, args, tuple(env) + (("out", str(output)),),
                      inputs, sources, output)


def read_derivation(store: Store, drv_path) -> Derivation:
    """Load a ``.drv`` file from the store (cached; store files never change)."""
    key = ("parsed-drv", str(drv_path))
    d = store.memo.get(key)
    if d is None:
        with open(str(drv_path), "rb") as f:
            d = parse_drv(f.read())
        with store.memo_lock:
            store.memo[key] = d
    return d


def store_path_hashes(root: str, texts: Iterable[str]) -> set[str]:
    pattern = re.compile(re.escape(root) + "/([%s]{32})-" % BASE32_ALPHABET)
    found = set()
    for t in texts:
        found.update(pattern.findall(t))
    return found


def declared_hashes(store: Store, d: Derivation) -> set[str]:
    allowed = {s.hash for s in d.sources}
    if isinstance(d.builder, StorePath):
        allowed.add(d.builder.hash)
    allowed.add(d.output_path.hash)
    for i in d.inputs:
        allowed.add(i.drv_path.hash)
        allowed.add(read_derivation(store, i.drv_path).output_path.hash)
    return allowed


def undeclared_references(store: Store, d: Derivation) -> set[str]:
    """Store-path hashes mentioned in args/env that no input or source accounts for."""
    texts = list(d.args) + [v for k, v in d.env if k != "out"]
    return store_path_hashes(store.root, texts) - declared_hashes(store, d)


def _builder_from_input(store: Store, d: Derivation) -> bool:
    return any(read_derivation(store, i.drv_path).output_path == d.builder for i in d.inputs)


def derivation(store: Store, name: str, system: str, builder, args: Iterable[str] = (),
               env: Iterable = (), inputs: Iterable = (), sources: Iterable = ()) -> tuple[StorePath, Derivation]:
    """Instantiate a derivation: write its ``.drv`` file into the store."""
    d = compute_derivation(store, name, system, builder, args, env, inputs, sources)
    data = write_drv(d)
    key = ("drv", data)
    cached = store.memo.get(key)
    if cached is not None and store.is_valid(cached):
        return cached, d

    refs = [i.drv_path for i in d.inputs] + list(d.sources)
    for r in refs:
        if not store.is_valid(r):
            raise ClosureViolation(f"derivation {name} depends on invalid path {r}")
    for i in d.inputs:
        if not i.drv_path.name.endswith(".drv"):
            raise ClosureViolation(f"input {i.drv_path} is not a derivation")
    if isinstance(d.builder, StorePath) and not _builder_from_input(store, d):
        # a builder that no input produces must already be in the store
        if not store.is_valid(d.builder):
            raise ClosureViolation(f"derivation {name} uses invalid builder {d.builder}")
        refs.append(d.builder)
    stray = undeclared_references(store, d)
    if stray:
        raise ClosureViolation(f"derivation {name} mentions undeclared store paths: {sorted(stray)}")

    path = store.add_text(name + ".drv", data, refs, type_tag="derivation")
    with store.memo_lock:
        store.memo[key] = path
        store.memo[("parsed-drv", str(path))] = d
    return path, d


def input_closure(store: Store, drv_path) -> list[Derivation]:
    """All derivations ``drv_path`` depends on (itself last), inputs first."""
    return closure_of(store, [drv_path])


def closure_of(store: Store, drv_paths: Iterable) -> list[Derivation]:
    order = topological_order(
        [str(p) for p in drv_paths],
        lambda p: [str(i.drv_path) for i in read_derivation(store, p).inputs],
    )
    return [read_derivation(store, p) for p in order]
