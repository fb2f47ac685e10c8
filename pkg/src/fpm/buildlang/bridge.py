"""Host side of the two strata: turn build expressions into derivations.

A build expression never runs on the host.  It is printed into the
derivation environment under ``expr`` and evaluated later by the
interpreter seed, which is itself a derivation every expression-built
derivation takes as an input.
"""

from __future__ import annotations

import os

from ..derivation import derivation, read_derivation
from ..errors import ModuleNotFound
from ..store import Store, encode_base32, hash_path
from .reader import parse, write
from .runner import SEED_DIR

BUILTIN_MODULE_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "modules")
SEED_NAME = "buildlang-bootstrap"


def module_search_path() -> list[str]:
    extra = [d for d in os.environ.get("FPM_MODULE_PATH", "").split(":") if d]
    return extra + [BUILTIN_MODULE_DIR]


def find_module(name: str) -> str:
    for d in module_search_path():
        candidate = os.path.join(d, name + ".bl")
        if os.path.isfile(candidate):
            return candidate
    raise ModuleNotFound(f"no module {name!r} in {':'.join(module_search_path())}")


def seed_derivation(store: Store, name: str, system: str, source, src_name: str, digest=None):
    """Derivation that unpacks one interned file or tree, checking its sha256.

    ``digest`` is the expected sha256 in base32; by default that of ``source``.
    """
    recursive = os.path.isdir(source)
    src = store.add_to_store(src_name, source, recursive)
    if digest is None:
        digest = encode_base32(hash_path(src, recursive))
    return derivation(store, name, system, "builtin:unpack-seed",
                      env=[("sha256", digest)], sources=[src])


def interpreter_seed(store: Store, system: str):
    """The derivation producing the build-language interpreter seed."""
    key = ("interpreter-seed", system)
    hit = store.memo.get(key)
    if hit is not None and store.is_valid(hit[0]):
        return hit
    result = seed_derivation(store, SEED_NAME, system, SEED_DIR, "interpreter-seed")
    with store.memo_lock:
        store.memo[key] = result
    return result


def _expression_drv(store, name, system, expr, inputs, env_extra=(), sources=()):
    seed_drv, seed = interpreter_seed(store, system)
    pairs = [[label, str(read_derivation(store, drv).output_path)] for label, drv in inputs]
    env = [
        ("system", system),
        ("expr", write(expr)),
        ("build-inputs", write(pairs)),
        *env_extra,
    ]
    drv_inputs = [(str(drv), label) for label, drv in inputs] + [(str(seed_drv), "interpreter")]
    return derivation(store, name, system, seed.output_path, env=env,
                      inputs=drv_inputs, sources=sources)


def module_import(store: Store, system: str, modules: list[str]):
    """Pair of derivations: one copying module sources, one parse-checking them."""
    files = [(m, store.add_to_store(m + ".bl", find_module(m))) for m in modules]
    copy = parse("""
        (begin
          (mkdir-p %output)
          (for-each (lambda (entry)
                      (copy-file (cadr entry) (string-append %output "/" (car entry) ".bl")))
                    (quote FILES))
          #t)""".replace("FILES", write([[m, str(p)] for m, p in files])))[0]
    imported, _ = _expression_drv(store, "module-import", system, copy, [],
                                  sources=[p for _, p in files])
    check = parse("""
        (let ((src (assoc-ref %build-inputs "module-import")))
          (mkdir-p %output)
          (for-each (lambda (name)
                      (check-syntax (string-append src "/" name ".bl"))
                      (copy-file (string-append src "/" name ".bl")
                                 (string-append %output "/" name ".bl")))
                    (quote NAMES))
          #t)""".replace("NAMES", write(list(modules))))[0]
    return _expression_drv(store, "module-import-compiled", system, check,
                           [("module-import", imported)])


def build_expression_to_derivation(store: Store, name: str, system: str, expr,
                                   input_pairs=(), modules=(), sources=()):
    """Derivation whose builder evaluates ``expr`` with %output and %build-inputs bound."""
    inputs = [(label, drv) for label, drv in input_pairs]
    labels = [label for label, _ in inputs]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate input labels for {name}: {labels}")
    env_extra = []
    if modules:
        compiled, compiled_d = module_import(store, system, list(modules))
        inputs.append(("modules", compiled))
        env_extra = [("modules", " ".join(modules)),
                     ("module-path", str(compiled_d.output_path))]
    return _expression_drv(store, name, system, expr, inputs, env_extra, sources)
