"""Entry point of the build stratum.

The engine calls :func:`run_build` when a derivation's builder is the
interpreter seed.  Everything the build sees comes from the derivation
environment: the expression, the input alist, the module list.
"""

from __future__ import annotations

import os

from ..errors import EvalError
from .evaluator import is_true
from .reader import Symbol, parse, parse_one
from .stdlib import BuildContext, make_interpreter

SEED_MARKER = "fpm-interpreter-seed"
SEED_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "seed")


def is_interpreter_seed(path) -> bool:
    return os.path.isfile(os.path.join(os.fspath(path), SEED_MARKER))


def _load(interp, path):
    with open(path, encoding="utf-8") as f:
        interp.eval_toplevel(parse(f.read()))


def run_build(env: dict, build_dir: str, log, seed_dir: str) -> bool:
    """Evaluate ``env["expr"]``; true iff the build succeeded."""
    ctx = BuildContext(env, build_dir, env.get("out"), log)
    interp = make_interpreter(ctx)
    _load(interp, os.path.join(seed_dir, "prelude.bl"))

    define = interp.globals.define
    define(Symbol("%output"), env["out"])
    define(Symbol("%system"), env.get("system", ""))
    inputs = parse_one(env["build-inputs"]) if env.get("build-inputs") else []
    define(Symbol("%build-inputs"), list(inputs))

    module_dir = env.get("module-path", "")
    for name in env.get("modules", "").split():
        path = os.path.join(module_dir, name + ".bl")
        if not os.path.isfile(path):
            raise EvalError(f"module {name} is missing from {module_dir or 'the build inputs'}")
        _load(interp, path)

    result = interp.eval(parse_one(env["expr"]))
    return is_true(result)
