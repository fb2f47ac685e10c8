"""Command-line front end: ``fpm package|build|gc|graph|config``.

Data (paths, listings, DOT) goes to standard output, diagnostics to
standard error.  Exit status: 0 success, 1 user error, 2 build failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass

from .derivation import closure_of, read_derivation
from .engine import DEFAULT_SYSTEM, BuildEngine
from .errors import BuildFailed, FpmError
from .gc import gc
from .packages import PackageRegistry, package_derivation
from .profiles import (
    Install,
    Profile,
    Remove,
    Upgrade,
    delete_generations,
    list_available,
    list_installed,
    roll_back,
    transact,
)
from .store import StorePath, Store

log = logging.getLogger("fpm")

EXIT_OK, EXIT_USER, EXIT_BUILD = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass(frozen=True)
class CliConfig:
    store: str
    state: str
    system: str
    max_jobs: int
    pkg_path: tuple[str, ...]
    user: str

    @classmethod
    def resolve(cls, args, environ=None) -> CliConfig:
        env = os.environ if environ is None else environ

        def pick(flag, var, default):
            if flag is not None:
                return flag
            return env.get(var) or default

        state = os.path.abspath(pick(args.state, "FPM_STATE", ".fpm"))
        store = os.path.abspath(pick(args.store, "FPM_STORE", os.path.join(state, "store")))
        jobs = pick(args.max_jobs, "FPM_MAX_JOBS", "1")
        try:
            jobs = int(jobs)
        except ValueError:
            raise UsageError(f"max jobs must be an integer, got {jobs!r}") from None
        if jobs < 1:
            raise UsageError("max jobs must be positive")
        pkg_path = pick(args.pkg_path, "FPM_PKG_PATH", "")
        user = pick(args.user, "FPM_USER", env.get("USER") or "default")
        return cls(store, state, pick(args.system, "FPM_SYSTEM", DEFAULT_SYSTEM), jobs,
                   tuple(p for p in pkg_path.split(":") if p), user)


class Session:
    """Lazily created store, engine and registry for one invocation."""

    def __init__(self, config: CliConfig):
        self.config = config
        self._store = self._engine = self._registry = None

    @property
    def store(self) -> Store:
        if self._store is None:
            self._store = Store(self.config.store)
        return self._store

    @property
    def engine(self) -> BuildEngine:
        if self._engine is None:
            self._engine = BuildEngine(self.store, self.config.state, self.config.system, self.config.max_jobs)
        return self._engine

    @property
    def registry(self) -> PackageRegistry:
        if self._registry is None:
            self._registry = PackageRegistry.load(self.config.pkg_path)
        return self._registry

    @property
    def profile(self) -> Profile:
        return Profile(self.config.state, self.config.user)

    def derivation_for(self, name: str) -> StorePath:
        if name.endswith(".drv") and os.path.isfile(name):
            return StorePath.parse(os.path.abspath(name))
        pkg = self.registry.lookup(name)
        return package_derivation(self.store, pkg, self.config.system)[0]


def _print_rows(rows, out):
    for row in rows:
        print("\t".join(row), file=out)


def cmd_package(session: Session, args, out) -> int:
    changes = bool(args.install or args.remove or args.upgrade is not None)
    if args.roll_back and changes:
        raise UsageError("--roll-back cannot be combined with --install, --remove or --upgrade")
    if not (changes or args.roll_back or args.delete_generations
            or args.list_installed is not None or args.list_available is not None):
        raise UsageError("nothing to do; see fpm package --help")
    profile = session.profile
    if changes:
        actions = [Install(s) for s in args.install] + [Remove(n) for n in args.remove]
        if args.upgrade is not None:
            actions.append(Upgrade(args.upgrade))
        before = profile.current()
        gen = transact(profile, actions, session.registry, session.engine, session.config.system)
        if gen is None or gen.number == before:
            print("nothing to do", file=sys.stderr)
        else:
            print(f"switched to generation {gen.number}", file=sys.stderr)
    if args.roll_back:
        gen = roll_back(profile)
        print(f"switched to generation {gen.number}", file=sys.stderr)
    if args.delete_generations:
        deleted = delete_generations(profile)
        print(f"deleted {len(deleted)} generations", file=sys.stderr)
    if args.list_installed is not None:
        _print_rows(list_installed(profile, args.list_installed or None), out)
    if args.list_available is not None:
        _print_rows(list_available(session.registry, args.list_available or None), out)
    return EXIT_OK


def cmd_build(session: Session, args, out) -> int:
    drv = session.derivation_for(args.name)
    engine = session.engine
    results = engine.build_derivations([drv])
    target = results[-1]
    print(f"{engine.builders_executed} builders executed", file=sys.stderr)
    for r in results:
        if r.status == "failed":
            print(f"build of {r.drv_path} failed: {r.error}", file=sys.stderr)
            print(f"log: {r.log_path}", file=sys.stderr)
            return EXIT_BUILD
    print(target.output_path, file=out)
    return EXIT_OK


def cmd_gc(session: Session, args, out) -> int:
    report = gc(session.store, session.config.state, dry_run=args.dry_run)
    for p in report.deleted if args.dry_run else ():
        print(p, file=out)
    for p, reason in report.failed:
        print(f"could not delete {p}: {reason}", file=sys.stderr)
    print(report.summary(), file=out)
    return EXIT_OK


def derivation_graph_dot(store: Store, drv_path) -> str:
    """DOT text of the derivation DAG rooted at ``drv_path``; edges point input to dependent."""
    nodes = closure_of(store, [drv_path])
    lines = ["digraph derivations {"]
    for d in nodes:
        lines.append(f'  "{d.drv_path.base}" [label="{d.name}"];')
    for d in nodes:
        for i in d.inputs:
            lines.append(f'  "{i.drv_path.base}" -> "{d.drv_path.base}";')
    lines.append("}")
    return "\n".join(lines) + "\n"


def cmd_graph(session: Session, args, out) -> int:
    drv = session.derivation_for(args.name)
    read_derivation(session.store, drv)
    out.write(derivation_graph_dot(session.store, drv))
    return EXIT_OK


def cmd_config(session: Session, args, out) -> int:
    c = session.config
    for key, value in (("store", c.store), ("state", c.state), ("system", c.system),
                       ("max-jobs", c.max_jobs), ("pkg-path", ":".join(c.pkg_path)), ("user", c.user),
                       ("module-path", os.environ.get("FPM_MODULE_PATH", ""))):
        print(f"{key}\t{value}", file=out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fpm", description="A small purely functional package manager.")
    parser.add_argument("--store", help="store directory (FPM_STORE)")
    parser.add_argument("--state", help="state directory (FPM_STATE)")
    parser.add_argument("--system", help="target system (FPM_SYSTEM)")
    parser.add_argument("--max-jobs", help="concurrent builds (FPM_MAX_JOBS)")
    parser.add_argument("--pkg-path", help="colon-separated package directories (FPM_PKG_PATH)")
    parser.add_argument("--module-path", help="colon-separated build module directories (FPM_MODULE_PATH)")
    parser.add_argument("--user", help="profile owner (FPM_USER)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("package", help="install, remove, upgrade, roll back, list")
    p.add_argument("-i", "--install", action="append", default=[], metavar="NAME[@VERSION]")
    p.add_argument("-r", "--remove", action="append", default=[], metavar="NAME")
    p.add_argument("-u", "--upgrade", nargs="?", const="", metavar="REGEX")
    p.add_argument("--roll-back", action="store_true")
    p.add_argument("--delete-generations", action="store_true",
                   help="delete every generation except the current one")
    p.add_argument("-I", "--list-installed", nargs="?", const="", metavar="REGEX")
    p.add_argument("-A", "--list-available", nargs="?", const="", metavar="REGEX")
    p.set_defaults(func=cmd_package)

    p = sub.add_parser("build", help="build a package or a .drv file and print its output")
    p.add_argument("name")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("gc", help="delete store paths unreachable from any root")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_gc)

    p = sub.add_parser("graph", help="print the derivation graph in DOT")
    p.add_argument("name")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("config", help="print the resolved configuration")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="fpm: %(levelname)s: %(message)s", stream=sys.stderr)
    if args.module_path is not None:
        os.environ["FPM_MODULE_PATH"] = args.module_path
    try:
        session = Session(CliConfig.resolve(args))
        return args.func(session, args, out)
    except UsageError as e:
        print(f"fpm: {e}", file=sys.stderr)
        return EXIT_USER
    except BuildFailed as e:
        print(f"fpm: build failed: {e}", file=sys.stderr)
        if e.log:
            print(f"log: {e.log}", file=sys.stderr)
        return EXIT_BUILD
    except FpmError as e:
        print(f"fpm: {e}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
