"""Per-user profiles: numbered generations of symlink trees, switched atomically.

Layout under the state directory::

    profiles/<user>/generation-1/      symlink tree + manifest
    profiles/<user>/generation-2/
    profiles/<user>/profile -> generation-2

A transaction builds everything first, materializes the next generation
under a temporary name, renames it into place, and only then flips the
``profile`` link with a single rename.
"""

from __future__ import annotations

import fcntl
import logging
import os
import re
import uuid
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .errors import EmptyTransaction, FpmError, NotInstalled, NothingToRollBack
from .packages import Package, PackageRegistry, package_derivation, propagated_closure
from .store import make_read_only, remove_tree

log = logging.getLogger(__name__)

MANIFEST = "manifest"
_GEN_RE = re.compile(r"^generation-(\d+)$")


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    version: str
    output: str
    propagated: tuple[str, ...] = ()

    def line(self) -> str:
        return f"{self.name}\t{self.version}\t{self.output}\t{','.join(self.propagated)}\n"


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...] = ()

    @classmethod
    def of(cls, entries: Iterable[ManifestEntry]) -> Manifest:
        return cls(tuple(sorted(entries, key=lambda e: e.name)))

    def serialize(self) -> str:
        return "".join(e.line() for e in self.entries)

    @classmethod
    def parse(cls, text: str) -> Manifest:
        entries = []
        for n, line in enumerate(text.splitlines(), 1):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FpmError(f"malformed manifest line {n}: {line!r}")
            name, version, output, props = parts
            entries.append(ManifestEntry(name, version, output, tuple(p for p in props.split(",") if p)))
        return cls.of(entries)

    def by_name(self) -> dict[str, ManifestEntry]:
        return {e.name: e for e in self.entries}

    def names(self) -> list[str]:
        return [e.name for e in self.entries]


@dataclass(frozen=True)
class Generation:
    number: int
    dir: str
    manifest: Manifest = field(compare=False)
    created: float = field(compare=False, default=0.0)


# transaction actions
@dataclass(frozen=True)
class Install:
    spec: str


@dataclass(frozen=True)
class Remove:
    name: str


@dataclass(frozen=True)
class Upgrade:
    regex: str = ""


class Profile:
    def __init__(self, state_dir, user: str):
        self.state_dir = os.path.abspath(os.fspath(state_dir))
        self.user = user
        self.dir = os.path.join(self.state_dir, "profiles", user)
        self.link = os.path.join(self.dir, "profile")

    def __repr__(self):
        return f"Profile({self.dir!r})"

    @contextmanager
    def lock(self):
        os.makedirs(self.dir, exist_ok=True)
        fd = os.open(os.path.join(self.dir, ".lock"), os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX)
            yield self
        finally:
            fcntl.flock(fd, fcntl.LOCK_UN)
            os.close(fd)

    def generation_dir(self, number: int) -> str:
        return os.path.join(self.dir, f"generation-{number}")

    def generations(self) -> list[int]:
        """Numbers of complete generations, ascending."""
        if not os.path.isdir(self.dir):
            return []
        numbers = []
        for entry in os.listdir(self.dir):
            m = _GEN_RE.match(entry)
            if m and os.path.isfile(os.path.join(self.dir, entry, MANIFEST)):
                numbers.append(int(m.group(1)))
        return sorted(numbers)

    def current(self) -> int | None:
        try:
            target = os.readlink(self.link)
        except OSError:
            return None
        m = _GEN_RE.match(os.path.basename(target))
        return int(m.group(1)) if m else None

    def generation(self, number: int) -> Generation:
        d = self.generation_dir(number)
        with open(os.path.join(d, MANIFEST), encoding="utf-8") as f:
            manifest = Manifest.parse(f.read())
        return Generation(number, d, manifest, os.lstat(d).st_mtime)

    def current_generation(self) -> Generation | None:
        n = self.current()
        return self.generation(n) if n is not None else None

    def manifest(self) -> Manifest:
        g = self.current_generation()
        return g.manifest if g else Manifest()

    def switch_to(self, number: int):
        """Atomically point the profile link at generation ``number``."""
        tmp = os.path.join(self.dir, f".profile-{uuid.uuid4().hex}")
        os.symlink(f"generation-{number}", tmp)
        try:
            os.replace(tmp, self.link)
        except BaseException:
            if os.path.lexists(tmp):
                os.unlink(tmp)
            raise


# -- materialization ---------------------------------------------------------

def _link_tree(source: str, target_dir: str, fallback_name: str, step: Callable[[str], None]):
    """Union ``source`` (a store output) into ``target_dir`` as symlinks."""
    if not os.path.isdir(source) or os.path.islink(source):
        _place_link(source, os.path.join(target_dir, fallback_name), step)
        return
    for dirpath, dirnames, filenames in os.walk(source):
        dirnames.sort()
        rel = os.path.relpath(dirpath, source)
        here = target_dir if rel == "." else os.path.join(target_dir, rel)
        if os.path.islink(here) or (os.path.lexists(here) and not os.path.isdir(here)):
            log.warning("profile conflict: %s replaced by a directory from %s", here, source)
            os.unlink(here)
        os.makedirs(here, exist_ok=True)
        for name in sorted(filenames) + [d for d in dirnames if os.path.islink(os.path.join(dirpath, d))]:
            _place_link(os.path.join(dirpath, name), os.path.join(here, name), step)


def _place_link(source: str, dest: str, step):
    step(f"link {dest}")
    if os.path.lexists(dest):
        log.warning("profile conflict: %s now provided by %s", dest, source)
        remove_tree(dest)
    os.symlink(source, dest)


def materialize(profile: Profile, number: int, manifest: Manifest,
                fault_hook: Callable[[str], None] | None = None) -> Generation:
    """Create ``generation-<number>`` for ``manifest`` and make it current.

    ``fault_hook`` is called before every step with a short description; if
    it raises, everything created so far is removed and the profile link is
    left untouched.
    """
    steps = []

    def step(what):
        steps.append(what)
        if fault_hook is not None:
            fault_hook(what)

    final = profile.generation_dir(number)
    tmp = os.path.join(profile.dir, f".tmp-generation-{number}-{uuid.uuid4().hex}")
    renamed = False
    try:
        step("create directory")
        os.makedirs(tmp)
        for entry in manifest.entries:
            for path in entry.propagated:
                _link_tree(path, tmp, os.path.basename(path), step)
            _link_tree(entry.output, tmp, entry.name, step)
        step("write manifest")
        manifest_path = os.path.join(tmp, MANIFEST)
        if os.path.lexists(manifest_path):
            log.warning("profile conflict: a package file named %s is shadowed by the manifest", MANIFEST)
            remove_tree(manifest_path)
        with open(manifest_path, "w", encoding="utf-8") as f:
            f.write(manifest.serialize())
            f.flush()
            os.fsync(f.fileno())
        step("seal generation")
        make_read_only(tmp)
        os.rename(tmp, final)
        renamed = True
        step("switch profile")
        profile.switch_to(number)
    except BaseException:
        remove_tree(tmp)
        if renamed and profile.current() != number:
            remove_tree(final)
        raise
    return profile.generation(number)


# -- transactions --------------------------------------------------------------

def _parse_actions(actions) -> list:
    parsed = []
    for a in actions:
        if isinstance(a, (Install, Remove, Upgrade)):
            parsed.append(a)
        elif isinstance(a, tuple) and len(a) == 2 and a[0] in ("install", "remove", "upgrade"):
            parsed.append({"install": Install, "remove": Remove, "upgrade": Upgrade}[a[0]](a[1]))
        else:
            raise ValueError(f"unknown profile action {a!r}")
    return parsed


def transact(profile: Profile, actions, registry: PackageRegistry, engine,
             system: str | None = None, fault_hook: Callable[[str], None] | None = None) -> Generation | None:
    """Apply install/remove/upgrade actions as one transaction.

    Returns the new generation, or the current one (possibly None) when the
    actions were upgrades only and nothing changed.
    """
    actions = _parse_actions(actions)
    if not actions:
        raise EmptyTransaction("no actions given")
    system = system or engine.system
    store = engine.store
    with profile.lock():
        current = profile.manifest()
        entries: dict[str, object] = dict(current.by_name())
        for action in actions:
            if isinstance(action, Install):
                pkg = registry.lookup(action.spec)
                entries[pkg.name] = pkg
            elif isinstance(action, Remove):
                if action.name not in entries:
                    raise NotInstalled(f"{action.name} is not installed")
                del entries[action.name]
            else:
                pattern = re.compile(action.regex or "")
                for name in sorted(entries):
                    if pattern.search(name) and name in registry:
                        entries[name] = registry.lookup(name)

        # instantiate and build everything before touching the profile
        wanted: dict[str, tuple[Package, list[Package]]] = {}
        drvs = []
        for name, value in entries.items():
            if isinstance(value, Package):
                props = propagated_closure(value)
                wanted[name] = (value, props)
                for p in [value] + props:
                    drvs.append(package_derivation(store, p, system)[0])
        if drvs:
            engine.realize(drvs)

        new_entries = []
        for name, value in entries.items():
            if isinstance(value, Package):
                pkg, props = wanted[name]
                output = str(package_derivation(store, pkg, system)[1].output_path)
                prop_outputs = tuple(str(package_derivation(store, q, system)[1].output_path) for q in props)
                new_entries.append(ManifestEntry(pkg.name, pkg.version, output, prop_outputs))
            else:
                new_entries.append(value)
        manifest = Manifest.of(new_entries)

        only_upgrades = all(isinstance(a, Upgrade) for a in actions)
        if only_upgrades and manifest == current:
            log.info("nothing to upgrade")
            return profile.current_generation()
        existing = [int(m.group(1)) for e in os.listdir(profile.dir) if (m := _GEN_RE.match(e))]
        number = max(existing, default=0) + 1
        return materialize(profile, number, manifest, fault_hook)


def upgrade_matching(profile: Profile, regex: str, registry: PackageRegistry, engine, **kw):
    return transact(profile, [Upgrade(regex)], registry, engine, **kw)


def roll_back(profile: Profile) -> Generation:
    """Switch to the closest older generation; newer ones are kept."""
    with profile.lock():
        current = profile.current()
        older = [n for n in profile.generations() if current is not None and n < current]
        if not older:
            raise NothingToRollBack("no previous generation")
        profile.switch_to(older[-1])
        return profile.generation(older[-1])


def delete_generations(profile: Profile, numbers: Iterable[int] | None = None) -> list[int]:
    """Delete generations (all but the current one by default); never the current."""
    with profile.lock():
        current = profile.current()
        targets = profile.generations() if numbers is None else sorted(set(numbers))
        deleted = []
        for n in targets:
            if n == current:
                continue
            d = profile.generation_dir(n)
            if os.path.isdir(d):
                remove_tree(d)
                deleted.append(n)
        return deleted


def list_installed(profile: Profile, regex: str | None = None) -> list[tuple[str, str, str]]:
    pattern = re.compile(regex) if regex else None
    return [(e.name, e.version, e.output) for e in profile.manifest().entries
            if pattern is None or pattern.search(e.name)]


def list_available(registry: PackageRegistry, regex: str | None = None) -> list[tuple[str, str, str]]:
    return [(p.name, p.version, p.location_string) for p in registry.search(regex)]
