"""Garbage collection: everything unreachable from a root is deleted.

Roots are the store paths named by any profile generation (manifest
entries and the targets of its symlinks) and by symlinks placed in
``<state>/gcroots/``.  Reachability follows the references recorded in
the registry at registration time; outputs never change, so those
records never go stale.
"""

from __future__ import annotations

import logging
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

from .graph import topological_order
from .profiles import MANIFEST, Manifest, Profile
from .store import Store, StorePath, disk_usage, make_writable, remove_tree

log = logging.getLogger(__name__)


@dataclass
class GcReport:
    deleted: list[StorePath] = field(default_factory=list)
    freed_bytes: int = 0
    kept: int = 0
    failed: list[tuple[StorePath, str]] = field(default_factory=list)
    dry_run: bool = False

    def summary(self) -> str:
        verb = "would delete" if self.dry_run else "deleted"
        return f"{verb} {len(self.deleted)} paths, freed {self.freed_bytes}"


def _store_path_of(store: Store, target: str) -> StorePath | None:
    return store.to_store_path(os.path.normpath(target))


def _generation_roots(store: Store, gen_dir: str) -> set[StorePath]:
    roots = set()
    manifest_path = os.path.join(gen_dir, MANIFEST)
    if os.path.isfile(manifest_path):
        with open(manifest_path, encoding="utf-8") as f:
            for entry in Manifest.parse(f.read()).entries:
                for p in (entry.output, *entry.propagated):
                    sp = _store_path_of(store, p)
                    if sp is not None:
                        roots.add(sp)
    for dirpath, dirnames, filenames in os.walk(gen_dir):
        for name in dirnames + filenames:
            full = os.path.join(dirpath, name)
            if os.path.islink(full):
                sp = _store_path_of(store, os.path.join(dirpath, os.readlink(full)))
                if sp is not None:
                    roots.add(sp)
    return roots


def collect_roots(store: Store, state_dir) -> list[StorePath]:
    """All store paths anchored by profiles or explicit root links, sorted."""
    state_dir = os.fspath(state_dir)
    roots: set[StorePath] = set()
    profiles_dir = os.path.join(state_dir, "profiles")
    if os.path.isdir(profiles_dir):
        for user in sorted(os.listdir(profiles_dir)):
            profile = Profile(state_dir, user)
            for n in profile.generations():
                roots |= _generation_roots(store, profile.generation_dir(n))
            link = profile.link
            if os.path.islink(link) and not os.path.exists(link):
                log.warning("profile link %s points at a missing generation", link)
    gcroots = os.path.join(state_dir, "gcroots")
    if os.path.isdir(gcroots):
        for name in sorted(os.listdir(gcroots)):
            link = os.path.join(gcroots, name)
            if os.path.islink(link):
                target = os.path.join(gcroots, os.readlink(link))
            else:
                target = link
            sp = _store_path_of(store, target)
            if not os.path.lexists(target):
                log.warning("ignoring dangling GC root %s -> %s", link, target)
                continue
            if sp is None:
                log.warning("ignoring GC root %s: %s is not in the store", link, target)
                continue
            roots.add(sp)
    return sorted(roots)


def live_set(store: Store, roots: Iterable) -> set[StorePath]:
    """Transitive closure of ``roots`` over registered references."""
    registry = store.registry_items()
    live: set[str] = set()
    queue = deque(str(r) for r in roots)
    while queue:
        p = queue.popleft()
        if p in live or p not in registry:
            continue
        live.add(p)
        queue.extend(r for r in registry[p] if r not in live)
    return {StorePath.parse(p) for p in live}


def add_root(state_dir, name: str, path):
    """Create ``<state>/gcroots/<name>`` pointing at ``path``."""
    d = os.path.join(os.fspath(state_dir), "gcroots")
    os.makedirs(d, exist_ok=True)
    link = os.path.join(d, name)
    if os.path.lexists(link):
        os.unlink(link)
    os.symlink(os.fspath(path), link)
    return link


def gc(store: Store, state_dir, dry_run: bool = False) -> GcReport:
    """Delete every valid path not reachable from a root."""
    report = GcReport(dry_run=dry_run)
    with store.lock():
        live = live_set(store, collect_roots(store, state_dir))
        registry = store.registry_items()
        dead = {p for p in registry if StorePath.parse(p) not in live}
        report.kept = len(registry) - len(dead)
        # referrers go first so the registry never holds a dangling reference
        order = _referrers_first(dead, registry)
        blocked: set[str] = set()
        for p in order:
            sp = StorePath.parse(p)
            if p in blocked:
                report.kept += 1
                continue
            size = disk_usage(p) if os.path.lexists(p) else 0
            if dry_run:
                report.deleted.append(sp)
                report.freed_bytes += size
                continue
            trash = os.path.join(store.root, f".trash-{sp.hash}")
            try:
                _move_to_trash(p, trash)
            except OSError as e:
                log.warning("cannot delete %s: %s", p, e)
                report.failed.append((sp, str(e)))
                report.kept += 1
                # keep what it refers to, so the registry stays closed
                blocked |= _closure(registry, [p]) - {p}
                continue
            store.unregister([p])
            remove_tree(trash)
            report.deleted.append(sp)
            report.freed_bytes += size
    report.deleted.sort()
    return report


def _move_to_trash(path: str, trash: str):
    if os.path.lexists(path):
        make_writable(path)
        os.rename(path, trash)


def _closure(registry, roots) -> set[str]:
    seen, queue = set(), deque(roots)
    while queue:
        p = queue.popleft()
        if p in seen or p not in registry:
            continue
        seen.add(p)
        queue.extend(registry[p])
    return seen


def _referrers_first(dead: set[str], registry) -> list[str]:
    """Dead paths ordered so that each comes before everything it references."""
    deps_order = topological_order(sorted(dead), lambda p: [r for r in registry[p] if r in dead and r != p])
    return list(reversed(deps_order))
