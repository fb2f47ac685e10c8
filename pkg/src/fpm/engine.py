"""Realizing derivations: scheduling, isolated execution, output checks.

Isolation is logical.  A builder gets a fresh empty directory, exactly the
environment its derivation declares (plus ``out`` and a search path made
of its inputs' ``bin`` directories), and afterwards its output is scanned
for store references, which must all have been declared.
"""

from __future__ import annotations

import logging
import os
import re
import shutil
import subprocess
import tarfile
import tempfile
import threading
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Iterable

from .buildlang.runner import is_interpreter_seed, run_build
from .derivation import BuiltinTag, Derivation, closure_of, read_derivation
from .errors import (
    BuilderNotExecutable,
    BuildFailed,
    FpmError,
    HashMismatch,
    ImpurityDetected,
    IoError,
    MissingOutput,
)
from .store import BASE32_ALPHABET, HASH_LENGTH, Store, StorePath, encode_base32, hash_path, remove_tree

log = logging.getLogger(__name__)

DEFAULT_SYSTEM = "x86_64-linux"
NO_PATH = "/path-not-set"

BUILT, CACHED, FAILED, NOT_ATTEMPTED = "built", "cached", "failed", "not-attempted"

_HASH_RUN_RE = re.compile(rb"[%s]{%d,}" % (BASE32_ALPHABET.encode(), HASH_LENGTH))


@dataclass(frozen=True)
class BuildResult:
    drv_path: StorePath
    output_path: StorePath
    status: str
    log_path: str | None = None
    scanned_references: tuple[StorePath, ...] = ()
    error: Exception | None = field(default=None, compare=False)

    @property
    def ok(self) -> bool:
        return self.status in (BUILT, CACHED)

    @property
    def log(self) -> bytes:
        if not self.log_path or not os.path.exists(self.log_path):
            return b""
        with open(self.log_path, "rb") as f:
            return f.read()


def scan_references(output_path, candidates: Iterable) -> list[StorePath]:
    """Candidates whose hash occurs anywhere in the bytes of ``output_path``."""
    by_hash: dict[str, list[StorePath]] = {}
    for c in candidates:
        c = StorePath.parse(c)
        by_hash.setdefault(c.hash, []).append(c)
    found: set[str] = set()
    path = os.fspath(output_path)

    def scan_bytes(data: bytes):
        for m in _HASH_RUN_RE.finditer(data):
            run = m.group().decode()
            for i in range(len(run) - HASH_LENGTH + 1):
                h = run[i:i + HASH_LENGTH]
                if h in by_hash:
                    found.add(h)

    def scan_file(p):
        try:
            if os.path.islink(p):
                scan_bytes(os.fsencode(os.readlink(p)))
            elif os.path.isfile(p):
                with open(p, "rb") as f:
                    scan_bytes(f.read())
        except OSError as e:
            raise IoError(f"cannot scan {p}: {e.strerror}") from e

    if os.path.isdir(path) and not os.path.islink(path):
        for dirpath, dirnames, filenames in os.walk(path):
            for name in dirnames + filenames:
                full = os.path.join(dirpath, name)
                if os.path.islink(full) or name in filenames:
                    scan_file(full)
    else:
        scan_file(path)
    return sorted(p for h in found for p in by_hash[h])


def check_closure(output_path, scanned: Iterable, declared: Iterable):
    """Fail unless every scanned reference is declared or the output itself."""
    allowed = {str(p) for p in declared} | {str(output_path)}
    offending = sorted(str(p) for p in scanned if str(p) not in allowed)
    if offending:
        raise ImpurityDetected(f"{output_path} refers to undeclared store paths: {', '.join(offending)}",
                               offending)


class BuildEngine:
    def __init__(self, store: Store, state_dir, system: str = DEFAULT_SYSTEM, max_jobs: int = 1):
        if max_jobs < 1:
            raise ValueError("max_jobs must be positive")
        self.store = store
        self.state_dir = os.path.abspath(os.fspath(state_dir))
        self.system = system
        self.max_jobs = max_jobs
        self.builds_dir = os.path.join(self.state_dir, "builds")
        self.logs_dir = os.path.join(self.state_dir, "logs")
        os.makedirs(self.builds_dir, exist_ok=True)
        os.makedirs(self.logs_dir, exist_ok=True)
        self.builders_executed = 0
        self.events: list[tuple[str, str]] = []
        self._lock = threading.Lock()
        self._in_flight: set[str] = set()
        # test hook: called with (derivation, env, build_dir) just before a builder runs
        self.on_builder_start = None

    def log_path(self, drv_path) -> str:
        return os.path.join(self.logs_dir, StorePath.parse(drv_path).hash + ".log")

    def _event(self, kind: str, drv_path):
        with self._lock:
            self.events.append((kind, str(drv_path)))

    # -- scheduling ------------------------------------------------------

    def build_derivations(self, targets: Iterable, max_jobs: int | None = None) -> list[BuildResult]:
        """Build the closure of ``targets``; one result per derivation, closure order."""
        targets = [StorePath.parse(t) for t in targets]
        if not targets:
            return []
        jobs = max_jobs or self.max_jobs
        order = closure_of(self.store, targets)
        keys = [str(d.drv_path) for d in order]
        by_key = dict(zip(keys, order))
        results: dict[str, BuildResult] = {}
        running = {}

        def deps(key):
            return {str(i.drv_path) for i in by_key[key].inputs}

        with ThreadPoolExecutor(max_workers=jobs, thread_name_prefix="fpm-build") as pool:
            while len(results) < len(keys):
                for key in keys:
                    if len(running) >= jobs:
                        break
                    if key in results or key in running:
                        continue
                    states = [results.get(k) for k in deps(key)]
                    if any(r is not None and not r.ok for r in states):
                        d = by_key[key]
                        results[key] = BuildResult(d.drv_path, d.output_path, NOT_ATTEMPTED)
                        continue
                    if all(r is not None for r in states):
                        running[key] = pool.submit(self._realize, by_key[key])
                if not running:
                    continue
                done, _ = wait(list(running.values()), return_when=FIRST_COMPLETED)
                for key in [k for k, f in running.items() if f in done]:
                    results[key] = running.pop(key).result()
        return [results[k] for k in keys]

    def realize(self, targets: Iterable, max_jobs: int | None = None) -> list[BuildResult]:
        """Like :meth:`build_derivations` but raise the first failure's error."""
        results = self.build_derivations(targets, max_jobs)
        for r in results:
            if r.status == FAILED:
                raise r.error
        return results

    # -- one derivation --------------------------------------------------

    def _realize(self, d: Derivation) -> BuildResult:
        out = d.output_path
        if self.store.is_valid(out):
            self._event("cached", d.drv_path)
            return BuildResult(d.drv_path, out, CACHED, self._existing_log(d.drv_path),
                               tuple(self.store.references(out)))
        log_file = self.log_path(d.drv_path)
        with self._lock:
            self._in_flight.add(str(out))
        try:
            with open(log_file, "w", encoding="utf-8") as log_stream:
                try:
                    refs = self._build(d, log_stream)
                except (FpmError, OSError) as e:
                    log_stream.write(f"error: {e}\n")
                    if isinstance(e, BuildFailed) and not e.log:
                        e.log = log_file
                    self._event("failed", d.drv_path)
                    remove_tree(str(out))
                    return BuildResult(d.drv_path, out, FAILED, log_file, error=e)
        finally:
            with self._lock:
                self._in_flight.discard(str(out))
        self._event("finish", d.drv_path)
        return BuildResult(d.drv_path, out, BUILT, log_file, tuple(refs))

    def _existing_log(self, drv_path):
        p = self.log_path(drv_path)
        return p if os.path.exists(p) else None

    def _declared(self, d: Derivation) -> list[StorePath]:
        declared = [read_derivation(self.store, i.drv_path).output_path for i in d.inputs]
        declared += list(d.sources)
        if isinstance(d.builder, StorePath):
            declared.append(d.builder)
        return declared

    def builder_env(self, d: Derivation) -> dict[str, str]:
        env = d.env_map
        bins = [os.path.join(str(p), "bin") for p in self._declared(d)]
        env.setdefault("PATH", ":".join(b for b in bins if os.path.isdir(b)) or NO_PATH)
        return env

    def _build(self, d: Derivation, log_stream) -> list[StorePath]:
        if d.system != self.system:
            raise BuildFailed(f"wrong system: {d.name} is for {d.system}, this engine builds {self.system}")
        for p in self._declared(d):
            if not self.store.is_valid(p):
                raise BuildFailed(f"input {p} of {d.name} is not valid")
        out = str(d.output_path)
        if os.path.lexists(out):
            remove_tree(out)

        before = self._store_entries()
        build_dir = tempfile.mkdtemp(prefix=d.output_path.hash + "-", dir=self.builds_dir)
        try:
            env = self.builder_env(d)
            if self.on_builder_start is not None:
                self.on_builder_start(d, env, build_dir)
            self._event("start", d.drv_path)
            with self._lock:
                self.builders_executed += 1
            self._execute(d, env, build_dir, log_stream)
            log_stream.flush()
        finally:
            remove_tree(build_dir)

        self._audit_store(d, before)
        if not os.path.lexists(out):
            raise MissingOutput(f"builder for {d.name} did not produce {out}")
        candidates = self.store.valid_paths() + [d.output_path]
        refs = scan_references(out, candidates)
        check_closure(out, refs, self._declared(d))
        self.store.register_valid(out, refs)
        return refs

    def _store_entries(self) -> set[str]:
        return {e for e in os.listdir(self.store.root) if not e.startswith(".")}

    def _audit_store(self, d: Derivation, before: set[str]):
        # list first: a concurrent build's output seen here is then either
        # still in flight or already registered when we look below
        entries = self._store_entries()
        with self._lock:
            in_flight = {os.path.basename(p) for p in self._in_flight}
        valid = {p.base for p in self.store.valid_paths()}
        stray = sorted(entries - before - in_flight - valid - {d.output_path.base})
        if stray:
            paths = [os.path.join(self.store.root, s) for s in stray]
            for p in paths:
                remove_tree(p)
            raise ImpurityDetected(f"builder for {d.name} wrote outside its output: {', '.join(paths)}", paths)

    def _execute(self, d: Derivation, env: dict, build_dir: str, log_stream):
        out = str(d.output_path)
        if isinstance(d.builder, BuiltinTag):
            if d.builder.tag == "builtin:write-text":
                with open(out, "w", encoding="utf-8") as f:
                    f.write(env.get("text", ""))
            else:
                self._unpack_seed(d, env, log_stream)
            return
        builder = str(d.builder)
        if os.path.isdir(builder) and is_interpreter_seed(builder):
            try:
                ok = run_build(env, build_dir, log_stream, builder)
            except BuildFailed:
                raise
            except (FpmError, OSError) as e:
                raise BuildFailed(f"build expression of {d.name} failed: {e}") from e
            if not ok:
                raise BuildFailed(f"build expression of {d.name} returned false")
            return
        if not (os.path.isfile(builder) and os.access(builder, os.X_OK)):
            raise BuilderNotExecutable(f"builder {builder} is not an executable file")
        log_stream.flush()
        try:
            proc = subprocess.run([builder, *d.args], env=env, cwd=build_dir,
                                  stdin=subprocess.DEVNULL, stdout=log_stream, stderr=subprocess.STDOUT)
        except OSError as e:
            raise BuilderNotExecutable(f"cannot run builder {builder}: {e}") from e
        if proc.returncode != 0:
            raise BuildFailed(f"builder for {d.name} exited with status {proc.returncode}")

    def _unpack_seed(self, d: Derivation, env: dict, log_stream):
        if len(d.sources) != 1:
            raise BuildFailed(f"{d.name}: builtin:unpack-seed needs exactly one source")
        src = str(d.sources[0])
        recursive = os.path.isdir(src)
        actual = encode_base32(hash_path(src, recursive))
        expected = env.get("sha256")
        if expected is not None and actual != expected:
            raise HashMismatch(expected, actual)
        out = str(d.output_path)
        if recursive:
            shutil.copytree(src, out, symlinks=True)
        elif tarfile.is_tarfile(src):
            os.makedirs(out)
            with tarfile.open(src) as tar:
                tar.extractall(out, filter="data")
        else:
            shutil.copy2(src, out)
        log_stream.write(f"unpacked {src}\n")
