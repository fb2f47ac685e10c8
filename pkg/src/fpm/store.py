"""The immutable store: path naming, interning, validity registry, locking.

Every store object lives directly under the store root as
``<root>/<hash>-<name>`` where ``hash`` is a 160-bit digest rendered in
fpm's base32 alphabet.  Once a path is registered valid it is made
read-only and never changes again.
"""

from __future__ import annotations

import fcntl
import hashlib
import logging
import os
import re
import shutil
import stat
import threading
import time
import uuid
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, TypeVar

from .errors import ClosureViolation, InvalidDigest, InvalidName, IoError, StoreBusy

log = logging.getLogger(__name__)

BASE32_ALPHABET = "0123456789abcdfghijklmnpqrsvwxyz"
HASH_LENGTH = 32
TYPE_TAGS = ("source", "derivation", "output:out")
DEFAULT_LOCK_TIMEOUT = 60.0

REGISTRY_FILE = ".registry"
LOCK_FILE = ".lock"

_NAME_RE = re.compile(r"^[A-Za-z0-9+_\-][A-Za-z0-9+._\-]*")
_BASE_RE = re.compile(r"^([%s]{32})-(.+)" % BASE32_ALPHABET)

T = TypeVar("T")


def encode_base32(data: bytes) -> str:
    """Render bytes as base32, little-endian 5-bit groups, most significant first."""
    n = (len(data) * 8 - 1) // 5 + 1 if data else 0
    chars = []
    for k in range(n - 1, -1, -1):
        i, j = divmod(k * 5, 8)
        c = data[i] >> j
        if i + 1 < len(data):
            c |= data[i + 1] << (8 - j)
        chars.append(BASE32_ALPHABET[c & 0x1F])
    return "".join(chars)


def decode_base32(text: str, nbytes: int) -> bytes:
    """Inverse of :func:`encode_base32` for a digest of ``nbytes`` bytes."""
    expected = (nbytes * 8 - 1) // 5 + 1 if nbytes else 0
    if len(text) != expected:
        raise InvalidDigest(f"expected {expected} base32 characters, got {len(text)}")
    out = bytearray(nbytes)
    for pos, ch in enumerate(text):
        digit = BASE32_ALPHABET.find(ch)
        if digit < 0:
            raise InvalidDigest(f"invalid base32 character {ch!r}")
        k = len(text) - 1 - pos
        i, j = divmod(k * 5, 8)
        out[i] |= (digit << j) & 0xFF
        carry = digit >> (8 - j)
        if i + 1 < nbytes:
            out[i + 1] |= carry
        elif carry:
            raise InvalidDigest("base32 string encodes more bits than the digest holds")
    return bytes(out)


def hash_to_base32(digest: bytes) -> str:
    if len(digest) != 20:
        raise InvalidDigest(f"store path digests are 20 bytes, got {len(digest)}")
    return encode_base32(digest)


def check_name(name: str) -> str:
    if not isinstance(name, str) or not _NAME_RE.fullmatch(name):
        raise InvalidName(f"invalid store path name: {name!r}")
    return name


@dataclass(frozen=True, order=True)
class StorePath:
    root: str
    hash: str
    name: str

    def __str__(self):
        return f"{self.root}/{self.hash}-{self.name}"

    def __fspath__(self):
        return str(self)

    @property
    def base(self) -> str:
        return f"{self.hash}-{self.name}"

    @classmethod
    def parse(cls, text) -> StorePath:
        if isinstance(text, StorePath):
            return text
        text = os.fspath(text)
        root, base = os.path.split(text)
        m = _BASE_RE.fullmatch(base)
        if not root or not m:
            raise InvalidName(f"not a store path: {text!r}")
        return cls(root, m.group(1), check_name(m.group(2)))


def _root_dir(root) -> str:
    return root.root if isinstance(root, Store) else os.fspath(root)


def make_store_path(root, type_tag: str, content_digest: bytes, name: str) -> StorePath:
    """Compute the store path for content with the given sha256 digest."""
    if type_tag not in TYPE_TAGS:
        raise ValueError(f"unknown store path type tag {type_tag!r}")
    if len(content_digest) != 32:
        raise InvalidDigest("content digest must be a 32-byte sha256")
    check_name(name)
    root_dir = _root_dir(root)
    fingerprint = f"{type_tag}:{content_digest.hex()}:{root_dir}:{name}"
    digest = hashlib.sha256(fingerprint.encode()).digest()[:20]
    return StorePath(root_dir, hash_to_base32(digest), name)


def _length_prefixed(h, data: bytes):
    h.update(len(data).to_bytes(8, "big"))
    h.update(data)


def _serialize_entry(h, full: str, rel: str):
    st = os.lstat(full)
    _length_prefixed(h, rel.encode())
    if stat.S_ISLNK(st.st_mode):
        h.update(b"l\x00")
        _length_prefixed(h, os.fsencode(os.readlink(full)))
    elif stat.S_ISDIR(st.st_mode):
        h.update(b"d\x00")
        _length_prefixed(h, b"")
        for entry in sorted(os.listdir(full), key=os.fsencode):
            _serialize_entry(h, os.path.join(full, entry), f"{rel}/{entry}" if rel else entry)
    elif stat.S_ISREG(st.st_mode):
        h.update(b"f\x01" if st.st_mode & 0o111 else b"f\x00")
        h.update(st.st_size.to_bytes(8, "big"))
        with open(full, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 16), b""):
                h.update(chunk)
    else:
        raise IoError(f"unsupported file type in store object: {full}")


def hash_path(source, recursive: bool) -> bytes:
    """sha256 of a file's bytes, or of the canonical serialization of a tree."""
    source = os.fspath(source)
    h = hashlib.sha256()
    try:
        if recursive:
            _serialize_entry(h, source, "")
        else:
            with open(source, "rb") as f:
                for chunk in iter(lambda: f.read(1 << 16), b""):
                    h.update(chunk)
    except IoError:
        raise
    except OSError as e:
        raise IoError(f"cannot read {source}: {e.strerror}") from e
    return h.digest()


def make_read_only(path):
    path = os.fspath(path)
    for dirpath, dirnames, filenames in os.walk(path, topdown=False):
        for fn in filenames:
            p = os.path.join(dirpath, fn)
            st = os.lstat(p)
            if not stat.S_ISLNK(st.st_mode):
                os.chmod(p, 0o555 if st.st_mode & 0o111 else 0o444)
        for dn in dirnames:
            p = os.path.join(dirpath, dn)
            if not os.path.islink(p):
                os.chmod(p, 0o555)
    st = os.lstat(path)
    if stat.S_ISDIR(st.st_mode):
        os.chmod(path, 0o555)
    elif not stat.S_ISLNK(st.st_mode):
        os.chmod(path, 0o555 if st.st_mode & 0o111 else 0o444)


def make_writable(path):
    path = os.fspath(path)
    if not os.path.lexists(path):
        return
    st = os.lstat(path)
    if stat.S_ISLNK(st.st_mode):
        return
    os.chmod(path, st.st_mode | 0o200)
    if stat.S_ISDIR(st.st_mode):
        for dirpath, dirnames, filenames in os.walk(path):
            for name in dirnames + filenames:
                p = os.path.join(dirpath, name)
                s = os.lstat(p)
                if not stat.S_ISLNK(s.st_mode):
                    os.chmod(p, s.st_mode | 0o200)


def remove_tree(path):
    """rm -rf, including read-only store contents."""
    path = os.fspath(path)
    if not os.path.lexists(path):
        return
    make_writable(path)
    if os.path.isdir(path) and not os.path.islink(path):
        shutil.rmtree(path)
    else:
        os.unlink(path)


def disk_usage(path) -> int:
    path = os.fspath(path)
    st = os.lstat(path)
    if not stat.S_ISDIR(st.st_mode):
        return st.st_size
    total = st.st_size
    for dirpath, dirnames, filenames in os.walk(path):
        for name in dirnames + filenames:
            total += os.lstat(os.path.join(dirpath, name)).st_size
    return total


class Store:
    """A store rooted at a directory; safe to share between threads."""

    def __init__(self, root, lock_timeout: float = DEFAULT_LOCK_TIMEOUT):
        os.makedirs(root, exist_ok=True)
        self.root = os.path.realpath(root)
        self.lock_timeout = lock_timeout
        self._rlock = threading.RLock()
        self._mutex = threading.Lock()
        self._depth = 0
        self._lock_fd = None
        self._registry: dict[str, tuple[str, ...]] = {}
        self._registry_sig = None
        self._dirty = False
        self.memo: dict = {}
        self.memo_lock = threading.RLock()
        # number of times content was actually copied into the store
        self.copies = 0

    def __repr__(self):
        return f"Store({self.root!r})"

    # -- locking ---------------------------------------------------------

    @property
    def lock_path(self) -> str:
        return os.path.join(self.root, LOCK_FILE)

    @property
    def registry_path(self) -> str:
        return os.path.join(self.root, REGISTRY_FILE)

    @contextmanager
    def lock(self, timeout: float | None = None):
        """Hold the exclusive store lock; reentrant within a thread."""
        timeout = self.lock_timeout if timeout is None else timeout
        deadline = time.monotonic() + timeout
        if not self._rlock.acquire(timeout=max(timeout, 0)):
            raise StoreBusy(f"timed out waiting for {self.lock_path}")
        try:
            if self._depth == 0:
                self._lock_fd = self._acquire_file_lock(deadline)
                with self._mutex:
                    self._load_registry()
                    self._depth = 1
            else:
                self._depth += 1
            try:
                yield self
            finally:
                with self._mutex:
                    self._depth -= 1
                    release = self._depth == 0
                if release:
                    try:
                        if self._dirty:
                            self._write_registry()
                    finally:
                        fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
                        os.close(self._lock_fd)
                        self._lock_fd = None
        finally:
            self._rlock.release()

    def _acquire_file_lock(self, deadline):
        fd = os.open(self.lock_path, os.O_RDWR | os.O_CREAT, 0o644)
        while True:
            try:
                fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
                return fd
            except BlockingIOError:
                if time.monotonic() >= deadline:
                    os.close(fd)
                    raise StoreBusy(f"timed out waiting for {self.lock_path}") from None
                time.sleep(0.005)

    @property
    def locked(self) -> bool:
        return self._depth > 0

    # -- registry --------------------------------------------------------

    def _file_sig(self):
        try:
            st = os.stat(self.registry_path)
        except FileNotFoundError:
            return None
        return (st.st_ino, st.st_mtime_ns, st.st_size)

    def _load_registry(self):
        sig = self._file_sig()
        if sig == self._registry_sig:
            return
        registry = {}
        if sig is not None:
            with open(self.registry_path, encoding="utf-8") as f:
                for line in f:
                    line = line.rstrip("\n")
                    if not line:
                        continue
                    path, _, refs = line.partition("\t")
                    registry[path] = tuple(r for r in refs.split(",") if r)
        self._registry = registry
        self._registry_sig = sig
        self._dirty = False

    def _write_registry(self):
        tmp = os.path.join(self.root, f".registry.tmp-{uuid.uuid4().hex}")
        with open(tmp, "w", encoding="utf-8") as f:
            for path in sorted(self._registry):
                f.write(f"{path}\t{','.join(self._registry[path])}\n")
        os.replace(tmp, self.registry_path)
        self._registry_sig = self._file_sig()
        self._dirty = False

    def _snapshot(self) -> dict[str, tuple[str, ...]]:
        with self._mutex:
            if self._depth == 0:
                self._load_registry()
            return self._registry

    def is_valid(self, path) -> bool:
        return str(path) in self._snapshot()

    def references(self, path) -> list[StorePath]:
        refs = self._snapshot().get(str(path))
        if refs is None:
            raise ClosureViolation(f"{path} is not a valid store path")
        return [StorePath.parse(r) for r in refs]

    def valid_paths(self) -> list[StorePath]:
        return [StorePath.parse(p) for p in sorted(self._snapshot())]

    def registry_items(self) -> dict[str, tuple[str, ...]]:
        return dict(self._snapshot())

    def register_valid(self, path, references: Iterable = ()):
        """Mark a fully written path valid with its references; make it read-only."""
        path = StorePath.parse(path)
        key = str(path)
        refs = tuple(sorted({str(r) for r in references}))
        with self.lock():
            for r in refs:
                if r != key and r not in self._registry:
                    raise ClosureViolation(f"{key} references invalid path {r}")
            if not os.path.lexists(key):
                raise IoError(f"cannot register missing path {key}")
            if key in self._registry:
                if self._registry[key] != refs:
                    raise ClosureViolation(f"references of {key} are already recorded")
                return
            make_read_only(key)
            with self._mutex:
                self._registry[key] = refs
                self._dirty = True

    def unregister(self, paths: Iterable):
        with self.lock():
            with self._mutex:
                for p in paths:
                    self._registry.pop(str(p), None)
                self._dirty = True

    def audit(self) -> list[str]:
        """Return a list of registry consistency problems (empty when sound)."""
        problems = []
        registry = self._snapshot()
        for path, refs in registry.items():
            if not os.path.lexists(path):
                problems.append(f"{path}: registered but missing")
            for r in refs:
                if r not in registry:
                    problems.append(f"{path}: dangling reference {r}")
        return problems

    # -- interning -------------------------------------------------------

    def make_path(self, type_tag: str, content_digest: bytes, name: str) -> StorePath:
        return make_store_path(self.root, type_tag, content_digest, name)

    def to_store_path(self, path) -> StorePath | None:
        """Map any file name inside the store to the top-level store path."""
        path = os.fspath(path)
        prefix = self.root + os.sep
        if not path.startswith(prefix):
            return None
        top = path[len(prefix):].split(os.sep, 1)[0]
        try:
            return StorePath.parse(os.path.join(self.root, top))
        except InvalidName:
            return None

    def temp_path(self) -> str:
        return os.path.join(self.root, f".tmp-{uuid.uuid4().hex}")

    def _install(self, path: StorePath, fill: Callable[[str], None]):
        """Write a new object at ``path`` via a temp name and rename."""
        target = str(path)
        if os.path.lexists(target):
            # leftover of an interrupted build or add; never valid here
            remove_tree(target)
        tmp = self.temp_path()
        try:
            fill(tmp)
            os.rename(tmp, target)
        except BaseException:
            remove_tree(tmp)
            raise
        self.copies += 1

    def add_to_store(self, name: str, source, recursive: bool = False) -> StorePath:
        check_name(name)
        source = os.fspath(source)
        if not os.path.lexists(source):
            raise IoError(f"no such file: {source}")
        if not recursive and os.path.isdir(source):
            raise IoError(f"{source} is a directory; use recursive=True")
        digest = hash_path(source, recursive)
        path = self.make_path("source", digest, name)
        with self.lock():
            if str(path) in self._registry:
                return path

            def fill(tmp):
                try:
                    if recursive and os.path.isdir(source) and not os.path.islink(source):
                        shutil.copytree(source, tmp, symlinks=True)
                    elif os.path.islink(source):
                        os.symlink(os.readlink(source), tmp)
                    else:
                        shutil.copy2(source, tmp)
                except OSError as e:
                    raise IoError(f"cannot copy {source}: {e}") from e

            self._install(path, fill)
            self.register_valid(path, [])
        return path

    def add_text(self, name: str, data, references: Iterable = (), type_tag: str = "source") -> StorePath:
        """Intern a single file with the given contents."""
        if isinstance(data, str):
            data = data.encode()
        path = self.make_path(type_tag, hashlib.sha256(data).digest(), name)
        with self.lock():
            if str(path) in self._registry:
                return path

            def fill(tmp):
                with open(tmp, "wb") as f:
                    f.write(data)

            self._install(path, fill)
            self.register_valid(path, references)
        return path


def add_to_store(store: Store, name: str, recursive: bool, source) -> StorePath:
    return store.add_to_store(name, source, recursive)


def register_valid(store: Store, path, references: Iterable = ()):
    store.register_valid(path, references)


def with_store_lock(store: Store, action: Callable[[], T], timeout: float | None = None) -> T:
    with store.lock(timeout):
        return action()
