"""Independent oracles and small builders shared by the test modules.

The oracles here deliberately avoid the package's own code paths: base32
goes through one big integer, hashing through hashlib directly, and
reachability through a plain BFS over dicts.
"""

import hashlib
import os
from collections import deque

ALPHABET = "0123456789abcdfghijklmnpqrsvwxyz"
HERE = os.path.dirname(os.path.abspath(__file__))
FIXTURES = os.path.join(HERE, "fixtures")
PACKAGES = os.path.join(FIXTURES, "packages")
TARBALLS = os.path.join(FIXTURES, "tarballs")
BROKEN = os.path.join(FIXTURES, "broken")
GOLDEN = os.path.join(HERE, "golden")
MODULES = os.path.join(FIXTURES, "modules")
SYSTEM = "x86_64-linux"


def oracle_base32(data: bytes) -> str:
    n = int.from_bytes(data, "little")
    length = (len(data) * 8 + 4) // 5
    return "".join(ALPHABET[(n >> (5 * k)) & 31] for k in range(length - 1, -1, -1))


def oracle_store_path(root: str, tag: str, content: bytes, name: str) -> str:
    fingerprint = f"{tag}:{hashlib.sha256(content).hexdigest()}:{root}:{name}"
    digest = hashlib.sha256(fingerprint.encode()).digest()[:20]
    return f"{root}/{oracle_base32(digest)}-{name}"


def oracle_reachable(graph: dict, roots) -> set:
    seen = set()
    queue = deque(r for r in roots if r in graph)
    while queue:
        node = queue.popleft()
        if node in seen:
            continue
        seen.add(node)
        queue.extend(graph[node])
    return seen


def tree_digest(path: str) -> dict:
    """Map of relative path -> (kind, bytes or link target) for a whole tree."""
    out = {}
    for dirpath, dirnames, filenames in os.walk(path):
        for name in dirnames + filenames:
            full = os.path.join(dirpath, name)
            rel = os.path.relpath(full, path)
            if os.path.islink(full):
                out[rel] = ("link", os.readlink(full))
            elif os.path.isdir(full):
                out[rel] = ("dir", None)
            else:
                with open(full, "rb") as f:
                    out[rel] = ("file", f.read())
    return out


def write_file(path: str, data, mode=None) -> str:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "wb") as f:
        f.write(data.encode() if isinstance(data, str) else data)
    if mode is not None:
        os.chmod(path, mode)
    return path


ACCEPTANCE_LINES: list = []
