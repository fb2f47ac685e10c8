"""Generate a large package registry with a random acyclic input graph."""

import hashlib
import os
import random
import shutil

from fpm.store import encode_base32

from helpers import TARBALLS

TEMPLATE = """\
(define {var}
  (package
    (name "{name}")
    (version "{version}")
    (source (origin
              (method local-file)
              (uri "{uri}")
              (sha256 (base32 "{sha}"))))
    (build-system {system})
    (arguments '(#:configure-flags '("--synthetic={i}")))
    (inputs `({inputs}))
    (synopsis "Synthetic package {i}")
    (description "Generated for scale tests.")
    (home-page "https://example.org/synthetic")
    (license gpl3+)))
"""


def write_registry(directory, count=300, seed=0, per_file=25):
    """Write ``count`` packages into ``directory``; returns the package names."""
    rng = random.Random(seed)
    os.makedirs(directory, exist_ok=True)
    tar = os.path.join(directory, "source.tar")
    shutil.copy(os.path.join(TARBALLS, "shell-stub-1.0.tar"), tar)
    with open(tar, "rb") as f:
        sha = encode_base32(hashlib.sha256(f.read()).digest())
    names, chunks = [], []
    for i in range(count):
        name = f"syn{i:03d}"
        deps = rng.sample(names, min(len(names), rng.randint(0, 4)))
        # same-file packages are plain bindings; the rest go through the registry
        inputs = " ".join(f'("{d}" ,{d})' if int(d[3:]) // per_file == i // per_file
                          else f'("{d}" ,(registry-ref "{d}"))' for d in deps)
        system = "script-build-system" if i % 7 == 0 else "generic-build-system"
        chunks.append(TEMPLATE.format(var=name, name=name, version=f"1.{i}", uri="source.tar",
                                      sha=sha, system=system, i=i, inputs=inputs))
        names.append(name)
    # earlier files define what later ones refer to; files load in sorted order
    for start in range(0, count, per_file):
        with open(os.path.join(directory, f"part{start // per_file:03d}.pkg"), "w") as f:
            f.write("\n".join(chunks[start:start + per_file]))
    return names
