import hashlib
import os

import pytest

from fpm.errors import BuildFailed, EmptyTransaction, NotInstalled, NothingToRollBack, PackageNotFound
from fpm.packages import PackageRegistry, package_derivation
from fpm.profiles import (
    MANIFEST,
    Install,
    Manifest,
    ManifestEntry,
    Profile,
    Remove,
    Upgrade,
    delete_generations,
    list_available,
    list_installed,
    roll_back,
    transact,
    upgrade_matching,
)

from helpers import SYSTEM


@pytest.fixture
def profile(state):
    return Profile(state, "alice")


def manifest_bytes(profile):
    g = profile.current_generation()
    if g is None:
        return b""
    with open(os.path.join(g.dir, MANIFEST), "rb") as f:
        return f.read()


def tree_checksum(root):
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(dirnames + filenames):
            p = os.path.join(dirpath, name)
            h.update(os.path.relpath(p, root).encode() + b"\0")
            if os.path.islink(p):
                h.update(b"L" + os.readlink(p).encode())
            elif os.path.isfile(p):
                h.update(b"F" + open(p, "rb").read())
    return h.hexdigest()


def profile_files(profile):
    """Every regular file reachable through the current generation, resolved."""
    root = profile.link
    out = []
    for dirpath, dirnames, filenames in os.walk(root, followlinks=True):
        for name in filenames:
            out.append(os.path.join(dirpath, name))
    return out


# -- transactions -------------------------------------------------------------------

def test_install_and_remove_in_one_transaction(profile, registry, engine):
    transact(profile, [Install("bigloo")], registry, engine)
    assert profile.manifest().names() == ["bigloo"]
    g = transact(profile, [Install("guile"), Remove("bigloo")], registry, engine)
    assert g.number == 2
    assert [(e.name, e.version) for e in g.manifest.entries] == [("guile", "2.0")]
    assert os.readlink(profile.link) == "generation-2"


def test_install_replaces_same_name(profile, registry, engine):
    transact(profile, [Install("guile@1.8")], registry, engine)
    g = transact(profile, [("install", "guile@2.0")], registry, engine)
    assert [(e.name, e.version) for e in g.manifest.entries] == [("guile", "2.0")]


def test_empty_transaction(profile, registry, engine):
    with pytest.raises(EmptyTransaction):
        transact(profile, [], registry, engine)
    assert profile.generations() == []
    assert not os.path.lexists(profile.link)


def test_unknown_package_and_absent_removal(profile, registry, engine):
    with pytest.raises(PackageNotFound):
        transact(profile, [Install("nope")], registry, engine)
    with pytest.raises(NotInstalled):
        transact(profile, [Remove("hello")], registry, engine)
    assert profile.generations() == []


def test_build_failure_aborts(profile, registry, broken_registry, engine):
    transact(profile, [Install("hello")], registry, engine)
    before = manifest_bytes(profile)
    with pytest.raises(BuildFailed):
        transact(profile, [Install("broken")], broken_registry, engine)
    assert manifest_bytes(profile) == before
    assert profile.generations() == [1]


def test_links_resolve_into_the_store(profile, registry, engine, store):
    transact(profile, [Install("hello"), Install("guile"), Install("emacs-stub")], registry, engine)
    files = profile_files(profile)
    assert files
    for f in files:
        if os.path.basename(f) == MANIFEST:
            continue
        real = os.path.realpath(f)
        assert os.path.exists(real)
        top = os.path.join(store.root, os.path.relpath(real, store.root).split(os.sep)[0])
        assert store.is_valid(top), f


def test_propagated_inputs_are_linked(profile, registry, engine, store):
    g = transact(profile, [Install("guile@2.0")], registry, engine)
    (entry,) = g.manifest.entries
    libgc = str(package_derivation(store, registry.lookup("libgc"), SYSTEM)[1].output_path)
    assert entry.propagated == (libgc,)
    assert os.path.realpath(os.path.join(profile.link, "share", "libgc", "README")) == \
        os.path.join(libgc, "share", "libgc", "README")
    assert os.path.exists(os.path.join(profile.link, "bin", "guile"))


def test_conflicts_are_last_entry_wins(profile, registry, engine, store, caplog):
    g = transact(profile, [Install("hello"), Install("gawk-stub")], registry, engine)
    hello_out = next(e.output for e in g.manifest.entries if e.name == "hello")
    # both ship config.params at the top; hello sorts after gawk-stub
    assert os.readlink(os.path.join(g.dir, "config.params")) == os.path.join(hello_out, "config.params")
    assert "profile conflict" in caplog.text


def test_manifest_format(profile, registry, engine):
    g = transact(profile, [Install("guile")], registry, engine)
    line = manifest_bytes(profile).decode()
    name, version, output, props = line.rstrip("\n").split("\t")
    assert (name, version) == ("guile", "2.0")
    assert output == g.manifest.entries[0].output and props == ",".join(g.manifest.entries[0].propagated)
    assert Manifest.parse(line) == g.manifest


def test_manifest_round_trip():
    m = Manifest.of([ManifestEntry("b", "1", "/s/x-b", ("/s/y", "/s/z")), ManifestEntry("a", "2", "/s/w-a")])
    assert Manifest.parse(m.serialize()) == m
    assert m.names() == ["a", "b"]


# -- fault injection --------------------------------------------------------------------

class Boom(Exception):
    pass


def test_fault_at_every_step(profile, registry, engine):
    transact(profile, [Install("hello")], registry, engine)
    before_bytes, before_tree = manifest_bytes(profile), tree_checksum(profile.generation_dir(1))
    steps = []
    dry = Profile(os.path.join(profile.state_dir, "dry"), "x")
    transact(dry, [Install("hello"), Install("guile"), Install("gawk-stub")], registry, engine,
             fault_hook=steps.append)
    assert len(steps) >= 10
    for i, what in enumerate(steps):
        def hook(step, _count=[0]):
            if _count[0] == i:
                raise Boom(step)
            _count[0] += 1

        with pytest.raises(Boom):
            transact(profile, [Install("guile"), Install("gawk-stub")], registry, engine, fault_hook=hook)
        assert os.readlink(profile.link) == "generation-1", what
        assert manifest_bytes(profile) == before_bytes
        assert tree_checksum(profile.generation_dir(1)) == before_tree
        assert sorted(os.listdir(profile.dir)) == [".lock", "generation-1", "profile"], what
    g = transact(profile, [Install("guile"), Install("gawk-stub")], registry, engine)
    assert g.number == 2


# -- roll-back -------------------------------------------------------------------------------

def test_roll_back_is_inverse(profile, registry, engine):
    transact(profile, [Install("hello")], registry, engine)
    before = manifest_bytes(profile)
    transact(profile, [Install("guile"), Remove("hello")], registry, engine)
    g = roll_back(profile)
    assert g.number == 1 and manifest_bytes(profile) == before
    assert profile.generations() == [1, 2]


def test_roll_back_at_first_generation(profile, registry, engine):
    with pytest.raises(NothingToRollBack):
        roll_back(profile)
    transact(profile, [Install("hello")], registry, engine)
    with pytest.raises(NothingToRollBack):
        roll_back(profile)


def test_two_roll_backs_reach_empty(profile, registry, engine):
    transact(profile, [Install("hello")], registry, engine)
    transact(profile, [Remove("hello")], registry, engine)
    transact(profile, [Install("gawk-stub")], registry, engine)
    transact(profile, [Install("guile")], registry, engine)
    roll_back(profile)
    roll_back(profile)
    assert profile.manifest().entries == ()
    assert profile.current() == 2


def test_install_after_roll_back_takes_a_fresh_number(profile, registry, engine):
    transact(profile, [Install("hello")], registry, engine)
    transact(profile, [Install("guile")], registry, engine)
    roll_back(profile)
    g = transact(profile, [Install("gawk-stub")], registry, engine)
    assert g.number == 3 and profile.generations() == [1, 2, 3]


def test_generations_are_immutable(profile, registry, engine):
    transact(profile, [Install("hello")], registry, engine)
    first = tree_checksum(profile.generation_dir(1))
    transact(profile, [Install("guile")], registry, engine)
    roll_back(profile)
    transact(profile, [Remove("hello")], registry, engine)
    assert tree_checksum(profile.generation_dir(1)) == first
    assert os.stat(profile.generation_dir(1)).st_mode & 0o222 == 0


def test_delete_generations_keeps_current(profile, registry, engine):
    transact(profile, [Install("hello")], registry, engine)
    transact(profile, [Install("guile")], registry, engine)
    assert delete_generations(profile) == [1]
    assert profile.generations() == [2] and profile.current() == 2


# -- upgrades ----------------------------------------------------------------------------------

def test_upgrade_g_prefix(profile, registry, engine):
    transact(profile, [Install("guile@1.8"), Install("bigloo")], registry, engine)
    bigloo = profile.manifest().by_name()["bigloo"]
    g = upgrade_matching(profile, "^g.*", registry, engine)
    entries = g.manifest.by_name()
    assert entries["guile"].version == "2.0"
    assert entries["bigloo"] == bigloo
    assert g.number == 2


def test_upgrade_matching_nothing_is_a_no_op(profile, registry, engine):
    transact(profile, [Install("guile@1.8")], registry, engine)
    g = upgrade_matching(profile, "^zzz", registry, engine)
    assert g.number == 1 and profile.generations() == [1]


def test_upgrade_when_current_is_a_no_op(profile, registry, engine, store):
    transact(profile, [Install("hello"), Install("guile")], registry, engine)
    seen = len(engine.events)
    g = upgrade_matching(profile, ".*", registry, engine)
    assert g.number == 1 and profile.generations() == [1]
    assert [k for k, _ in engine.events[seen:] if k == "start"] == []


def test_upgrade_on_empty_profile(profile, registry, engine):
    assert transact(profile, [Upgrade(".*")], registry, engine) is None
    assert profile.generations() == []


# -- listing ------------------------------------------------------------------------------------

def test_list_installed(profile, registry, engine):
    assert list_installed(profile) == []
    transact(profile, [Install("hello"), Install("gawk-stub")], registry, engine)
    rows = list_installed(profile)
    assert [r[:2] for r in rows] == [("gawk-stub", "4.0"), ("hello", "2.8")]
    assert [r[0] for r in list_installed(profile, "^g")] == ["gawk-stub"]


SMALL = """\
(define a
  (package
    (name "{name}")
    (version "{version}")
    (source (origin (method local-file) (uri "{tar}") (sha256 (base32 "{sha}"))))
    (build-system generic-build-system)
    (synopsis "s") (description "d") (home-page "h") (license gpl3+)))
"""


def test_list_available_locations(tmp_path):
    from test_packages import TARBALL, TARBALL_SHA
    text = "\n".join(SMALL.format(name=n, version=v, tar=TARBALL, sha=TARBALL_SHA).replace("define a", f"define p{i}")
                     for i, (n, v) in enumerate([("hello", "2.8"), ("gawk", "4.0"), ("hello", "2.7")]))
    (tmp_path / "three.pkg").write_text(text)
    rows = list_available(PackageRegistry.load(str(tmp_path)))
    where = str(tmp_path / "three.pkg")
    assert rows == [("gawk", "4.0", f"{where}:10"), ("hello", "2.7", f"{where}:18"), ("hello", "2.8", f"{where}:2")]
    assert [r[0] for r in list_available(PackageRegistry.load(str(tmp_path)), "^g")] == ["gawk"]


def test_list_available_fixture(registry):
    rows = list_available(registry)
    assert len(rows) == 25
    assert [r[0] for r in rows] == sorted(r[0] for r in rows)
    hello27 = next(r for r in rows if r[:2] == ("hello", "2.7"))
    assert hello27[2].endswith("base.pkg:54")
