import os
import random
import shutil

import pytest
from hypothesis import given, settings, strategies as st

from fpm.derivation import derivation, input_closure
from fpm.engine import (
    BUILT,
    CACHED,
    FAILED,
    NO_PATH,
    NOT_ATTEMPTED,
    BuildEngine,
    check_closure,
    scan_references,
)
from fpm.errors import (
    BuilderNotExecutable,
    BuildFailed,
    ImpurityDetected,
    IoError,
    MissingOutput,
)
from fpm.store import BASE32_ALPHABET, Store, StorePath, make_store_path, remove_tree

from helpers import SYSTEM, tree_digest, write_file


def sh(store, static_shell, name, script, inputs=(), env=None):
    return derivation(store, name, SYSTEM, static_shell, ["-c", script], env or {}, inputs)


def test_example_builds_then_is_cached(store, engine, static_shell):
    drv, d = sh(store, static_shell, "example-1.0", "echo hello > $out")
    [r] = engine.build_derivations([drv])
    assert r.status == BUILT
    with open(str(d.output_path), "rb") as f:
        assert f.read() == b"hello\n"
    assert engine.builders_executed == 1
    [again] = engine.build_derivations([drv])
    assert again.status == CACHED
    assert engine.builders_executed == 1


def test_empty_target_list(engine):
    assert engine.build_derivations([]) == []


def test_write_text_builtin(store, engine):
    drv, d = derivation(store, "greeting", SYSTEM, "builtin:write-text", env={"text": "hello"})
    [r] = engine.build_derivations([drv])
    assert r.ok
    with open(str(d.output_path)) as f:
        assert f.read() == "hello"


@pytest.fixture
def tools(store, tmp_path):
    """A seed input whose bin/ offers mkdir and chmod from the host."""
    from fpm.buildlang.bridge import seed_derivation
    d = tmp_path / "tools"
    (d / "bin").mkdir(parents=True)
    for name in ("mkdir", "chmod"):
        os.symlink(shutil.which(name), d / "bin" / name)
    return seed_derivation(store, "tools", SYSTEM, str(d), "tools-src")[0]


def test_outputs_are_registered_read_only(store, engine, static_shell, tools):
    drv, d = sh(store, static_shell, "ro", "mkdir $out; echo x > $out/f", [(str(tools), "tools")])
    engine.realize([drv])
    assert store.is_valid(d.output_path)
    assert os.stat(os.path.join(str(d.output_path), "f")).st_mode & 0o222 == 0


def test_environment_is_sanitized(store, engine, static_shell, monkeypatch):
    monkeypatch.setenv("HOME", "/root")
    monkeypatch.setenv("LEAK", "yes")
    seen = {}

    def hook(d, env, build_dir):
        seen["env"] = dict(env)
        seen["cwd"] = os.listdir(build_dir)

    engine.on_builder_start = hook
    drv, d = sh(store, static_shell, "probe", 'echo "${HOME-unset} ${LEAK-unset} $PATH $greeting" > $out',
                env={"greeting": "hi"})
    engine.realize([drv])
    with open(str(d.output_path)) as f:
        assert f.read() == f"unset unset {NO_PATH} hi\n"
    assert seen["env"] == {"greeting": "hi", "out": str(d.output_path), "PATH": NO_PATH}
    assert seen["cwd"] == []


def test_path_lists_only_input_bin_dirs(store, engine, static_shell, tools):
    tool_drv, tool = sh(store, static_shell, "tool", "mkdir -p $out/bin; printf '#!%s\\necho tool-ran\\n' "
                        + str(static_shell) + " > $out/bin/tool; chmod +x $out/bin/tool", [(str(tools), "tools")])
    user_drv, user = sh(store, static_shell, "user", 'tool > $out; echo "$PATH" >> $out',
                        inputs=[(str(tool_drv), "tool")], env={"tool": str(tool.output_path)})
    engine.realize([user_drv])
    with open(str(user.output_path)) as f:
        assert f.read() == f"tool-ran\n{tool.output_path}/bin\n"


def test_builder_failure_keeps_log_and_removes_output(store, engine, static_shell):
    drv, d = sh(store, static_shell, "fails", "echo partial > $out; echo oops; exit 3")
    [r] = engine.build_derivations([drv])
    assert r.status == FAILED
    assert isinstance(r.error, BuildFailed)
    assert b"oops" in r.log and b"status 3" in r.log
    assert r.log_path == os.path.join(engine.state_dir, "logs", drv.hash + ".log")
    assert not os.path.lexists(str(d.output_path))
    assert not store.is_valid(d.output_path)
    with pytest.raises(BuildFailed):
        engine.realize([drv])


def test_missing_output(store, engine, static_shell):
    drv, _ = sh(store, static_shell, "lazy", "true")
    with pytest.raises(MissingOutput):
        engine.realize([drv])


def test_builder_not_executable(store, engine):
    script = store.add_text("not-exec", "#!/bin/sh\n")
    drv, _ = derivation(store, "x", SYSTEM, script)
    [r] = engine.build_derivations([drv])
    assert isinstance(r.error, BuilderNotExecutable)


def test_wrong_system(store, state):
    drv, _ = derivation(store, "x", "i686-linux", "builtin:write-text", env={"text": "t"})
    [r] = BuildEngine(store, state, SYSTEM).build_derivations([drv])
    assert r.status == FAILED and "wrong system" in str(r.error)
    [r] = BuildEngine(store, state, "i686-linux").build_derivations([drv])
    assert r.ok


def test_write_outside_output_detected(store, engine, static_shell):
    drv, _ = sh(store, static_shell, "impure", 'echo x > $out; echo y > "${out%/*}/'
                + "z" * 32 + '-stray"')
    [r] = engine.build_derivations([drv])
    assert r.status == FAILED
    assert isinstance(r.error, ImpurityDetected)
    assert not os.path.exists(os.path.join(store.root, "z" * 32 + "-stray"))


def test_undeclared_reference_detected(store, engine, static_shell):
    secret = store.add_text("secret", "s")
    # the path is assembled at build time so the derivation itself does not mention it
    drv, d = sh(store, static_shell, "sneaky",
                f'printf "%s/%s-secret" "${{out%/*}}" {secret.hash} > $out')
    [r] = engine.build_derivations([drv])
    assert isinstance(r.error, ImpurityDetected)
    assert r.error.offending == [str(secret)]
    assert not store.is_valid(d.output_path)


def test_declared_reference_recorded(store, engine, static_shell):
    dep_drv, dep = sh(store, static_shell, "dep", "echo dep > $out")
    drv, d = sh(store, static_shell, "user", 'echo "$dep" > $out; echo "$out" >> $out',
                inputs=[(str(dep_drv), "dep")], env={"dep": str(dep.output_path)})
    results = engine.realize([drv])
    assert results[-1].scanned_references == tuple(sorted([dep.output_path, d.output_path]))
    assert store.references(d.output_path) == sorted([dep.output_path, d.output_path])


def _diamond(store, static_shell, fail_b=False):
    d_drv, _ = sh(store, static_shell, "d", "echo d > $out")
    b_drv, _ = sh(store, static_shell, "b", "exit 1" if fail_b else "echo b > $out", [(str(d_drv), "d")])
    c_drv, _ = sh(store, static_shell, "c", "echo c > $out", [(str(d_drv), "d")])
    a_drv, _ = sh(store, static_shell, "a", "echo a > $out", [(str(b_drv), "b"), (str(c_drv), "c")])
    return a_drv, b_drv, c_drv, d_drv


@pytest.mark.parametrize("jobs", [1, 3])
def test_failure_in_diamond(store, engine, static_shell, jobs):
    a, b, c, d = _diamond(store, static_shell, fail_b=True)
    results = {r.drv_path: r.status for r in engine.build_derivations([a], max_jobs=jobs)}
    assert results == {a: NOT_ATTEMPTED, b: FAILED, c: BUILT, d: BUILT}


def _random_dag(store, static_shell, seed, size):
    rng = random.Random(seed)
    made = []
    for i in range(size):
        deps = rng.sample(made, min(len(made), rng.randint(0, 3)))
        made.append(sh(store, static_shell, f"n{i}", f"echo {i} > $out", [(str(p), f"i{k}") for k, p in enumerate(deps)])[0])
    return made


def test_serial_order_is_closure_order(store, engine, static_shell):
    made = _random_dag(store, static_shell, 1, 30)
    engine.build_derivations(made, max_jobs=1)
    starts = [p for kind, p in engine.events if kind == "start"]
    expected = []
    for t in made:
        for d in input_closure(store, t):
            if str(d.drv_path) not in expected:
                expected.append(str(d.drv_path))
    from fpm.derivation import closure_of
    assert starts == [str(d.drv_path) for d in closure_of(store, made)]
    assert sorted(starts) == sorted(expected)


@pytest.mark.parametrize("seed", range(3))
def test_parallel_builds_respect_dependencies(store, state, static_shell, seed):
    made = _random_dag(store, static_shell, seed, 40)
    engine = BuildEngine(store, state, SYSTEM, max_jobs=4)
    results = engine.build_derivations(made)
    assert all(r.ok for r in results)
    finished = set()
    from fpm.derivation import read_derivation
    for kind, p in engine.events:
        if kind == "start":
            for i in read_derivation(store, p).inputs:
                assert str(i.drv_path) in finished
        elif kind == "finish":
            finished.add(p)


def test_second_build_executes_nothing(store, engine, static_shell):
    made = _random_dag(store, static_shell, 7, 25)
    engine.build_derivations(made)
    first = engine.builders_executed
    assert first == 25
    results = engine.build_derivations(made)
    assert engine.builders_executed == first
    assert {r.status for r in results} == {CACHED}


def test_rebuild_is_byte_identical(store, engine, registry):
    from fpm.packages import package_derivation
    drv, d = package_derivation(store, registry.lookup("howdy"), SYSTEM)
    engine.realize([drv])
    before = tree_digest(str(d.output_path))
    store.unregister([d.output_path])
    remove_tree(str(d.output_path))
    [r] = [x for x in engine.build_derivations([drv]) if x.drv_path == drv]
    assert r.status == BUILT
    assert tree_digest(str(d.output_path)) == before


# -- scanning -----------------------------------------------------------------

def test_scan_empty_output(tmp_path):
    out = write_file(str(tmp_path / "out"), "nothing to see")
    cand = [make_store_path("/s", "source", bytes(32), "a")]
    assert scan_references(out, cand) == []


def test_scan_finds_embedded_path(tmp_path):
    b = make_store_path("/s", "source", b"b" * 32, "b")
    out = tmp_path / "out"
    write_file(str(out / "share" / "doc"), f"see {b}/bin/x for details")
    assert scan_references(str(out), [b, make_store_path("/s", "source", b"c" * 32, "c")]) == [b]


def test_scan_sees_symlink_targets(tmp_path):
    b = make_store_path("/s", "source", b"b" * 32, "b")
    out = tmp_path / "out"
    out.mkdir()
    os.symlink(f"{b}/bin/sh", out / "sh")
    assert scan_references(str(out), [b]) == [b]


def test_scan_unreadable(tmp_path):
    if os.geteuid() == 0:
        pytest.skip("root can read anything")
    out = write_file(str(tmp_path / "out" / "f"), "x")
    os.chmod(out, 0)
    with pytest.raises(IoError):
        scan_references(str(tmp_path / "out"), [])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 50), st.data())
def test_planting_oracle(tmp_path_factory, n, data):
    rng = random.Random(data.draw(st.integers(0, 2**32)))
    cands = [make_store_path("/s", "source", rng.randbytes(32), f"p{i}") for i in range(n)]
    planted = set(rng.sample(range(n), data.draw(st.integers(0, n))))
    out = tmp_path_factory.mktemp("out")
    nfiles = rng.randint(1, 6)
    chunks = [[] for _ in range(nfiles)]
    for i in planted:
        text = cands[i].hash if rng.random() < 0.5 else str(cands[i])
        chunks[rng.randrange(nfiles)].append(text.encode())
    for k, parts in enumerate(chunks):
        blob = b""
        for part in parts:
            # filler outside the base32 alphabet keeps planted hashes separate
            blob += rng.randbytes(rng.randint(0, 40)).translate(_NON_B32) + part
        write_file(str(out / f"d{k % 2}" / f"f{k}"), blob + b"\n")
    found = scan_references(str(out), cands)
    assert found == sorted(cands[i] for i in planted)


_NON_B32 = bytes((b if chr(b) not in BASE32_ALPHABET else ord("-")) for b in range(256))


def test_hash_inside_longer_run_is_found(tmp_path):
    b = make_store_path("/s", "source", b"q" * 32, "b")
    out = write_file(str(tmp_path / "o"), "abc" + b.hash + "xyz")
    assert scan_references(out, [b]) == [b]


# -- closure check ------------------------------------------------------------

def test_check_closure_self_reference_only():
    out = make_store_path("/s", "output:out", bytes(32), "o")
    check_closure(out, [out], [])


def test_check_closure_undeclared():
    out = make_store_path("/s", "output:out", bytes(32), "o")
    other = make_store_path("/s", "source", bytes(32), "x")
    with pytest.raises(ImpurityDetected) as info:
        check_closure(out, [out, other], [])
    assert info.value.offending == [str(other)]


def test_bootstrap_final_output_has_no_seed_hash(store, engine, registry):
    from fpm.packages import package_derivation
    seed = package_derivation(store, registry.lookup("bootstrap-seed"), SYSTEM)[1].output_path
    boot = package_derivation(store, registry.lookup("toolchain-boot"), SYSTEM)[1].output_path
    drv, final = package_derivation(store, registry.lookup("toolchain"), SYSTEM)
    engine.realize([drv])
    final_refs = engine.build_derivations([drv])[-1].scanned_references
    assert seed not in final_refs
    # stage one does remember the seed, so the search below is meaningful
    assert seed in store.references(boot)
    check_closure(final.output_path, final_refs, [boot])
    for rel, (kind, content) in tree_digest(str(final.output_path)).items():
        if kind == "file":
            assert seed.hash.encode() not in content
