import os
import shutil

import pytest

from fpm.engine import BuildEngine
from fpm.packages import PackageRegistry
from fpm.store import Store

from helpers import BROKEN, PACKAGES, SYSTEM


@pytest.fixture
def store(tmp_path):
    return Store(str(tmp_path / "store"))


@pytest.fixture
def state(tmp_path):
    d = tmp_path / "state"
    d.mkdir()
    return str(d)


@pytest.fixture
def engine(store, state):
    return BuildEngine(store, state, SYSTEM)


@pytest.fixture(scope="session")
def registry():
    return PackageRegistry.load(PACKAGES)


@pytest.fixture(scope="session")
def broken_registry():
    return PackageRegistry.load(BROKEN)


@pytest.fixture
def static_shell(store):
    """The system shell interned as a store builder, like a statically linked bash."""
    return store.add_to_store("static-bash", os.path.realpath(shutil.which("sh") or "/bin/sh"))


@pytest.fixture(autouse=True)
def _clean_module_path(monkeypatch):
    monkeypatch.delenv("FPM_MODULE_PATH", raising=False)
    for var in ("FPM_STORE", "FPM_STATE", "FPM_SYSTEM", "FPM_MAX_JOBS", "FPM_PKG_PATH", "FPM_USER"):
        monkeypatch.delenv(var, raising=False)
    yield
    os.environ.pop("FPM_MODULE_PATH", None)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
