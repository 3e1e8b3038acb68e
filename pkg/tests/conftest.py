import os

import pytest


@pytest.fixture(autouse=True)
def _test_mode(monkeypatch):
    """Pin timestamps and wall-clock readings for reproducible runs."""
    monkeypatch.setenv("NASH_TEST_MODE", "1")


@pytest.fixture
def store_root(tmp_path):
    store = tmp_path / "store"
    return store


@pytest.fixture
def work_root(tmp_path):
    root = tmp_path / "work"
    root.mkdir()
    return root


@pytest.fixture
def chdir(monkeypatch):
    def _go(path):
        monkeypatch.chdir(path)
        return path

    return _go


def rel_listing(root):
    """Sorted relative paths under `root` (directories get a trailing /)."""
    out = []
    for dirpath, dirnames, filenames in os.walk(root):
        rel = os.path.relpath(dirpath, root)
        for d in dirnames:
            p = os.path.normpath(os.path.join(rel, d))
            out.append(p + "/")
        for f in filenames:
            out.append(os.path.normpath(os.path.join(rel, f)))
    return sorted(out)
