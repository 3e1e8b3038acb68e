"""Small shared helpers: hashing, timestamps, canonical JSON, glob names."""

import hashlib
import json
import os
import time
from fnmatch import fnmatchcase

TEST_MODE_ENV = "NASH_TEST_MODE"
_TEST_EPOCH_ISO = "1970-01-01T00:00:00Z"


def test_mode() -> bool:
    return os.environ.get(TEST_MODE_ENV, "") not in ("", "0")


def now_iso() -> str:
    """Current UTC timestamp; pinned to a constant under NASH_TEST_MODE."""
    if test_mode():
        return _TEST_EPOCH_ISO
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def wall_seconds(start: float) -> float:
    return 0.0 if test_mode() else time.monotonic() - start


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            block = f.read(chunk)
            if not block:
                break
            h.update(block)
    return h.hexdigest()


def canon_json(obj) -> str:
    """Deterministic single-line JSON used for journal records and ids."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def fnmatch_name(name: str, pattern: str) -> bool:
    """Shell glob match for one path component.

    Case-sensitive, and hidden names only match patterns that themselves
    start with a dot — the same rule sh applies when expanding words.
    """
    if name.startswith(".") and not pattern.startswith("."):
        return False
    return fnmatchcase(name, pattern)
