"""On-disk store layout, locking, epoch metadata, and the version database.

Layout under the store root:

    epochs/<epoch_id>/meta.json       epoch metadata
    epochs/<epoch_id>/journal.jsonl   one JSON object per stash entry
    epochs/<epoch_id>/posthash.jsonl  per-path state recorded at seal
    blobs/<sha256>                    stashed content
    versions.jsonl                    path version database (append-only)
    egress.jsonl                      egress decision log
    artifacts/<artifact_id>           stored artifacts
    examples/<artifact_id>/           feedback example suites

A store has a single writer at a time, enforced with an advisory lock on
`<store>/lock`.  Epoch states move along open -> sealed -> (committed |
aborted) only.
"""

from __future__ import annotations

import fcntl
import json
import os
import secrets
import tempfile
from pathlib import Path

from .blobstore import BlobStore
from .errors import EpochStateError, StoreError
from .util import now_iso

STATE_OPEN = "open"
STATE_SEALED = "sealed"
STATE_COMMITTED = "committed"
STATE_ABORTED = "aborted"
EPOCH_STATES = (STATE_OPEN, STATE_SEALED, STATE_COMMITTED, STATE_ABORTED)

_TRANSITIONS = {
    STATE_OPEN: {STATE_SEALED},
    STATE_SEALED: {STATE_COMMITTED, STATE_ABORTED},
    STATE_COMMITTED: set(),
    STATE_ABORTED: set(),
}


def atomic_write_json(path: Path, obj) -> None:
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.rename(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def append_jsonl(path: Path, obj, fsync: bool = True) -> None:
    line = json.dumps(obj, sort_keys=True) + "\n"
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line)
        fh.flush()
        if fsync:
            os.fsync(fh.fileno())


def read_jsonl(path: Path, drop_torn_tail: bool = False) -> list:
    """Read a .jsonl file; optionally ignore a torn (unparsable) final line."""
    if not path.exists():
        return []
    records = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except ValueError:
            if drop_torn_tail and i == len(lines) - 1:
                break
            raise StoreError(f"corrupt record in {path} at line {i + 1}")
    return records


class VersionDb:
    """Per-path (file_uid, version) map backed by versions.jsonl, last wins.

    `version` strictly increases every time a sealed epoch touches the path
    or a restore rewrites it.  A delete followed by a later re-creation
    mints a fresh file_uid while the version keeps increasing.
    """

    def __init__(self, path: Path):
        self.path = path
        self._map = {}
        for rec in read_jsonl(path, drop_torn_tail=True):
            self._map[rec["path"]] = rec

    def get(self, path: str) -> dict | None:
        return self._map.get(path)

    def ensure(self, path: str) -> tuple:
        """Current (file_uid, version), minting a fresh uid if needed."""
        rec = self._map.get(path)
        if rec is None or rec.get("deleted"):
            rec = {
                "path": path,
                "file_uid": secrets.token_hex(16),
                "version": rec["version"] if rec else 0,
                "deleted": False,
            }
            self._append(rec)
        return rec["file_uid"], rec["version"]

    def bump(self, path: str, exists_now: bool) -> int:
        rec = self._map.get(path)
        if rec is None:
            rec = {"path": path, "file_uid": secrets.token_hex(16), "version": 0}
        new = {
            "path": path,
            "file_uid": (
                secrets.token_hex(16)
                if rec.get("deleted") and exists_now
                else rec["file_uid"]
            ),
            "version": rec["version"] + 1,
            "deleted": not exists_now,
        }
        self._append(new)
        return new["version"]

    def _append(self, rec: dict) -> None:
        self._map[rec["path"]] = rec
        append_jsonl(self.path, rec, fsync=False)

    def compact(self) -> None:
        fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=self.path.parent)
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                for path in sorted(self._map):
                    fh.write(json.dumps(self._map[path], sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            os.rename(tmp, self.path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


class Store:
    def __init__(self, root, create: bool = True, lock: bool = True):
        self.root = Path(root)
        if not self.root.exists():
            if not create:
                raise StoreError(f"no store at {self.root}")
            self.root.mkdir(parents=True)
        for sub in ("epochs", "blobs", "artifacts", "examples"):
            (self.root / sub).mkdir(exist_ok=True)
        for name in ("versions.jsonl", "egress.jsonl"):
            (self.root / name).touch()
        self._lock_fh = None
        if lock:
            self._acquire_lock()
        self.blobs = BlobStore(self.root / "blobs")
        self.versions = VersionDb(self.root / "versions.jsonl")

    # -- locking -----------------------------------------------------------

    def _acquire_lock(self) -> None:
        fh = open(self.root / "lock", "w")
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            fh.close()
            raise StoreError(
                f"store {self.root} is locked by another process"
            ) from None
        self._lock_fh = fh

    def close(self) -> None:
        if self._lock_fh is not None:
            fcntl.flock(self._lock_fh, fcntl.LOCK_UN)
            self._lock_fh.close()
            self._lock_fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- epochs ------------------------------------------------------------

    def epoch_dir(self, epoch_id: int) -> Path:
        return self.root / "epochs" / str(int(epoch_id))

    def journal_path(self, epoch_id: int) -> Path:
        return self.epoch_dir(epoch_id) / "journal.jsonl"

    def posthash_path(self, epoch_id: int) -> Path:
        return self.epoch_dir(epoch_id) / "posthash.jsonl"

    def list_epoch_ids(self) -> list:
        out = []
        for name in os.listdir(self.root / "epochs"):
            if name.isdigit():
                out.append(int(name))
        return sorted(out)

    def next_epoch_id(self) -> int:
        ids = self.list_epoch_ids()
        return (max(ids) + 1) if ids else 1

    def read_meta(self, epoch_id: int) -> dict:
        path = self.epoch_dir(epoch_id) / "meta.json"
        try:
            with open(path, encoding="utf-8") as fh:
                return json.load(fh)
        except FileNotFoundError:
            raise StoreError(f"unknown epoch {epoch_id}") from None
        except ValueError:
            raise StoreError(f"corrupt metadata for epoch {epoch_id}") from None

    def write_meta(self, epoch_id: int, meta: dict) -> None:
        atomic_write_json(self.epoch_dir(epoch_id) / "meta.json", meta)

    def set_state(self, epoch_id: int, new_state: str, **extra) -> dict:
        meta = self.read_meta(epoch_id)
        old = meta.get("state")
        if new_state not in _TRANSITIONS.get(old, set()):
            raise EpochStateError(
                f"epoch {epoch_id}: cannot move from {old} to {new_state}"
            )
        meta["state"] = new_state
        meta.update(extra)
        self.write_meta(epoch_id, meta)
        return meta

    def create_epoch(self, description: str, artifact_ref: str | None,
                     guard_root: str) -> dict:
        for eid in self.list_epoch_ids():
            if self.read_meta(eid).get("state") == STATE_OPEN:
                raise EpochStateError(
                    f"epoch {eid} is still open; seal it before starting another"
                )
        epoch_id = self.next_epoch_id()
        self.epoch_dir(epoch_id).mkdir(parents=True)
        meta = {
            "epoch_id": epoch_id,
            "state": STATE_OPEN,
            "description": description,
            "artifact_ref": artifact_ref,
            "guard_root": guard_root,
            "started_at": now_iso(),
            "sealed_at": None,
            "restored_paths": [],
        }
        self.write_meta(epoch_id, meta)
        return meta

    # -- egress log --------------------------------------------------------

    def append_egress(self, event: dict) -> None:
        append_jsonl(self.root / "egress.jsonl", event)

    def load_egress(self) -> list:
        return read_jsonl(self.root / "egress.jsonl", drop_torn_tail=True)

    # -- artifacts ---------------------------------------------------------

    def artifact_path(self, artifact_id: str) -> Path:
        if not artifact_id or "/" in artifact_id:
            raise StoreError(f"bad artifact id {artifact_id!r}")
        return self.root / "artifacts" / artifact_id

    def save_artifact_text(self, artifact_id: str, text: str) -> None:
        path = self.artifact_path(artifact_id)
        fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.rename(tmp, path)

    def load_artifact_text(self, artifact_id: str) -> str:
        try:
            return self.artifact_path(artifact_id).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise StoreError(f"no stored artifact {artifact_id}") from None

    def list_artifact_ids(self) -> list:
        return sorted(os.listdir(self.root / "artifacts"))

    def examples_dir(self, artifact_id: str) -> Path:
        return self.root / "examples" / artifact_id

    # -- sizes (stash budget) ---------------------------------------------

    def stash_bytes(self) -> int:
        """Total blob plus journal bytes currently held by the store."""
        total = self.blobs.total_bytes()
        for eid in self.list_epoch_ids():
            journal = self.journal_path(eid)
            if journal.exists():
                total += journal.stat().st_size
        return total
