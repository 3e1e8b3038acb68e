"""The guard: stash-before-visibility interception under a guarded root.

Mutations apply directly to the base filesystem; before the first mutation
of a path in an epoch becomes visible, the path's pre-state is durably
journaled (an inverse overlay layer).  Committing later discards the
layer; aborting restores it.  Layers never stack: reads always go straight
to the base filesystem regardless of how many sealed layers exist.

Two supervision modes share the same journal:

* native - built-in task implementations call the mutation primitives on
  this handle, giving exact first-mutation-wins capture;
* scan   - opaque subprocesses are bracketed by a full pre-stash of the
  guarded subtree (before spawn, recorded durably) and a reconciliation
  walk after exit that journals created paths.  Spurious entries for
  untouched paths are tolerated by design; missing entries are not.

Journal records carry exactly the fields path, kind, seq and pre_state.
Rename pairs are correlated by adjacent seq numbers, both appended under
one journal lock.  A torn final record (crash mid-append) fails JSON
parsing and is dropped at recovery.
"""

from __future__ import annotations

import json
import os
import stat
import threading
from pathlib import Path

from .errors import EpochStateError, GuardError, PathOutsideGuard
from .store import STATE_OPEN, STATE_SEALED, Store, append_jsonl, read_jsonl
from .util import now_iso, sha256_bytes, sha256_file

NONEXISTENT = "nonexistent"

KIND_CREATE = "create"
KIND_CONTENT = "content"
KIND_METADATA = "metadata"
KIND_DELETE = "delete"
KIND_RENAME_SRC = "rename-src"
KIND_RENAME_DST = "rename-dst"
KIND_LINK = "link"
KIND_SYMLINK = "symlink"

STASH_KINDS = (
    KIND_CREATE,
    KIND_CONTENT,
    KIND_METADATA,
    KIND_DELETE,
    KIND_RENAME_SRC,
    KIND_RENAME_DST,
    KIND_LINK,
    KIND_SYMLINK,
)

_DEFAULT_DIR_MODE = 0o755


def state_marker(full_path) -> str:
    """Comparable one-line state of a path: content hash or a type marker."""
    try:
        st = os.lstat(full_path)
    except FileNotFoundError:
        return "absent"
    except OSError:
        return "unhashable"
    if stat.S_ISLNK(st.st_mode):
        target = os.readlink(full_path)
        return "link:" + sha256_bytes(target.encode("utf-8", "surrogateescape"))
    if stat.S_ISDIR(st.st_mode):
        return "dir"
    if stat.S_ISREG(st.st_mode):
        try:
            return sha256_file(full_path)
        except OSError:
            return "unhashable"
    return "special"


def _post_record(rel: str, full_path) -> dict:
    rec = {"path": rel, "hash": state_marker(full_path)}
    try:
        st = os.lstat(full_path)
    except OSError:
        return rec
    rec["mode"] = stat.S_IMODE(st.st_mode)
    rec["size"] = st.st_size if stat.S_ISREG(st.st_mode) else 0
    rec["uid"] = st.st_uid
    rec["gid"] = st.st_gid
    if stat.S_ISLNK(st.st_mode):
        rec["target"] = os.readlink(full_path)
    return rec


class Layer:
    """Read-only view of one epoch's journal plus its seal-time post map."""

    def __init__(self, epoch_id: int, entries: list, post: dict):
        self.epoch_id = epoch_id
        self.entries = entries  # journal records, seq order
        self.post = post  # path -> posthash record

    @property
    def paths(self) -> list:
        return [e["path"] for e in self.entries]

    def entry(self, path: str) -> dict | None:
        for e in self.entries:
            if e["path"] == path:
                return e
        return None

    def rename_pairs(self) -> list:
        """(src_entry, dst_entry) pairs, correlated by adjacent seq."""
        pairs = []
        by_seq = {e["seq"]: e for e in self.entries}
        for e in self.entries:
            if e["kind"] == KIND_RENAME_SRC:
                partner = by_seq.get(e["seq"] + 1)
                if partner is not None and partner["kind"] == KIND_RENAME_DST:
                    pairs.append((e, partner))
        return pairs


def load_layer(store: Store, epoch_id: int) -> Layer:
    meta = store.read_meta(epoch_id)
    journal = store.journal_path(epoch_id)
    if not journal.exists():
        raise EpochStateError(
            f"epoch {epoch_id} has no layer (state: {meta.get('state')})"
        )
    entries = read_jsonl(journal, drop_torn_tail=True)
    post = {}
    for rec in read_jsonl(store.posthash_path(epoch_id), drop_torn_tail=True):
        post[rec["path"]] = rec
    return Layer(epoch_id, entries, post)


class GuardHandle:
    """Mutation gateway for one open epoch over one guarded root."""

    _mounted_roots = {}
    _mount_lock = threading.Lock()

    def __init__(self, store: Store, guard_root, epoch_id: int):
        meta = store.read_meta(epoch_id)
        if meta.get("state") != STATE_OPEN:
            raise EpochStateError(f"epoch {epoch_id} is not open")
        self.store = store
        self.guard_root = os.path.realpath(guard_root)
        if not os.path.isdir(self.guard_root):
            raise GuardError(f"guard root {guard_root} is not a directory")
        self.epoch_id = epoch_id
        self._journal = store.journal_path(epoch_id)
        self._seq = 0
        self._stashed = {}  # rel path -> journal record
        self._journal_lock = threading.Lock()
        self._path_locks = {}
        self._path_locks_guard = threading.Lock()
        self._scan_pre = None
        # the store itself may live under the guard root; never touch it
        self._excluded = []
        store_real = os.path.realpath(store.root)
        if (store_real + os.sep).startswith(self.guard_root + os.sep):
            self._excluded.append(
                os.path.relpath(store_real, self.guard_root).replace(os.sep, "/")
            )
        with GuardHandle._mount_lock:
            if GuardHandle._mounted_roots.get(self.guard_root):
                raise GuardError(
                    f"another guard is already mounted on {self.guard_root}"
                )
            GuardHandle._mounted_roots[self.guard_root] = self

    def unmount(self) -> None:
        with GuardHandle._mount_lock:
            if GuardHandle._mounted_roots.get(self.guard_root) is self:
                del GuardHandle._mounted_roots[self.guard_root]

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.unmount()

    # -- paths -------------------------------------------------------------

    def to_rel(self, path) -> str:
        """Normalize to a guard-root-relative /-separated path."""
        text = os.fspath(path)
        if os.path.isabs(text):
            full = os.path.normpath(text)
        else:
            full = os.path.normpath(os.path.join(self.guard_root, text))
        root = self.guard_root
        if full != root and not full.startswith(root + os.sep):
            raise PathOutsideGuard(f"{text!r} is outside the guarded root")
        rel = os.path.relpath(full, root).replace(os.sep, "/")
        if rel == ".":
            raise PathOutsideGuard("the guard root itself cannot be mutated")
        for prefix in self._excluded:
            if rel == prefix or rel.startswith(prefix + "/"):
                raise PathOutsideGuard(f"{text!r} is inside the layer store")
        return rel

    def full(self, rel: str) -> str:
        return os.path.join(self.guard_root, rel.replace("/", os.sep))

    def resolve_rel(self, path, follow_final: bool = False) -> str:
        """Resolve symlinks so the journal names the path the kernel touches.

        Intermediate directory symlinks are always resolved; the final
        component is resolved only for operations that follow it (content
        writes, chmod).  A link that escapes the guarded root denies the
        mutation rather than silently touching unguarded files.
        """
        full = self.full(self.to_rel(path))
        parent = os.path.realpath(os.path.dirname(full))
        resolved = os.path.join(parent, os.path.basename(full))
        if follow_final and os.path.islink(resolved):
            resolved = os.path.realpath(resolved)
        return self.to_rel(resolved)

    def _excluded_rel(self, rel: str) -> bool:
        for prefix in self._excluded:
            if rel == prefix or rel.startswith(prefix + "/"):
                return True
        return False

    # -- stash -------------------------------------------------------------

    def _capture_pre_state(self, rel: str):
        full = self.full(rel)
        try:
            st = os.lstat(full)
        except FileNotFoundError:
            return NONEXISTENT
        metadata = {
            "mode": stat.S_IMODE(st.st_mode),
            "uid": st.st_uid,
            "gid": st.st_gid,
            "mtime_ns": st.st_mtime_ns,
        }
        file_uid, pre_version = self.store.versions.ensure(rel)
        pre = {
            "content_ref": None,
            "metadata": metadata,
            "file_uid": file_uid,
            "pre_version": pre_version,
        }
        if stat.S_ISREG(st.st_mode):
            pre["type"] = "file"
            pre["content_ref"] = self.store.blobs.put_file(full)
        elif stat.S_ISDIR(st.st_mode):
            pre["type"] = "dir"
        elif stat.S_ISLNK(st.st_mode):
            pre["type"] = "symlink"
            target = os.readlink(full)
            pre["content_ref"] = self.store.blobs.put_bytes(
                target.encode("utf-8", "surrogateescape")
            )
        else:
            pre["type"] = "other"
            pre["unrestorable_content"] = True
        return pre

    def _append_entries(self, pending: list) -> None:
        """Durably journal records (already holding the journal lock)."""
        journal_dir = self._journal.parent
        with open(self._journal, "a", encoding="utf-8") as fh:
            for rec in pending:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        # first record must also survive a crash of the directory entry
        if self._seq <= len(pending):
            dir_fd = os.open(journal_dir, os.O_RDONLY)
            try:
                os.fsync(dir_fd)
            finally:
                os.close(dir_fd)

    def _path_lock(self, rel: str) -> threading.Lock:
        with self._path_locks_guard:
            lock = self._path_locks.get(rel)
            if lock is None:
                lock = self._path_locks[rel] = threading.Lock()
            return lock

    def record_premutation(self, rel: str, kind: str,
                           pre_state=None, partner=None) -> dict:
        """Stash `rel` (first mutation wins) and return its journal record.

        `partner`, when given, is a (rel, kind, pre_state) triple journaled
        atomically right after this record — used for rename pairs so the
        two entries get adjacent seq numbers.
        """
        if kind not in STASH_KINDS:
            raise GuardError(f"unknown stash kind {kind!r}")
        existing = self._stashed.get(rel)
        if existing is not None and partner is None:
            return existing
        with self._journal_lock:
            existing = self._stashed.get(rel)
            if existing is not None and partner is None:
                return existing
            pending = []
            if existing is None:
                if pre_state is None:
                    pre_state = self._capture_pre_state(rel)
                self._seq += 1
                rec = {
                    "path": rel,
                    "kind": kind,
                    "seq": self._seq,
                    "pre_state": pre_state,
                }
                pending.append(rec)
            else:
                rec = existing
            if partner is not None:
                p_rel, p_kind, p_pre = partner
                if self._stashed.get(p_rel) is None:
                    if p_pre is None:
                        p_pre = self._capture_pre_state(p_rel)
                    self._seq += 1
                    pending.append(
                        {
                            "path": p_rel,
                            "kind": p_kind,
                            "seq": self._seq,
                            "pre_state": p_pre,
                        }
                    )
            if pending:
                try:
                    self._append_entries(pending)
                except OSError as err:
                    raise GuardError(
                        f"cannot journal pre-state for {rel}: {err}; "
                        "mutation denied"
                    ) from err
                for entry in pending:
                    self._stashed[entry["path"]] = entry
            return rec

    # -- read helpers (straight to the base filesystem) ---------------------

    def read_file(self, path) -> bytes:
        return Path(self.full(self.to_rel(path))).read_bytes()

    def exists(self, path) -> bool:
        return os.path.lexists(self.full(self.to_rel(path)))

    def isfile(self, path) -> bool:
        return os.path.isfile(self.full(self.to_rel(path)))

    def isdir(self, path) -> bool:
        return os.path.isdir(self.full(self.to_rel(path)))

    def listdir(self, rel_dir: str = ".") -> list:
        if rel_dir in (".", ""):
            base = self.guard_root
        else:
            base = self.full(self.to_rel(rel_dir))
        return sorted(os.listdir(base))

    # -- native mutation primitives -----------------------------------------

    def _mutate(self, rel: str, kind_existing: str, op):
        lock = self._path_lock(rel)
        with lock:
            full = self.full(rel)
            kind = kind_existing if os.path.lexists(full) else KIND_CREATE
            self.record_premutation(rel, kind)
            return op(full)

    def write_file(self, path, data: bytes, mode: int | None = None,
                   append: bool = False) -> None:
        rel = self.resolve_rel(path, follow_final=True)

        def op(full):
            flags = "ab" if append else "wb"
            with open(full, flags) as fh:
                fh.write(data)
            if mode is not None:
                os.chmod(full, mode)

        self._mutate(rel, KIND_CONTENT, op)

    def truncate(self, path, size: int = 0) -> None:
        rel = self.resolve_rel(path, follow_final=True)

        def op(full):
            with open(full, "ab"):
                pass
            os.truncate(full, size)

        self._mutate(rel, KIND_CONTENT, op)

    def mkdir(self, path, mode: int = _DEFAULT_DIR_MODE) -> None:
        rel = self.resolve_rel(path)
        lock = self._path_lock(rel)
        with lock:
            full = self.full(rel)
            if os.path.lexists(full):
                raise FileExistsError(full)
            self.record_premutation(rel, KIND_CREATE)
            os.mkdir(full, mode)

    def makedirs(self, path, mode: int = _DEFAULT_DIR_MODE) -> None:
        rel = self.to_rel(path)
        parts = rel.split("/")
        for i in range(1, len(parts) + 1):
            cur = "/".join(parts[:i])
            if not os.path.lexists(self.full(cur)):
                self.mkdir(cur, mode)

    def unlink(self, path) -> None:
        rel = self.resolve_rel(path)
        with self._path_lock(rel):
            full = self.full(rel)
            if not os.path.lexists(full):
                raise FileNotFoundError(full)
            self.record_premutation(rel, KIND_DELETE)
            os.unlink(full)

    def rmdir(self, path) -> None:
        rel = self.resolve_rel(path)
        with self._path_lock(rel):
            full = self.full(rel)
            self.record_premutation(rel, KIND_DELETE)
            os.rmdir(full)

    def rmtree(self, path) -> None:
        rel = self.to_rel(path)
        full = self.full(rel)
        if os.path.islink(full) or os.path.isfile(full):
            self.unlink(rel)
            return
        for name in sorted(os.listdir(full)):
            self.rmtree(rel + "/" + name)
        self.rmdir(rel)

    def chmod(self, path, mode: int) -> None:
        rel = self.resolve_rel(path, follow_final=True)
        with self._path_lock(rel):
            full = self.full(rel)
            if not os.path.lexists(full):
                raise FileNotFoundError(full)
            self.record_premutation(rel, KIND_METADATA)
            os.chmod(full, mode)

    def rename(self, src, dst) -> None:
        src_rel = self.resolve_rel(src)
        dst_rel = self.resolve_rel(dst)
        if src_rel == dst_rel:
            return
        first, second = sorted([src_rel, dst_rel])
        with self._path_lock(first), self._path_lock(second):
            if not os.path.lexists(self.full(src_rel)):
                raise FileNotFoundError(self.full(src_rel))
            self.record_premutation(
                src_rel,
                KIND_RENAME_SRC,
                partner=(dst_rel, KIND_RENAME_DST, None),
            )
            os.rename(self.full(src_rel), self.full(dst_rel))

    def symlink(self, target: str, path) -> None:
        rel = self.resolve_rel(path)
        with self._path_lock(rel):
            full = self.full(rel)
            if os.path.lexists(full):
                raise FileExistsError(full)
            self.record_premutation(rel, KIND_SYMLINK)
            os.symlink(target, full)

    def hardlink(self, src, dst) -> None:
        src_rel = self.to_rel(src)
        dst_rel = self.resolve_rel(dst)
        with self._path_lock(dst_rel):
            full = self.full(dst_rel)
            if os.path.lexists(full):
                raise FileExistsError(full)
            self.record_premutation(dst_rel, KIND_LINK)
            os.link(self.full(src_rel), full)

    def copy_file(self, src, dst) -> None:
        src_full = self.full(self.to_rel(src))
        with open(src_full, "rb") as fh:
            data = fh.read()
        mode = stat.S_IMODE(os.stat(src_full).st_mode)
        self.write_file(dst, data, mode=mode)

    # -- scan supervision ----------------------------------------------------

    def iter_tree(self):
        """Yield every rel path under the root, excluding the layer store."""
        for dirpath, dirnames, filenames in os.walk(self.guard_root):
            rel_dir = os.path.relpath(dirpath, self.guard_root)
            keep = []
            for d in dirnames:
                rel = d if rel_dir == "." else f"{rel_dir}/{d}"
                rel = rel.replace(os.sep, "/")
                if not self._excluded_rel(rel):
                    keep.append(d)
                    yield rel
            dirnames[:] = keep
            for f in filenames:
                rel = f if rel_dir == "." else f"{rel_dir}/{f}"
                yield rel.replace(os.sep, "/")

    def scan_begin(self, argv: list, cwd: str | None = None) -> None:
        """Durably manifest + pre-stash the whole subtree before a spawn."""
        meta = self.store.read_meta(self.epoch_id)
        scans = meta.setdefault("scans", [])
        scans.append(
            {"argv": list(argv), "cwd": cwd, "state": "begun", "at": now_iso()}
        )
        self.store.write_meta(self.epoch_id, meta)
        listing = set()
        for rel in self.iter_tree():
            listing.add(rel)
            full = self.full(rel)
            if os.path.islink(full) or os.path.isfile(full):
                self.record_premutation(rel, KIND_CONTENT)
            elif os.path.isdir(full):
                self.record_premutation(rel, KIND_METADATA)
            else:
                self.record_premutation(rel, KIND_METADATA)
        self._scan_pre = listing

    def scan_end(self, exit_code: int | None = None) -> None:
        """Reconcile after the supervised process exits: journal creations."""
        if self._scan_pre is None:
            raise GuardError("scan_end without scan_begin")
        pre = self._scan_pre
        self._scan_pre = None
        for rel in self.iter_tree():
            if rel not in pre and rel not in self._stashed:
                self.record_premutation(rel, KIND_CREATE, pre_state=NONEXISTENT)
        meta = self.store.read_meta(self.epoch_id)
        if meta.get("scans"):
            meta["scans"][-1]["state"] = "reconciled"
            meta["scans"][-1]["exit_code"] = exit_code
        self.store.write_meta(self.epoch_id, meta)

    # -- sealing ------------------------------------------------------------

    def seal(self) -> Layer:
        """Post-hash every stashed path, bump versions, mark epoch sealed."""
        if self._scan_pre is not None:
            raise GuardError("cannot seal with a scan in progress")
        return seal_epoch(self.store, self.epoch_id, self.guard_root)


def pre_marker(store: Store, pre_state) -> str:
    """State marker for a stashed pre-state, comparable with posthash lines."""
    if pre_state == NONEXISTENT:
        return "absent"
    t = pre_state.get("type")
    if t == "file":
        return pre_state.get("content_ref") or "unhashable"
    if t == "dir":
        return "dir"
    if t == "symlink":
        ref = pre_state.get("content_ref")
        if not ref:
            return "unhashable"
        target = store.blobs.read_bytes(ref)
        return "link:" + sha256_bytes(target)
    return "special"


def seal_epoch(store: Store, epoch_id: int, guard_root) -> Layer:
    meta = store.read_meta(epoch_id)
    if meta.get("state") != STATE_OPEN:
        raise EpochStateError(f"epoch {epoch_id} is not open")
    root = os.path.realpath(guard_root)
    journal_path = store.journal_path(epoch_id)
    entries = read_jsonl(journal_path, drop_torn_tail=True)
    journal_path.touch()  # a mutation-free epoch seals as an empty layer
    post_path = store.posthash_path(epoch_id)
    if post_path.exists():
        os.unlink(post_path)
    post_path.touch()
    touched = []
    post = {}
    for rec in entries:
        rel = rec["path"]
        full = os.path.join(root, rel.replace("/", os.sep))
        prec = _post_record(rel, full)
        post[rel] = prec
        append_jsonl(post_path, prec, fsync=False)
        if _changed(store, rec, prec):
            touched.append(rel)
    touched = sorted(set(touched))
    for rel in touched:
        full = os.path.join(root, rel.replace("/", os.sep))
        store.versions.bump(rel, os.path.lexists(full))
    layer = Layer(epoch_id, entries, post)
    from .effects import summarize  # late import; effects reads layers

    summary = summarize(layer, store)
    meta["state"] = STATE_SEALED
    meta["sealed_at"] = now_iso()
    meta["touched"] = touched
    meta["entries"] = len(entries)
    meta["summary"] = summary.to_json_obj()
    store.write_meta(epoch_id, meta)
    return layer


def _changed(store: Store, rec: dict, post_rec: dict) -> bool:
    """Did this path's state actually change between stash and seal?"""
    pre = rec["pre_state"]
    if pre_marker(store, pre) != post_rec["hash"]:
        return True
    if pre == NONEXISTENT:
        return False
    pre_mode = pre.get("metadata", {}).get("mode")
    if pre_mode is not None and post_rec.get("mode") is not None:
        return pre_mode != post_rec["mode"]
    return False


def recover_store(store: Store) -> list:
    """Seal any epoch left open by a crash; flag it for user abort."""
    recovered = []
    for eid in store.list_epoch_ids():
        try:
            meta = store.read_meta(eid)
        except Exception:
            continue
        if meta.get("state") != STATE_OPEN:
            continue
        guard_root = meta.get("guard_root") or "."
        # drop a torn trailing journal record before sealing
        journal = store.journal_path(eid)
        records = read_jsonl(journal, drop_torn_tail=True)
        text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
        journal.write_text(text, encoding="utf-8")
        if meta.get("scans") and meta["scans"][-1].get("state") == "begun":
            meta["scans"][-1]["state"] = "interrupted"
            store.write_meta(eid, meta)
        seal_epoch(store, eid, guard_root)
        meta = store.read_meta(eid)
        meta["recovered"] = True
        store.write_meta(eid, meta)
        recovered.append(eid)
    return recovered
