"""The undo engine: epoch lifecycle, commit/abort, selective restore,
conflict detection, and automatic stash-budget commits.

Committing an epoch discards its layer (journal plus uniquely-referenced
blobs) and leaves the base filesystem untouched.  Aborting restores every
stashed pre-state.  Paths touched again by a later epoch — or changed
outside any epoch — are conflicts: reported, skipped by default, restored
under `force`.
"""

from __future__ import annotations

import os
import shutil
import stat
from dataclasses import dataclass, field

from .errors import EpochStateError, StoreError, UsageError
from .guard import (
    NONEXISTENT,
    Layer,
    load_layer,
    state_marker,
)
from .store import (
    STATE_ABORTED,
    STATE_COMMITTED,
    STATE_OPEN,
    STATE_SEALED,
    Store,
    read_jsonl,
)

ADVISORY = (
    "note: application-level consistency (databases, package managers) "
    "is not tracked; only file states are restored"
)


@dataclass(frozen=True)
class Conflict:
    path: str
    kind: str  # later-epoch | external-modification
    later_epoch: int | None = None


@dataclass
class RestoreReport:
    epoch_id: int
    restored: list = field(default_factory=list)  # (path, action)
    skipped: list = field(default_factory=list)  # (path, reason)
    conflicts: list = field(default_factory=list)
    advisory: str = ADVISORY


def begin_epoch(store: Store, description: str, artifact_ref: str | None = None,
                guard_root: str | None = None) -> dict:
    """Open a fresh epoch (id = previous max + 1); one open epoch at most."""
    root = os.path.realpath(guard_root or os.getcwd())
    return store.create_epoch(description, artifact_ref, root)


def commit(store: Store, epoch_id: int) -> None:
    """Discard the layer: we keep the mutations and give up the undo."""
    store.set_state(epoch_id, STATE_COMMITTED)
    _discard_layer(store, epoch_id)
    store.versions.compact()


def _discard_layer(store: Store, epoch_id: int) -> None:
    journal = store.journal_path(epoch_id)
    mine = _journal_digests(journal)
    if mine:
        held = set()
        for other in store.list_epoch_ids():
            if other == epoch_id:
                continue
            held |= _journal_digests(store.journal_path(other))
        for digest in mine - held:
            store.blobs.delete(digest)
    for path in (journal, store.posthash_path(epoch_id)):
        try:
            os.unlink(path)
        except FileNotFoundError:
            pass


def _journal_digests(journal_path) -> set:
    digests = set()
    if not journal_path.exists():
        return digests
    for rec in read_jsonl(journal_path, drop_torn_tail=True):
        pre = rec.get("pre_state")
        if isinstance(pre, dict) and pre.get("content_ref"):
            digests.add(pre["content_ref"])
    return digests


def detect_conflicts(store: Store, epoch_id: int, paths=None) -> list:
    """Compare each path's current state with the layer's seal-time state.

    A difference means someone changed the path after this epoch sealed:
    the smallest later sealed/committed epoch that touched it is named,
    otherwise it is an external modification.
    """
    meta = store.read_meta(epoch_id)
    if meta.get("state") not in (STATE_SEALED, STATE_ABORTED, STATE_COMMITTED):
        raise EpochStateError(f"epoch {epoch_id} is not sealed")
    layer = load_layer(store, epoch_id)
    root = meta.get("guard_root") or "."
    if paths is None:
        paths = layer.paths
    layer_paths = set(layer.paths)
    later_touch = None
    conflicts = []
    for path in paths:
        if path not in layer_paths:
            raise UsageError(f"path {path!r} is not in epoch {epoch_id}'s layer")
        post = layer.post.get(path)
        current = state_marker(os.path.join(root, path))
        if post is not None and current == post["hash"]:
            continue
        if later_touch is None:
            later_touch = _later_touches(store, epoch_id)
        later = sorted(e for e, touched in later_touch.items() if path in touched)
        if later:
            conflicts.append(Conflict(path, "later-epoch", later[0]))
        else:
            conflicts.append(Conflict(path, "external-modification"))
    return conflicts


def _later_touches(store: Store, epoch_id: int) -> dict:
    out = {}
    for eid in store.list_epoch_ids():
        if eid <= epoch_id:
            continue
        meta = store.read_meta(eid)
        if meta.get("state") in (STATE_SEALED, STATE_COMMITTED):
            out[eid] = set(meta.get("touched") or [])
    return out


def abort(store: Store, epoch_id: int, force: bool = False) -> RestoreReport:
    """Restore every stashed pre-state and mark the epoch aborted."""
    meta = store.read_meta(epoch_id)
    state = meta.get("state")
    if state != STATE_SEALED:
        raise EpochStateError(
            f"epoch {epoch_id} cannot be aborted from state {state}"
        )
    layer = load_layer(store, epoch_id)
    report = _restore(store, epoch_id, meta, layer, layer.paths, force)
    store.set_state(epoch_id, STATE_ABORTED)
    return report


def restore_paths(store: Store, epoch_id: int, paths, force: bool = False
                  ) -> RestoreReport:
    """Selective restore; the epoch stays sealed and remains abortable."""
    meta = store.read_meta(epoch_id)
    state = meta.get("state")
    if state != STATE_SEALED:
        raise EpochStateError(
            f"epoch {epoch_id} cannot be restored from state {state}"
        )
    layer = load_layer(store, epoch_id)
    layer_paths = set(layer.paths)
    for path in paths:
        if path not in layer_paths:
            raise UsageError(f"path {path!r} is not in epoch {epoch_id}'s layer")
    return _restore(store, epoch_id, meta, layer, list(paths), force)


def _restore(store: Store, epoch_id: int, meta: dict, layer: Layer,
             paths: list, force: bool) -> RestoreReport:
    root = meta.get("guard_root") or "."
    report = RestoreReport(epoch_id=epoch_id)
    already = set(meta.get("restored_paths") or [])
    todo = []
    for path in paths:
        if path in already:
            report.skipped.append((path, "already restored"))
        else:
            todo.append(path)
    report.conflicts = detect_conflicts(store, epoch_id, todo)
    conflicted = {}
    for c in report.conflicts:
        if c.kind == "later-epoch":
            conflicted[c.path] = f"later-epoch conflict (epoch {c.later_epoch})"
        else:
            conflicted[c.path] = "external modification"
    if not force:
        kept = []
        for path in todo:
            if path in conflicted:
                report.skipped.append((path, conflicted[path]))
            else:
                kept.append(path)
        todo = kept

    entries = {e["path"]: e for e in layer.entries if e["path"] in set(todo)}
    actions = _apply_pre_states(store, root, entries, force, report)
    for path, action in sorted(actions.items()):
        report.restored.append((path, action))
        full = os.path.join(root, path)
        store.versions.bump(path, os.path.lexists(full))

    meta = store.read_meta(epoch_id)
    meta["restored_paths"] = sorted(
        set(meta.get("restored_paths") or []) | set(actions)
    )
    store.write_meta(epoch_id, meta)
    return report


def _apply_pre_states(store: Store, root: str, entries: dict, force: bool,
                      report: RestoreReport) -> dict:
    """Reinstate pre-states; returns path -> action for successes."""
    actions = {}

    def full(path):
        return os.path.join(root, path.replace("/", os.sep))

    def current_type(path):
        try:
            st = os.lstat(full(path))
        except OSError:
            return None
        if stat.S_ISLNK(st.st_mode):
            return "symlink"
        if stat.S_ISDIR(st.st_mode):
            return "dir"
        if stat.S_ISREG(st.st_mode):
            return "file"
        return "other"

    def pre_type(pre):
        return None if pre == NONEXISTENT else pre.get("type")

    def depth(path):
        return path.count("/")

    # 1. remove entities that should not exist (or have the wrong type),
    #    deepest paths first so directories empty out naturally
    blocked = set()
    for path in sorted(entries, key=depth, reverse=True):
        pre = entries[path]["pre_state"]
        cur = current_type(path)
        want = pre_type(pre)
        if cur is None or cur == want:
            continue
        target = full(path)
        try:
            if cur == "dir":
                try:
                    os.rmdir(target)
                except OSError:
                    # something inside was not part of this epoch's layer
                    if force:
                        shutil.rmtree(target)
                    else:
                        report.skipped.append(
                            (path, "directory not empty (external files)")
                        )
                        blocked.add(path)
                        continue
            else:
                os.unlink(target)
        except OSError as err:
            report.skipped.append((path, f"restore failed: {err}"))
            blocked.add(path)
            continue
        if want is None:
            actions[path] = "deleted"

    # 2. recreate directories, shallowest first
    for path in sorted(entries, key=depth):
        if path in blocked:
            continue
        pre = entries[path]["pre_state"]
        if pre_type(pre) == "dir" and current_type(path) is None:
            os.mkdir(full(path))
            actions[path] = "content-restored"

    # 3. file contents and symlink targets
    for path in sorted(entries):
        if path in blocked:
            continue
        pre = entries[path]["pre_state"]
        want = pre_type(pre)
        try:
            if want == "file":
                if state_marker(full(path)) == pre.get("content_ref"):
                    continue  # content already right; maybe metadata differs
                data = store.blobs.read_bytes(pre["content_ref"])
                with open(full(path), "wb") as fh:
                    fh.write(data)
                actions[path] = "content-restored"
            elif want == "symlink":
                raw = store.blobs.read_bytes(pre["content_ref"])
                target = raw.decode("utf-8", "surrogateescape")
                if current_type(path) == "symlink" and os.readlink(
                    full(path)
                ) == target:
                    continue
                if os.path.lexists(full(path)):
                    os.unlink(full(path))
                os.symlink(target, full(path))
                actions[path] = "content-restored"
            elif want == "other":
                if current_type(path) == "other":
                    actions.setdefault(path, "metadata-restored")
                else:
                    report.skipped.append((path, "unrestorable content"))
                    blocked.add(path)
        except (OSError, StoreError) as err:
            report.skipped.append((path, f"restore failed: {err}"))
            blocked.add(path)
            actions.pop(path, None)

    # 4. modes, children before parents so directory chmods stick last
    for path in sorted(entries, key=depth, reverse=True):
        if path in blocked:
            continue
        pre = entries[path]["pre_state"]
        if pre == NONEXISTENT:
            continue
        mode = pre.get("metadata", {}).get("mode")
        want = pre_type(pre)
        if mode is None or want == "symlink":
            continue
        if current_type(path) == want:
            try:
                os.chmod(full(path), mode)
            except OSError as err:
                report.skipped.append((path, f"restore failed: {err}"))
                actions.pop(path, None)
                continue
            actions.setdefault(path, "metadata-restored")
    return actions


def enforce_stash_budget(store: Store, stash_max_bytes: int | None) -> list:
    """Commit oldest sealed epochs until the stash fits the budget."""
    if not stash_max_bytes:
        return []
    committed = []
    while store.stash_bytes() > stash_max_bytes:
        sealed = [
            eid
            for eid in store.list_epoch_ids()
            if store.read_meta(eid).get("state") == STATE_SEALED
        ]
        if not sealed:
            break
        oldest = min(sealed)
        commit(store, oldest)
        committed.append(oldest)
    return committed


def list_history(store: Store) -> list:
    """All epochs, newest first, with state and summary statistics."""
    records = []
    for eid in sorted(store.list_epoch_ids(), reverse=True):
        meta = store.read_meta(eid)
        summary = meta.get("summary") or {}
        records.append(
            {
                "epoch_id": eid,
                "state": meta.get("state"),
                "description": meta.get("description") or "",
                "artifact_ref": meta.get("artifact_ref"),
                "started_at": meta.get("started_at"),
                "sealed_at": meta.get("sealed_at"),
                "entries": meta.get("entries", 0),
                "touched": len(meta.get("touched") or []),
                "totals": summary.get("totals") or {},
                "recovered": bool(meta.get("recovered")),
            }
        )
    return records
