"""Effect summaries: the localized account of what an epoch changed.

A summary is computed from a sealed layer alone — journal pre-states on
one side, seal-time post records on the other — so it stays accurate even
after later epochs touch the same tree.  Categories are disjoint by path;
rename pairs occupy `renamed` only, with any content change annotated
inside the pair.  Paths whose pre and post states match land in
`no_net_change` (e.g. temp files created and removed within the epoch)
and are suppressed from human rendering.
"""

from __future__ import annotations

import json
import posixpath
from dataclasses import dataclass, field

from .errors import EpochStateError
from .guard import NONEXISTENT, Layer, pre_marker

_CATEGORIES = (
    "added",
    "deleted",
    "content_modified",
    "metadata_modified",
    "renamed",
)


@dataclass
class EffectSummary:
    epoch_id: int
    added: list = field(default_factory=list)  # (path, bytes)
    deleted: list = field(default_factory=list)  # (path, bytes)
    content_modified: list = field(default_factory=list)  # (path, before, after)
    metadata_modified: list = field(default_factory=list)  # (path, [fields])
    renamed: list = field(default_factory=list)  # dicts: from/to/...
    no_net_change: list = field(default_factory=list)  # paths
    dir_rollup: dict = field(default_factory=dict)
    totals: dict = field(default_factory=dict)

    @property
    def is_empty(self) -> bool:
        return not (
            self.added
            or self.deleted
            or self.content_modified
            or self.metadata_modified
            or self.renamed
        )

    def to_json_obj(self) -> dict:
        return {
            "epoch": self.epoch_id,
            "added": [{"path": p, "bytes": b} for p, b in self.added],
            "deleted": [{"path": p, "bytes": b} for p, b in self.deleted],
            "content_modified": [
                {"path": p, "bytes_before": b, "bytes_after": a}
                for p, b, a in self.content_modified
            ],
            "metadata_modified": [
                {"path": p, "fields": list(fields)}
                for p, fields in self.metadata_modified
            ],
            "renamed": [dict(r) for r in self.renamed],
            "no_net_change": list(self.no_net_change),
            "dir_rollup": {d: dict(c) for d, c in sorted(self.dir_rollup.items())},
            "totals": dict(self.totals),
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "EffectSummary":
        return cls(
            epoch_id=obj["epoch"],
            added=[(r["path"], r["bytes"]) for r in obj["added"]],
            deleted=[(r["path"], r["bytes"]) for r in obj["deleted"]],
            content_modified=[
                (r["path"], r["bytes_before"], r["bytes_after"])
                for r in obj["content_modified"]
            ],
            metadata_modified=[
                (r["path"], list(r["fields"])) for r in obj["metadata_modified"]
            ],
            renamed=[dict(r) for r in obj["renamed"]],
            no_net_change=list(obj["no_net_change"]),
            dir_rollup={d: dict(c) for d, c in obj["dir_rollup"].items()},
            totals=dict(obj["totals"]),
        )


def _pre_bytes(store, pre_state) -> int:
    if pre_state == NONEXISTENT:
        return 0
    if pre_state.get("type") == "file" and pre_state.get("content_ref"):
        try:
            return store.blobs.size(pre_state["content_ref"])
        except OSError:
            return 0
    return 0


def summarize(layer: Layer, store) -> EffectSummary:
    """Classify every layer entry using (pre_state, post record)."""
    summary = EffectSummary(epoch_id=layer.epoch_id)
    post = layer.post
    if set(post) != {e["path"] for e in layer.entries}:
        raise EpochStateError(
            f"epoch {layer.epoch_id}: layer is not sealed (post map incomplete)"
        )

    paired = {}
    for src, dst in layer.rename_pairs():
        s_post = post[src["path"]]["hash"]
        d_post = post[dst["path"]]["hash"]
        if s_post == "absent" and d_post != "absent":
            paired[src["path"]] = None
            paired[dst["path"]] = None
            src_marker = pre_marker(store, src["pre_state"])
            rec = {
                "from": src["path"],
                "to": dst["path"],
                "content_changed": d_post != src_marker,
                "overwrote": dst["pre_state"] != NONEXISTENT,
            }
            summary.renamed.append(rec)
            before = _pre_bytes(store, src["pre_state"])
            after = post[dst["path"]].get("size", 0)
            summary.totals["net_bytes"] = (
                summary.totals.get("net_bytes", 0) + after - before
            )

    net = summary.totals.get("net_bytes", 0)
    for entry in layer.entries:
        path = entry["path"]
        if path in paired:
            continue
        pre = entry["pre_state"]
        prec = post[path]
        post_hash = prec["hash"]
        pre_hash = pre_marker(store, pre)
        pre_absent = pre == NONEXISTENT
        post_absent = post_hash == "absent"
        if pre_absent and not post_absent:
            size = prec.get("size", 0)
            summary.added.append((path, size))
            net += size
        elif not pre_absent and post_absent:
            size = _pre_bytes(store, pre)
            summary.deleted.append((path, size))
            net -= size
        elif pre_absent and post_absent:
            summary.no_net_change.append(path)
        elif pre_hash != post_hash:
            before = _pre_bytes(store, pre)
            after = prec.get("size", 0)
            summary.content_modified.append((path, before, after))
            net += after - before
        else:
            fields = _metadata_fields(pre, prec)
            if fields:
                summary.metadata_modified.append((path, fields))
            else:
                summary.no_net_change.append(path)

    summary.added.sort()
    summary.deleted.sort()
    summary.content_modified.sort()
    summary.metadata_modified.sort()
    summary.renamed.sort(key=lambda r: (r["from"], r["to"]))
    summary.no_net_change.sort()

    rollup = {}
    for cat in _CATEGORIES:
        for item in getattr(summary, cat):
            if cat == "renamed":
                path = item["from"]
            else:
                path = item[0]
            parent = posixpath.dirname(path) or "."
            rollup.setdefault(parent, {})
            rollup[parent][cat] = rollup[parent].get(cat, 0) + 1
    summary.dir_rollup = rollup
    summary.totals = {
        "added": len(summary.added),
        "deleted": len(summary.deleted),
        "content_modified": len(summary.content_modified),
        "metadata_modified": len(summary.metadata_modified),
        "renamed": len(summary.renamed),
        "no_net_change": len(summary.no_net_change),
        "net_bytes": net,
    }
    return summary


def _metadata_fields(pre, prec) -> list:
    fields = []
    meta = pre.get("metadata", {})
    if prec.get("mode") is not None and meta.get("mode") is not None:
        if prec["mode"] != meta["mode"]:
            fields.append("mode")
    if prec.get("uid") is not None and meta.get("uid") is not None:
        if prec["uid"] != meta["uid"] or prec.get("gid") != meta.get("gid"):
            fields.append("owner")
    return fields


def render_json(summary: EffectSummary) -> bytes:
    """Canonical JSON with a stable top-level key order."""
    return (
        json.dumps(summary.to_json_obj(), separators=(",", ":")) + "\n"
    ).encode("utf-8")


def parse_summary(data) -> EffectSummary:
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    return EffectSummary.from_json_obj(json.loads(data))


def _fmt_bytes(n: int) -> str:
    return f"{n} B"


def _under(path: str, prefix: str) -> bool:
    if prefix in (".", ""):
        return True
    return path == prefix or path.startswith(prefix + "/")


def render_human(summary: EffectSummary, cwd: str | None = None) -> str:
    """Stable, directory-grouped plain-text rendering.

    `cwd` is the current working directory relative to the guard root;
    groups outside it are flagged, since far-away effects are the ones
    users overlook.
    """
    if summary.is_empty:
        return "no effects\n"
    t = summary.totals
    head_parts = []
    for cat in _CATEGORIES:
        count = t.get(cat, 0)
        if count:
            head_parts.append(f"{count} {cat.replace('_', ' ')}")
    net = t.get("net_bytes", 0)
    head = (
        f"epoch {summary.epoch_id}: "
        + ", ".join(head_parts)
        + f" (net {net:+d} bytes)"
    )
    groups = {}

    def add_line(path, line):
        parent = posixpath.dirname(path) or "."
        groups.setdefault(parent, []).append((path, line))

    for path, size in summary.added:
        add_line(path, f"+ {posixpath.basename(path)} ({_fmt_bytes(size)})")
    for path, size in summary.deleted:
        add_line(path, f"- {posixpath.basename(path)} ({_fmt_bytes(size)})")
    for path, before, after in summary.content_modified:
        add_line(
            path,
            f"~ {posixpath.basename(path)} ({before} -> {after} B)",
        )
    for path, fields in summary.metadata_modified:
        add_line(path, f"m {posixpath.basename(path)} ({', '.join(fields)})")
    for rec in summary.renamed:
        note = " (content changed)" if rec.get("content_changed") else ""
        add_line(rec["from"], f"r {rec['from']} -> {rec['to']}{note}")

    lines = [head]
    for parent in sorted(groups):
        mark = ""
        if cwd is not None and not _under(parent, cwd):
            mark = "  [outside current directory]"
        lines.append(f"  {parent}/{mark}")
        for _, line in sorted(groups[parent]):
            lines.append(f"    {line}")
    return "\n".join(lines) + "\n"
