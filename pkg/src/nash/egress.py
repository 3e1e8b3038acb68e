"""The egress gate: intercept external calls, taint them, batch, decide.

External API calls never run at interception time — the call interface and
arguments are captured as a structured request, its arguments are traced
back to the local files they were derived from (file-level provenance over
workflow data edges), and requests are presented for approval in batches
of mutually independent calls.  Every event is appended to a durable
decision log, so gate state is fully replayable from the store.
"""

from __future__ import annotations

import posixpath
from dataclasses import dataclass, field
from fnmatch import fnmatch

from .artifact import DEFAULT_EGRESS_ALLOWLIST
from .errors import EgressDenied, EgressError
from .util import now_iso

APPROVE = "approve"
DENY = "deny"

DEFAULT_SENSITIVE_PATTERNS = (
    ".ssh/*",
    "id_rsa*",
    "id_ed25519*",
    "id_dsa*",
    "*.pem",
    "*.key",
    ".aws/*",
    ".netrc",
    ".gnupg/*",
    "*_history",
    "*.kdbx",
    "credentials*",
)


@dataclass(frozen=True)
class EgressRequest:
    request_id: str
    tool: str
    descriptor: dict
    origin_node: str
    taint: tuple  # ((path, sensitive: bool), ...)
    created_at: str

    def to_json_obj(self) -> dict:
        return {
            "request_id": self.request_id,
            "tool": self.tool,
            "descriptor": dict(self.descriptor),
            "origin_node": self.origin_node,
            "taint": [[p, s] for p, s in self.taint],
            "created_at": self.created_at,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "EgressRequest":
        return cls(
            request_id=obj["request_id"],
            tool=obj["tool"],
            descriptor=dict(obj["descriptor"]),
            origin_node=obj["origin_node"],
            taint=tuple((p, bool(s)) for p, s in obj["taint"]),
            created_at=obj["created_at"],
        )


@dataclass
class PromptBatch:
    batch_id: str
    requests: tuple
    decisions: dict = field(default_factory=dict)


def is_sensitive(path: str, patterns=DEFAULT_SENSITIVE_PATTERNS) -> bool:
    """Match a relative path against sensitive patterns.

    Patterns apply to the whole path and to every component-suffix of it,
    so `.ssh/*` catches `home/user/.ssh/id_rsa` as well as `.ssh/id_rsa`.
    """
    parts = path.replace("\\", "/").split("/")
    suffixes = ["/".join(parts[i:]) for i in range(len(parts))]
    return any(fnmatch(s, pat) for s in suffixes for pat in patterns)


class Gate:
    """Serialized decision log plus in-memory view of pending requests."""

    def __init__(self, store, allowlist=DEFAULT_EGRESS_ALLOWLIST,
                 sensitive_patterns=None):
        self.store = store
        self.allowlist = tuple(allowlist)
        self.patterns = tuple(sensitive_patterns or DEFAULT_SENSITIVE_PATTERNS)
        self._requests: dict[str, EgressRequest] = {}
        self._order: list[str] = []
        self._decisions: dict[str, str] = {}
        self._executed: dict[str, bool] = {}
        self._batches: dict[str, PromptBatch] = {}
        self._batch_order: list[str] = []
        self._replay()

    # -- persistence ---------------------------------------------------------

    def _replay(self) -> None:
        for event in self.store.load_egress():
            kind = event.get("event")
            if kind == "request":
                req = EgressRequest.from_json_obj(event["request"])
                self._requests[req.request_id] = req
                self._order.append(req.request_id)
            elif kind == "batch":
                batch = PromptBatch(
                    event["batch_id"],
                    tuple(self._requests[r] for r in event["request_ids"]),
                )
                self._batches[batch.batch_id] = batch
                self._batch_order.append(batch.batch_id)
            elif kind == "decision":
                batch = self._batches[event["batch_id"]]
                batch.decisions = dict(event["decisions"])
                self._decisions.update(batch.decisions)
            elif kind == "executed":
                self._executed[event["request_id"]] = bool(event["ok"])

    def _log(self, obj: dict) -> None:
        self.store.append_egress(obj)

    # -- interception --------------------------------------------------------

    def tag_taint(self, paths) -> tuple:
        return tuple(
            (p, is_sensitive(p, self.patterns)) for p in sorted(set(paths))
        )

    def intercept(self, origin_node: str, tool: str, descriptor: dict,
                  taint_paths=()) -> EgressRequest:
        """Register a pending request; the call itself is never performed."""
        if tool not in self.allowlist:
            self._log({
                "event": "denied-tool",
                "origin_node": origin_node,
                "tool": tool,
                "created_at": now_iso(),
            })
            raise EgressDenied(
                f"tool {tool!r} is not on the egress allowlist"
            )
        request_id = f"r{len(self._order) + 1}"
        req = EgressRequest(
            request_id=request_id,
            tool=tool,
            descriptor=dict(descriptor),
            origin_node=origin_node,
            taint=self.tag_taint(taint_paths),
            created_at=now_iso(),
        )
        self._requests[request_id] = req
        self._order.append(request_id)
        self._log({"event": "request", "request": req.to_json_obj()})
        return req

    # -- queries -------------------------------------------------------------

    def request(self, request_id: str) -> EgressRequest:
        try:
            return self._requests[request_id]
        except KeyError:
            raise EgressError(f"unknown egress request {request_id!r}") from None

    def taint_report(self, request_id: str) -> tuple:
        return self.request(request_id).taint

    def decision(self, request_id: str) -> str | None:
        self.request(request_id)
        return self._decisions.get(request_id)

    def pending(self) -> list:
        """Requests with no decision yet, in interception order."""
        return [
            self._requests[r] for r in self._order if r not in self._decisions
        ]

    def approved_unexecuted(self) -> list:
        return [
            self._requests[r]
            for r in self._order
            if self._decisions.get(r) == APPROVE and r not in self._executed
        ]

    # -- batching ------------------------------------------------------------

    def batch_prompts(self, node_deps: dict | None = None) -> list:
        """Batch the currently ready pending requests.

        `node_deps` maps an origin node id to the set of origin node ids
        whose results it consumes.  A request is ready when no other
        pending request's node is among its dependencies; the ready set is
        mutually independent by construction and forms one batch.
        """
        node_deps = node_deps or {}
        pend = self.pending()
        pending_nodes = {r.origin_node for r in pend}
        ready = [
            r for r in pend
            if not (set(node_deps.get(r.origin_node, ()))
                    & (pending_nodes - {r.origin_node}))
        ]
        if not ready:
            return []
        batch_id = f"b{len(self._batch_order) + 1}"
        batch = PromptBatch(batch_id, tuple(ready))
        self._batches[batch_id] = batch
        self._batch_order.append(batch_id)
        self._log({
            "event": "batch",
            "batch_id": batch_id,
            "request_ids": [r.request_id for r in ready],
        })
        return [batch]

    def batch(self, batch_id: str) -> PromptBatch:
        try:
            return self._batches[batch_id]
        except KeyError:
            raise EgressError(f"unknown prompt batch {batch_id!r}") from None

    # -- decisions -----------------------------------------------------------

    def resolve(self, batch_id: str, decisions: dict) -> None:
        batch = self.batch(batch_id)
        wanted = {r.request_id for r in batch.requests}
        got = set(decisions)
        if got != wanted:
            missing = sorted(wanted - got) + sorted(got - wanted)
            raise EgressError(
                f"partial decision map for batch {batch_id}: {missing}"
            )
        for rid, verdict in decisions.items():
            if verdict not in (APPROVE, DENY):
                raise EgressError(f"unknown decision {verdict!r} for {rid}")
        batch.decisions = dict(decisions)
        self._decisions.update(decisions)
        self._log({
            "event": "decision",
            "batch_id": batch_id,
            "decisions": dict(decisions),
        })

    def mark_executed(self, request_id: str, ok: bool) -> None:
        self.request(request_id)
        self._executed[request_id] = ok
        self._log({"event": "executed", "request_id": request_id, "ok": ok})


def render_prompt(batch: PromptBatch) -> str:
    """The user-facing approval prompt for one batch."""
    lines = [f"pending egress ({len(batch.requests)} request"
             f"{'s' if len(batch.requests) != 1 else ''}):"]
    for i, req in enumerate(batch.requests, 1):
        d = req.descriptor
        dest = d.get("destination") or d.get("url") or "?"
        lines.append(f"[{i}] {req.tool} {d.get('method', 'GET')} {dest}")
        params = d.get("parameters") or []
        if params:
            lines.append(f"    parameters: {', '.join(params)}")
        out = d.get("output")
        if out:
            lines.append(f"    writes: {out}")
        for path, sensitive in req.taint:
            mark = " [SENSITIVE]" if sensitive else ""
            lines.append(f"    reads: {path}{mark}")
    return "\n".join(lines) + "\n"


def summarize_taint(req: EgressRequest) -> str:
    """One-line taint note for previews; empty when nothing was read."""
    if not req.taint:
        return ""
    parts = [
        f"{p} [SENSITIVE]" if s else p for p, s in req.taint
    ]
    return "reads: " + ", ".join(parts)
