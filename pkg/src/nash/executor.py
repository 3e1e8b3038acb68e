"""Runs a ScriptArtifact inside one epoch.

The workflow tree drives execution (sequences in order, loops over glob
matches, branches by predicate); the edge graph drives everything else:
dependency order, concurrency, and deferral.  Egress tasks never execute
here — each reach of an egress call site registers a pending request with
the gate, and every node whose edge-ancestry includes an unresolved
egress node is reported `skipped-deferred`.  A later `resume` runs the
deferred remainder in a continuation epoch using the bindings recorded
when the call sites were first reached; undecided requests are carried
forward, so a chain of egress calls resolves over several rounds.
"""

from __future__ import annotations

import os
import posixpath
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from . import namespaces, tasks
from .artifact import (
    And,
    DEFAULT_EGRESS_ALLOWLIST,
    Exists,
    ExtEq,
    ForEachNode,
    IfNode,
    IsDir,
    IsFile,
    LitSeg,
    Not,
    ROLE_INPUT,
    ScriptArtifact,
    SeqNode,
    StrEq,
    TaskNode,
    eval_path,
    _path_expr_form_key,
)
from .egress import APPROVE, Gate
from .errors import (
    ArtifactReferenceError,
    EgressDenied,
    EgressError,
    GuardError,
    UsageError,
)
from .guard import GuardHandle, seal_epoch
from .history import abort, begin_epoch, enforce_stash_budget
from .util import fnmatch_name, test_mode

STATUS_SUCCESS = "success"
STATUS_FAILED = "failed"
STATUS_DEFERRED = "skipped-deferred"
STATUS_DENIED = "denied"

REASON_PENDING = "pending egress approval"
REASON_BLOCKED = "awaits egress approval"
REASON_UPSTREAM = "upstream-failed"
REASON_DENIED_UP = "upstream egress denied"


@dataclass(frozen=True)
class SandboxConfig:
    guard_root: str
    store_path: str = ""
    network: str = "deny"  # deny | allow
    network_provenance: tuple | None = None  # (who, when); required for allow
    pid: str = "fresh"
    user: str = "mapped"
    egress_allowlist: tuple = DEFAULT_EGRESS_ALLOWLIST
    stash_max_bytes: int | None = None
    env_passthrough: tuple = ("PATH", "HOME", "LANG", "TZ")
    serial: bool = False
    max_workers: int = 4

    def __post_init__(self):
        if self.network not in ("deny", "allow"):
            raise UsageError(f"unknown network mode {self.network!r}")
        if self.network == "allow" and not self.network_provenance:
            raise UsageError(
                "network=allow requires provenance: who enabled it and when"
            )

    @property
    def namespace_plan(self) -> dict:
        return {"network": self.network, "pid": self.pid, "user": self.user}


@dataclass(frozen=True)
class NodeResult:
    node_id: str
    status: str
    exit_code: int | None = None
    reason: str = ""
    detail: str = ""

    def to_json_obj(self) -> dict:
        return {
            "node": self.node_id,
            "status": self.status,
            "exit_code": self.exit_code,
            "reason": self.reason,
            "detail": self.detail,
        }


@dataclass
class ExecutionReport:
    epoch_id: int
    nodes: tuple = ()
    pending_egress: tuple = ()  # request ids awaiting a decision
    wall_time: float = 0.0
    degraded: tuple = ()
    continued_from: int | None = None

    @property
    def ok(self) -> bool:
        return not any(
            n.status in (STATUS_FAILED, STATUS_DENIED) for n in self.nodes
        )

    def node(self, node_id: str) -> NodeResult:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def to_json_obj(self) -> dict:
        return {
            "epoch_id": self.epoch_id,
            "nodes": [n.to_json_obj() for n in self.nodes],
            "pending_egress": list(self.pending_egress),
            "wall_time": self.wall_time,
            "degraded": list(self.degraded),
            "continued_from": self.continued_from,
        }


# ---------------------------------------------------------------------------
# planning


@dataclass(frozen=True)
class Schedule:
    order: tuple  # task node ids, topologically sorted
    deps: dict  # task node id -> frozenset of direct dependency node ids
    egress_nodes: frozenset
    egress_ancestors: dict  # task node id -> frozenset of egress ancestors
    units: tuple  # (unit root node id, frozenset of member task node ids)
    unit_deps: dict  # unit root -> frozenset of unit roots it depends on

    def closure(self, roots) -> frozenset:
        """Roots plus every node downstream of them along dependency edges."""
        out = set(roots)
        changed = True
        while changed:
            changed = False
            for node, deps in self.deps.items():
                if node not in out and deps & out:
                    out.add(node)
                    changed = True
        return frozenset(out)


def _structural_task_order(artifact: ScriptArtifact) -> list:
    graph = artifact.workflow
    order = []

    def walk(node_id):
        node = graph.node(node_id)
        if isinstance(node, TaskNode):
            order.append(node_id)
        for child in graph.structural_children(node):
            walk(child)

    walk(graph.root)
    return order


def plan(artifact: ScriptArtifact) -> Schedule:
    """Derive execution order, dependency sets and concurrency units."""
    graph = artifact.workflow
    task_order = _structural_task_order(artifact)
    pos = {n: i for i, n in enumerate(task_order)}
    deps = {n: set() for n in task_order}
    for edge in graph.edges:
        if edge.src in deps and edge.dst in deps:
            deps[edge.dst].add(edge.src)

    # Kahn's algorithm with structural position as the tie-break.
    remaining = dict(deps)
    order = []
    placed = set()
    while remaining:
        ready = sorted(
            (n for n, d in remaining.items() if d <= placed),
            key=pos.__getitem__,
        )
        # Acyclicity is an artifact invariant, so ready is never empty.
        order.append(ready[0])
        placed.add(ready[0])
        del remaining[ready[0]]

    egress = frozenset(
        n for n in task_order if artifact.task(graph.node(n).task_id).egress
    )
    ancestors = {}
    for n in order:
        anc = set()
        for d in deps[n]:
            anc |= ancestors[d] | {d}
        ancestors[n] = frozenset(anc)
    egress_anc = {
        n: frozenset(a for a in ancestors[n] if a in egress) for n in order
    }

    root = graph.node(graph.root)
    unit_roots = (
        list(root.children) if isinstance(root, SeqNode) else [graph.root]
    )
    units = []
    unit_of = {}
    for uroot in unit_roots:
        members = set()

        def collect(nid):
            node = graph.node(nid)
            if isinstance(node, TaskNode):
                members.add(nid)
            for child in graph.structural_children(node):
                collect(child)

        collect(uroot)
        units.append((uroot, frozenset(members)))
        for m in members:
            unit_of[m] = uroot
    unit_deps = {}
    for uroot, members in units:
        udeps = set()
        for m in members:
            for d in deps[m]:
                if unit_of.get(d, uroot) != uroot:
                    udeps.add(unit_of[d])
        unit_deps[uroot] = frozenset(udeps)

    return Schedule(
        order=tuple(order),
        deps={n: frozenset(d) for n, d in deps.items()},
        egress_nodes=egress,
        egress_ancestors=egress_anc,
        units=tuple(units),
        unit_deps=unit_deps,
    )


def node_dependency_map(artifact: ScriptArtifact) -> dict:
    """Origin node -> egress origins it depends on, for prompt batching."""
    schedule = plan(artifact)
    return {n: set(schedule.egress_ancestors[n]) for n in schedule.order}


# ---------------------------------------------------------------------------
# predicate and glob evaluation


def atom_key(atom) -> str:
    """Canonical, node-independent identity of a predicate atom."""
    if isinstance(atom, (IsFile, IsDir, Exists)):
        return f"{type(atom).__name__}:{_path_expr_form_key(atom.path)}"
    if isinstance(atom, ExtEq):
        return f"ExtEq:{_path_expr_form_key(atom.path)}:{atom.ext}"
    if isinstance(atom, StrEq):
        return (
            f"StrEq:{_path_expr_form_key(atom.left)}"
            f":{_path_expr_form_key(atom.right)}"
        )
    raise TypeError(f"not a predicate atom: {atom!r}")


def eval_atom(atom, env: dict, guard) -> bool:
    if isinstance(atom, IsFile):
        return os.path.isfile(guard.full(guard.to_rel(eval_path(atom.path, env))))
    if isinstance(atom, IsDir):
        return os.path.isdir(guard.full(guard.to_rel(eval_path(atom.path, env))))
    if isinstance(atom, Exists):
        return os.path.exists(guard.full(guard.to_rel(eval_path(atom.path, env))))
    if isinstance(atom, ExtEq):
        name = posixpath.basename(eval_path(atom.path, env))
        stem, dot, ext = name.rpartition(".")
        return bool(dot) and bool(stem) and ext == atom.ext
    if isinstance(atom, StrEq):
        return eval_path(atom.left, env) == eval_path(atom.right, env)
    raise TypeError(f"not a predicate atom: {atom!r}")


def eval_pred(pred, env: dict, guard, on_atom=None) -> bool:
    """Short-circuit evaluation; `on_atom(atom, value)` sees raw atom hits."""
    if isinstance(pred, Not):
        return not eval_pred(pred.inner, env, guard, on_atom)
    if isinstance(pred, And):
        for part in pred.parts:
            if not eval_pred(part, env, guard, on_atom):
                return False
        return True
    value = eval_atom(pred, env, guard)
    if on_atom is not None:
        on_atom(pred, value)
    return value


def glob_values(guard, pattern: str) -> list:
    """Shell word expansion for a for-each glob, dotfiles excluded.

    An unmatched pattern (or a word with no glob characters) yields
    itself literally, matching sh defaults without nullglob.
    """
    if not any(c in pattern for c in "*?["):
        return [pattern]
    dirpart = posixpath.dirname(pattern)
    namepat = posixpath.basename(pattern)
    try:
        names = guard.listdir(dirpart or ".")
    except OSError:
        return [pattern]
    hits = [name for name in names if fnmatch_name(name, namepat)]
    if not hits:
        return [pattern]
    return sorted(f"{dirpart}/{name}" if dirpart else name for name in hits)


# ---------------------------------------------------------------------------
# the walk


class _Slot:
    """Aggregated status of one task node across its executions."""

    __slots__ = ("status", "exit_code", "reason", "out")

    def __init__(self):
        self.status = None
        self.exit_code = None
        self.reason = ""
        self.out = []


class _Walker:
    def __init__(self, artifact, guard, gate, schedule, config, isolation,
                 *, trace=None, opener=None):
        self.artifact = artifact
        self.graph = artifact.workflow
        self.guard = guard
        self.gate = gate
        self.schedule = schedule
        self.config = config
        self.isolation = isolation
        self.trace = trace if trace is not None else []
        self.opener = opener
        self.slots = {n: _Slot() for n in schedule.order}
        self.reads = {n: set() for n in schedule.order}
        self.pending = []  # EgressRequest, interception order
        self.bindings = {}  # request_id -> env snapshot
        self.deferred_envs = {}  # node_id -> [env snapshots]
        self.blocked = set()  # nodes deferred by egress ancestry
        self._lock = threading.Lock()
        # External spawns snapshot the whole tree; interleaving two scans
        # would let one absorb the other's creations, so serialize them.
        self._scan_lock = threading.Lock()

    # -- helpers -------------------------------------------------------------

    def _emit(self, event: dict) -> None:
        with self._lock:
            self.trace.append(event)

    def _is_egress(self, node) -> bool:
        task = self.artifact.task(node.task_id)
        return task.egress or task.command in self.config.egress_allowlist

    def resolve_var(self, node, var: str, env: dict, _depth=0) -> str:
        if _depth > 16:
            raise UsageError(f"variable ${var} resolution loops")
        for bound, expr in node.bindings:
            if bound == var:
                return eval_path(expr, env)
        if var in env:
            return env[var]
        for edge in self.graph.edges:
            if edge.kind == "data" and edge.dst == node.node_id \
                    and edge.dst_role == var:
                src = self.graph.node(edge.src)
                return self.resolve_var(src, edge.src_role, env, _depth + 1)
        raise UsageError(
            f"task node {node.node_id}: no value for variable ${var}"
        )

    def resolve_argv(self, node, env: dict) -> list:
        task = self.artifact.task(node.task_id)
        argv = []
        for seg in task.argv:
            if isinstance(seg, LitSeg):
                argv.append(seg.text)
            else:
                argv.append(self.resolve_var(node, seg.name, env))
        return argv

    def upstream_trouble(self, node_id) -> tuple | None:
        """(status, reason) this node inherits from its direct dependencies."""
        for dep in self.schedule.deps.get(node_id, ()):
            slot = self.slots[dep]
            if slot.status == STATUS_DENIED:
                return (STATUS_DENIED, REASON_DENIED_UP)
            if slot.status == STATUS_FAILED or (
                slot.status == STATUS_DEFERRED
                and slot.reason == REASON_UPSTREAM
            ):
                return (STATUS_DEFERRED, REASON_UPSTREAM)
        return None

    def _note_outcome(self, slot: _Slot, outcome: tasks.TaskOutcome) -> None:
        with self._lock:
            if outcome.stdout:
                slot.out.append(outcome.stdout)
            if outcome.exit_code == 0:
                if slot.status is None:
                    slot.status = STATUS_SUCCESS
            else:
                slot.status = STATUS_FAILED
                slot.exit_code = outcome.exit_code
                if outcome.stderr:
                    slot.out.append(outcome.stderr)

    def _task_env(self) -> dict:
        env = {}
        for key in self.config.env_passthrough:
            if key in os.environ:
                env[key] = os.environ[key]
        return env

    def _note_input_reads(self, node, env: dict, into: set) -> None:
        task = self.artifact.task(node.task_id)
        for var, role in task.io_roles:
            if role == ROLE_INPUT:
                try:
                    into.add(self.guard.to_rel(self.resolve_var(node, var, env)))
                except (UsageError, GuardError, ArtifactReferenceError):
                    pass

    def taint_paths(self, node, env: dict, descriptor: dict) -> set:
        """Files whose content could reach this call: ancestor reads + payload."""
        paths = set()
        anc_ids = set()
        frontier = [node.node_id]
        while frontier:
            cur = frontier.pop()
            for edge in self.graph.edges:
                if edge.kind == "data" and edge.dst == cur \
                        and edge.src not in anc_ids:
                    anc_ids.add(edge.src)
                    frontier.append(edge.src)
        for anc in anc_ids:
            paths |= self.reads.get(anc, set())
        self._note_input_reads(node, env, paths)
        for ref in descriptor.get("payload_refs", ()):
            try:
                paths.add(self.guard.to_rel(ref))
            except GuardError:
                pass
        return paths

    # -- node execution ------------------------------------------------------

    def exec_task_node(self, node, env: dict) -> None:
        node_id = node.node_id
        slot = self.slots[node_id]
        trouble = self.upstream_trouble(node_id)
        if trouble:
            with self._lock:
                slot.status, slot.reason = trouble
            return
        if self._is_egress(node):
            self._intercept(node, env)
            return
        if node_id in self.blocked:
            with self._lock:
                slot.status = STATUS_DEFERRED
                slot.reason = REASON_BLOCKED
                self.deferred_envs.setdefault(node_id, []).append(dict(env))
            return
        self.execute(node, env)

    def execute(self, node, env: dict) -> None:
        slot = self.slots[node.node_id]
        task = self.artifact.task(node.task_id)
        try:
            argv = self.resolve_argv(node, env)
        except (UsageError, ArtifactReferenceError) as exc:
            self._note_outcome(slot, tasks.TaskOutcome(2, "", str(exc)))
            return
        if task.opaque:
            with self._scan_lock:
                outcome = tasks.run_external(
                    self.guard, [], self.isolation,
                    env=self._task_env(), shell_script=task.script,
                )
        elif tasks.is_builtin(task.command):
            try:
                outcome = tasks.run_builtin(self.guard, task.command, argv)
            except GuardError as exc:
                outcome = tasks.TaskOutcome(1, "", f"{task.command}: {exc}\n")
        else:
            with self._scan_lock:
                outcome = tasks.run_external(
                    self.guard, [task.command] + argv, self.isolation,
                    env=self._task_env(),
                )
        with self._lock:
            self.reads[node.node_id].update(outcome.reads)
        self._note_input_reads(node, env, self.reads[node.node_id])
        self._note_outcome(slot, outcome)
        self._emit({
            "event": "task",
            "node": node.node_id,
            "command": task.command,
            "argv": argv,
            "exit": outcome.exit_code,
        })

    def _intercept(self, node, env: dict) -> None:
        slot = self.slots[node.node_id]
        task = self.artifact.task(node.task_id)
        try:
            argv = self.resolve_argv(node, env)
        except (UsageError, ArtifactReferenceError) as exc:
            self._note_outcome(slot, tasks.TaskOutcome(2, "", str(exc)))
            return
        descriptor = tasks.build_descriptor(task.command, argv)
        taint = self.taint_paths(node, env, descriptor)
        try:
            with self._lock:
                req = self.gate.intercept(
                    node.node_id, task.command, descriptor, taint
                )
                self.pending.append(req)
                self.bindings[req.request_id] = dict(env)
                slot.status = STATUS_DEFERRED
                slot.reason = REASON_PENDING
        except EgressDenied as exc:
            with self._lock:
                slot.status = STATUS_DENIED
                slot.reason = str(exc)
            return
        self._emit({
            "event": "egress",
            "node": node.node_id,
            "request_id": req.request_id,
        })

    # -- structural interpretation -------------------------------------------

    def walk(self, node_id: str, env: dict) -> None:
        node = self.graph.node(node_id)
        if isinstance(node, TaskNode):
            self.exec_task_node(node, env)
        elif isinstance(node, SeqNode):
            for child in node.children:
                self.walk(child, env)
        elif isinstance(node, ForEachNode):
            for value in glob_values(self.guard, node.glob):
                self._emit({
                    "event": "iter",
                    "node": node_id,
                    "var": node.var,
                    "value": value,
                })
                child_env = dict(env)
                child_env[node.var] = value
                self.walk(node.body, child_env)
        elif isinstance(node, IfNode):
            atoms = []

            def on_atom(atom, value):
                atoms.append((atom_key(atom), value))

            outcome = eval_pred(node.pred, env, self.guard, on_atom)
            self._emit({
                "event": "branch",
                "node": node_id,
                "outcome": outcome,
                "atoms": atoms,
                "env": dict(env),
            })
            target = node.then if outcome else node.els
            if target is not None:
                self.walk(target, env)
        else:
            raise TypeError(f"unknown node type {node!r}")

    def run_units(self) -> None:
        unit_roots = [u for u, _ in self.schedule.units]
        udeps = {u: set(self.schedule.unit_deps[u]) for u in unit_roots}
        done = set()
        while len(done) < len(unit_roots):
            layer = [
                u for u in unit_roots if u not in done and udeps[u] <= done
            ]
            if not layer:  # defensive; unit dependencies are acyclic
                layer = [u for u in unit_roots if u not in done]
            if self.config.serial or len(layer) == 1:
                for u in layer:
                    self.walk(u, {})
            else:
                with ThreadPoolExecutor(self.config.max_workers) as pool:
                    for f in [pool.submit(self.walk, u, {}) for u in layer]:
                        f.result()
            done.update(layer)

    def results(self) -> tuple:
        out = []
        for node_id in self.schedule.order:
            slot = self.slots[node_id]
            status = slot.status or STATUS_SUCCESS
            reason = slot.reason if slot.status else "not reached"
            detail = "".join(slot.out)[-2000:]
            out.append(NodeResult(
                node_id=node_id,
                status=status,
                exit_code=slot.exit_code,
                reason=reason,
                detail=detail,
            ))
        return tuple(out)


# ---------------------------------------------------------------------------
# entry points


def _finish_epoch(store, guard, epoch_id, execution: dict) -> None:
    guard.unmount()
    guard.seal()
    meta = store.read_meta(epoch_id)
    meta["execution"] = execution
    store.write_meta(epoch_id, meta)


def run(store, artifact: ScriptArtifact, config: SandboxConfig, *,
        gate: Gate | None = None, trace=None, opener=None) -> ExecutionReport:
    """Execute an artifact: exactly one sealed epoch, egress held pending."""
    started = time.monotonic()
    schedule = plan(artifact)
    gate = gate or Gate(store, config.egress_allowlist)
    isolation = namespaces.plan_isolation(
        config.network, config.pid, config.user
    )
    meta = begin_epoch(
        store,
        description=artifact.nl_prompt or artifact.artifact_id,
        artifact_ref=artifact.artifact_id,
        guard_root=config.guard_root,
    )
    epoch_id = meta["epoch_id"]
    try:
        guard = GuardHandle(store, config.guard_root, epoch_id)
    except GuardError:
        # Fail closed: nothing ran, so seal the empty epoch and abort it.
        seal_epoch(store, epoch_id, config.guard_root)
        abort(store, epoch_id)
        raise
    walker = _Walker(
        artifact, guard, gate, schedule, config, isolation,
        trace=trace, opener=opener,
    )
    walker.blocked = {
        n for n in schedule.order if schedule.egress_ancestors[n]
    }
    try:
        walker.run_units()
    finally:
        _finish_epoch(store, guard, epoch_id, {
            "nodes": {r.node_id: r.to_json_obj() for r in walker.results()},
            "pending_egress": [r.request_id for r in walker.pending],
            "deferred_envs": walker.deferred_envs,
            "bindings": walker.bindings,
            "continued_from": None,
        })
    if config.stash_max_bytes:
        enforce_stash_budget(store, config.stash_max_bytes)
    wall = 0.0 if test_mode() else time.monotonic() - started
    return ExecutionReport(
        epoch_id=epoch_id,
        nodes=walker.results(),
        pending_egress=tuple(r.request_id for r in walker.pending),
        wall_time=wall,
        degraded=isolation.degraded,
    )


def resume(store, artifact: ScriptArtifact, config: SandboxConfig,
           prior_epoch_id: int, *, gate: Gate | None = None, trace=None,
           opener=None) -> ExecutionReport:
    """Run what a prior epoch deferred, honoring the decisions made since.

    Approved requests execute at their origin; fully denied origins (and
    everything downstream of them) report `denied`; origins with some
    request still undecided stay deferred and are carried into the
    continuation epoch, so chained egress resolves over several rounds.
    """
    started = time.monotonic()
    schedule = plan(artifact)
    gate = gate or Gate(store, config.egress_allowlist)
    prior = store.read_meta(prior_epoch_id)
    execution = prior.get("execution") or {}
    pending_ids = list(execution.get("pending_egress", ()))
    if not pending_ids:
        raise UsageError(f"epoch {prior_epoch_id} has no pending egress")
    if all(gate.decision(rid) is None for rid in pending_ids):
        raise EgressError(
            "every pending request is still undecided; resolve a batch first"
        )
    requests = {rid: gate.request(rid) for rid in pending_ids}
    by_node: dict = {}
    for rid in pending_ids:
        by_node.setdefault(requests[rid].origin_node, []).append(rid)
    fully_denied = {
        node for node, rids in by_node.items()
        if all(gate.decision(r) is not None for r in rids)
        and all(gate.decision(r) != APPROVE for r in rids)
    }
    unresolved = {
        node for node, rids in by_node.items()
        if any(gate.decision(r) is None for r in rids)
    }
    denied_closure = schedule.closure(fully_denied) if fully_denied else frozenset()
    still_blocked = schedule.closure(unresolved) if unresolved else frozenset()

    prior_nodes = execution.get("nodes", {})
    deferred = {
        nid for nid, rec in prior_nodes.items()
        if rec.get("status") == STATUS_DEFERRED
    }
    deferred_envs = execution.get("deferred_envs", {})
    bindings = execution.get("bindings", {})

    isolation = namespaces.plan_isolation(
        config.network, config.pid, config.user
    )
    meta = begin_epoch(
        store,
        description=f"continuation of epoch {prior_epoch_id}",
        artifact_ref=artifact.artifact_id,
        guard_root=config.guard_root,
    )
    epoch_id = meta["epoch_id"]
    try:
        guard = GuardHandle(store, config.guard_root, epoch_id)
    except GuardError:
        seal_epoch(store, epoch_id, config.guard_root)
        abort(store, epoch_id)
        raise
    walker = _Walker(
        artifact, guard, gate, schedule, config, isolation,
        trace=trace, opener=opener,
    )
    try:
        for node_id in schedule.order:
            if node_id not in deferred:
                continue
            slot = walker.slots[node_id]
            if prior_nodes[node_id].get("reason") == REASON_UPSTREAM:
                slot.status, slot.reason = STATUS_DEFERRED, REASON_UPSTREAM
                continue
            if node_id in denied_closure:
                slot.status = STATUS_DENIED
                slot.reason = (
                    "egress denied" if node_id in fully_denied
                    else REASON_DENIED_UP
                )
                continue
            trouble = walker.upstream_trouble(node_id)
            if trouble:
                slot.status, slot.reason = trouble
                continue
            node = walker.graph.node(node_id)
            if node_id in by_node:
                for rid in by_node[node_id]:
                    if gate.decision(rid) != APPROVE:
                        continue
                    outcome = tasks.egress_execute(
                        guard, requests[rid].descriptor, opener=opener,
                    )
                    gate.mark_executed(rid, outcome.exit_code == 0)
                    walker._note_outcome(slot, outcome)
                    walker._emit({
                        "event": "egress-executed",
                        "node": node_id,
                        "request_id": rid,
                        "exit": outcome.exit_code,
                    })
                if node_id in unresolved:
                    slot.status, slot.reason = STATUS_DEFERRED, REASON_PENDING
                continue
            if node_id in still_blocked:
                slot.status, slot.reason = STATUS_DEFERRED, REASON_BLOCKED
                walker.deferred_envs[node_id] = list(
                    deferred_envs.get(node_id, ())
                )
                continue
            for env in deferred_envs.get(node_id) or [{}]:
                walker.execute(node, dict(env))
    finally:
        carried = [rid for rid in pending_ids if gate.decision(rid) is None]
        _finish_epoch(store, guard, epoch_id, {
            "nodes": {
                r.node_id: r.to_json_obj()
                for r in walker.results()
                if r.node_id in deferred
            },
            "pending_egress": carried,
            "deferred_envs": walker.deferred_envs,
            "bindings": bindings,
            "continued_from": prior_epoch_id,
        })
    wall = 0.0 if test_mode() else time.monotonic() - started
    return ExecutionReport(
        epoch_id=epoch_id,
        nodes=tuple(r for r in walker.results() if r.node_id in deferred),
        pending_egress=tuple(carried),
        wall_time=wall,
        degraded=isolation.degraded,
        continued_from=prior_epoch_id,
    )
