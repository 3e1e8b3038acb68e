"""Script artifact model: an analyzable workflow composition over adapter tasks.

The composition language is deliberately closed: four node kinds (task
invocation, sequence, for-each over a glob, if over a predicate), a small
predicate algebra (file tests, extension/string equality, negation,
conjunction), and path expressions built from loop variables, literals,
basename/dirname/strip-ext and concatenation.  Adapter tasks are the only
black boxes.  Anything a backend produces outside this grammar is wrapped
as a single opaque task with a warning flag instead of being rejected.

Artifacts serialize to a deterministic UTF-8 text format (header block,
workflow section, tasks section); `artifact_id` is the sha256 of the
canonical serialization with the volatile `id`/`created` header lines
excluded, so re-serializing and re-hashing is a no-op.
"""

from __future__ import annotations

import posixpath
from dataclasses import dataclass, field, replace

from . import sexpr
from .errors import (
    ArtifactCycleError,
    ArtifactIntegrityError,
    ArtifactReferenceError,
    ArtifactSyntaxError,
)
from .sexpr import Symbol
from .util import sha256_bytes

FORMAT_MARKER = "#%nash-artifact 1"

# Commands that may perform external API calls; egress=true is only legal
# for these (the egress gate enforces the policy at run time).
DEFAULT_EGRESS_ALLOWLIST = ("curl", "wget")

ROLE_INPUT = "input-file"
ROLE_OUTPUT = "output-file"
ROLE_OTHER = "other"
ROLES = (ROLE_INPUT, ROLE_OUTPUT, ROLE_OTHER)


# ---------------------------------------------------------------------------
# path expressions


@dataclass(frozen=True)
class PVar:
    name: str


@dataclass(frozen=True)
class PLit:
    text: str


@dataclass(frozen=True)
class PBase:
    inner: "PathExpr"


@dataclass(frozen=True)
class PDir:
    inner: "PathExpr"


@dataclass(frozen=True)
class PStripExt:
    inner: "PathExpr"


@dataclass(frozen=True)
class PConcat:
    parts: tuple


PathExpr = object  # union of the five classes above


def eval_path(expr, env: dict) -> str:
    """Evaluate a path expression under variable bindings `env`."""
    if isinstance(expr, PVar):
        try:
            return env[expr.name]
        except KeyError:
            raise ArtifactReferenceError(f"unbound variable ${expr.name}") from None
    if isinstance(expr, PLit):
        return expr.text
    if isinstance(expr, PBase):
        return posixpath.basename(eval_path(expr.inner, env))
    if isinstance(expr, PDir):
        return posixpath.dirname(eval_path(expr.inner, env))
    if isinstance(expr, PStripExt):
        value = eval_path(expr.inner, env)
        stem, dot, _ = value.rpartition(".")
        return stem if dot else value
    if isinstance(expr, PConcat):
        return "".join(eval_path(p, env) for p in expr.parts)
    raise TypeError(f"not a path expression: {expr!r}")


def path_expr_vars(expr) -> set:
    if isinstance(expr, PVar):
        return {expr.name}
    if isinstance(expr, PLit):
        return set()
    if isinstance(expr, (PBase, PDir, PStripExt)):
        return path_expr_vars(expr.inner)
    if isinstance(expr, PConcat):
        out = set()
        for p in expr.parts:
            out |= path_expr_vars(p)
        return out
    raise TypeError(f"not a path expression: {expr!r}")


# ---------------------------------------------------------------------------
# predicates


@dataclass(frozen=True)
class IsFile:
    path: PathExpr


@dataclass(frozen=True)
class IsDir:
    path: PathExpr


@dataclass(frozen=True)
class Exists:
    path: PathExpr


@dataclass(frozen=True)
class ExtEq:
    path: PathExpr
    ext: str


@dataclass(frozen=True)
class StrEq:
    left: PathExpr
    right: PathExpr


@dataclass(frozen=True)
class Not:
    inner: "Predicate"


@dataclass(frozen=True)
class And:
    parts: tuple


Predicate = object
ATOM_TYPES = (IsFile, IsDir, Exists, ExtEq, StrEq)


def negate(pred):
    """Negation with double-negation elimination (keeps round-trips stable)."""
    if isinstance(pred, Not):
        return pred.inner
    return Not(pred)


def pred_vars(pred) -> set:
    if isinstance(pred, (IsFile, IsDir, Exists)):
        return path_expr_vars(pred.path)
    if isinstance(pred, ExtEq):
        return path_expr_vars(pred.path)
    if isinstance(pred, StrEq):
        return path_expr_vars(pred.left) | path_expr_vars(pred.right)
    if isinstance(pred, Not):
        return pred_vars(pred.inner)
    if isinstance(pred, And):
        out = set()
        for p in pred.parts:
            out |= pred_vars(p)
        return out
    raise TypeError(f"not a predicate: {pred!r}")


# ---------------------------------------------------------------------------
# workflow nodes


@dataclass(frozen=True)
class TaskNode:
    node_id: str
    task_id: str
    bindings: tuple = ()  # ordered (var, PathExpr) pairs


@dataclass(frozen=True)
class SeqNode:
    node_id: str
    children: tuple = ()


@dataclass(frozen=True)
class ForEachNode:
    node_id: str
    glob: str
    var: str
    body: str  # child node id


@dataclass(frozen=True)
class IfNode:
    node_id: str
    pred: Predicate
    then: str | None
    els: str | None


@dataclass(frozen=True)
class Edge:
    kind: str  # "data" | "control"
    src: str
    src_role: str | None
    dst: str
    dst_role: str | None


@dataclass(frozen=True)
class WorkflowGraph:
    root: str
    nodes: tuple = ()  # WorkflowNode, canonical order
    edges: tuple = ()

    def node(self, node_id: str):
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise ArtifactReferenceError(f"undefined node {node_id!r}")

    def node_map(self) -> dict:
        return {n.node_id: n for n in self.nodes}

    def structural_children(self, node) -> tuple:
        if isinstance(node, SeqNode):
            return node.children
        if isinstance(node, ForEachNode):
            return (node.body,)
        if isinstance(node, IfNode):
            return tuple(c for c in (node.then, node.els) if c is not None)
        return ()


@dataclass(frozen=True)
class AdapterTask:
    task_id: str
    command: str
    argv: tuple = ()  # LitSeg/VarSeg segments
    io_roles: tuple = ()  # ordered (var, role) pairs
    egress: bool = False
    task_prompt: str = ""
    opaque: bool = False
    script: str | None = None  # raw text for opaque tasks

    def role_of(self, var: str) -> str | None:
        for v, r in self.io_roles:
            if v == var:
                return r
        return None


@dataclass(frozen=True)
class LitSeg:
    text: str


@dataclass(frozen=True)
class VarSeg:
    name: str


@dataclass(frozen=True)
class ScriptArtifact:
    artifact_id: str
    nl_prompt: str
    workflow: WorkflowGraph
    tasks: tuple = ()
    backend_id: str = ""
    created_at: str = ""
    parent_artifact: str | None = None

    def task(self, task_id: str) -> AdapterTask:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise ArtifactReferenceError(f"undefined task {task_id!r}")

    def task_map(self) -> dict:
        return {t.task_id: t for t in self.tasks}

    @property
    def has_warnings(self) -> bool:
        return any(t.opaque for t in self.tasks)


# ---------------------------------------------------------------------------
# canonical serialization


def _id_sort_key(ident: str):
    return (len(ident), ident)


def _path_expr_form(expr):
    if isinstance(expr, PVar):
        return [Symbol("var"), Symbol(expr.name)]
    if isinstance(expr, PLit):
        return expr.text
    if isinstance(expr, PBase):
        return [Symbol("basename"), _path_expr_form(expr.inner)]
    if isinstance(expr, PDir):
        return [Symbol("dirname"), _path_expr_form(expr.inner)]
    if isinstance(expr, PStripExt):
        return [Symbol("strip-ext"), _path_expr_form(expr.inner)]
    if isinstance(expr, PConcat):
        return [Symbol("concat")] + [_path_expr_form(p) for p in expr.parts]
    raise TypeError(f"not a path expression: {expr!r}")


def _pred_form(pred):
    if isinstance(pred, IsFile):
        return [Symbol("is-file"), _path_expr_form(pred.path)]
    if isinstance(pred, IsDir):
        return [Symbol("is-dir"), _path_expr_form(pred.path)]
    if isinstance(pred, Exists):
        return [Symbol("exists"), _path_expr_form(pred.path)]
    if isinstance(pred, ExtEq):
        return [Symbol("ext-eq"), _path_expr_form(pred.path), pred.ext]
    if isinstance(pred, StrEq):
        return [Symbol("str-eq"), _path_expr_form(pred.left), _path_expr_form(pred.right)]
    if isinstance(pred, Not):
        return [Symbol("not"), _pred_form(pred.inner)]
    if isinstance(pred, And):
        return [Symbol("and")] + [_pred_form(p) for p in pred.parts]
    raise TypeError(f"not a predicate: {pred!r}")


def _node_form(node):
    if isinstance(node, TaskNode):
        inner = [Symbol("task"), Symbol(node.task_id)]
        for var, expr in node.bindings:
            inner.append([Symbol("bind"), Symbol(var), _path_expr_form(expr)])
        return inner
    if isinstance(node, SeqNode):
        return [Symbol("seq")] + [Symbol(c) for c in node.children]
    if isinstance(node, ForEachNode):
        return [Symbol("foreach"), node.glob, Symbol(node.var), Symbol(node.body)]
    if isinstance(node, IfNode):
        return [
            Symbol("if"),
            _pred_form(node.pred),
            Symbol(node.then) if node.then else Symbol("-"),
            Symbol(node.els) if node.els else Symbol("-"),
        ]
    raise TypeError(f"not a workflow node: {node!r}")


def _task_form(task):
    form = [Symbol("task"), Symbol(task.task_id), [Symbol("command"), task.command]]
    argv = [Symbol("argv")]
    for seg in task.argv:
        if isinstance(seg, LitSeg):
            argv.append([Symbol("lit"), seg.text])
        else:
            argv.append([Symbol("var"), Symbol(seg.name)])
    form.append(argv)
    roles = [Symbol("roles")]
    for var, role in sorted(task.io_roles):
        roles.append([Symbol(var), Symbol(role)])
    form.append(roles)
    form.append([Symbol("egress"), Symbol("true" if task.egress else "false")])
    form.append([Symbol("prompt"), task.task_prompt])
    if task.opaque:
        form.append([Symbol("opaque"), Symbol("true")])
        form.append([Symbol("script"), task.script or ""])
    return form


def _header_lines(artifact: ScriptArtifact, artifact_id: str):
    import json as _json

    return [
        FORMAT_MARKER,
        f"#%id: {artifact_id}",
        f"#%prompt: {_json.dumps(artifact.nl_prompt, ensure_ascii=True)}",
        f"#%backend: {artifact.backend_id or '-'}",
        f"#%created: {artifact.created_at or '-'}",
        f"#%parent: {artifact.parent_artifact or '-'}",
    ]


def _body_lines(artifact: ScriptArtifact):
    lines = ["", "workflow", f"(root {artifact.workflow.root})"]
    for node in sorted(artifact.workflow.nodes, key=lambda n: _id_sort_key(n.node_id)):
        lines.append(sexpr.dumps([Symbol("node"), Symbol(node.node_id), _node_form(node)]))
    for edge in sorted(
        artifact.workflow.edges,
        key=lambda e: (e.kind, e.src, e.src_role or "", e.dst, e.dst_role or ""),
    ):
        form = [Symbol("edge"), Symbol(edge.kind), Symbol(edge.src)]
        form.append(Symbol(edge.src_role) if edge.src_role else Symbol("-"))
        form.append(Symbol(edge.dst))
        form.append(Symbol(edge.dst_role) if edge.dst_role else Symbol("-"))
        lines.append(sexpr.dumps(form))
    lines.append("")
    lines.append("tasks")
    for task in sorted(artifact.tasks, key=lambda t: _id_sort_key(t.task_id)):
        lines.append(sexpr.dumps(_task_form(task)))
    lines.append("")
    return lines


def compute_artifact_id(artifact: ScriptArtifact) -> str:
    """Hash of the canonical text minus the volatile id/created lines."""
    head = [
        ln
        for ln in _header_lines(artifact, "")
        if not ln.startswith("#%id:") and not ln.startswith("#%created:")
    ]
    text = "\n".join(head + _body_lines(artifact))
    return sha256_bytes(text.encode("utf-8"))


def serialize(artifact: ScriptArtifact) -> str:
    artifact_id = artifact.artifact_id or compute_artifact_id(artifact)
    return "\n".join(_header_lines(artifact, artifact_id) + _body_lines(artifact))


def finalize(artifact: ScriptArtifact) -> ScriptArtifact:
    """Validate and fill in the canonical artifact id."""
    validate(artifact)
    return replace(artifact, artifact_id=compute_artifact_id(artifact))


# ---------------------------------------------------------------------------
# parsing


def _want(form, n, what, line):
    if not isinstance(form, list) or len(form) != n:
        raise ArtifactSyntaxError(f"malformed {what}: {sexpr.dumps(form) if isinstance(form, (list, str)) else form!r}", line)


def _parse_path_expr(form, line):
    if isinstance(form, Symbol):
        raise ArtifactSyntaxError(f"bare symbol {form!r} is not a path expression", line)
    if isinstance(form, str):
        return PLit(form)
    if not isinstance(form, list) or not form or not isinstance(form[0], Symbol):
        raise ArtifactSyntaxError("malformed path expression", line)
    head = str(form[0])
    if head == "var":
        _want(form, 2, "var", line)
        return PVar(str(form[1]))
    if head == "basename":
        _want(form, 2, "basename", line)
        return PBase(_parse_path_expr(form[1], line))
    if head == "dirname":
        _want(form, 2, "dirname", line)
        return PDir(_parse_path_expr(form[1], line))
    if head == "strip-ext":
        _want(form, 2, "strip-ext", line)
        return PStripExt(_parse_path_expr(form[1], line))
    if head == "concat":
        if len(form) < 2:
            raise ArtifactSyntaxError("empty concat", line)
        return PConcat(tuple(_parse_path_expr(p, line) for p in form[1:]))
    raise ArtifactSyntaxError(f"unknown path function {head!r}", line)


def _parse_pred(form, line):
    if not isinstance(form, list) or not form or not isinstance(form[0], Symbol):
        raise ArtifactSyntaxError("malformed predicate", line)
    head = str(form[0])
    if head == "is-file":
        _want(form, 2, "is-file", line)
        return IsFile(_parse_path_expr(form[1], line))
    if head == "is-dir":
        _want(form, 2, "is-dir", line)
        return IsDir(_parse_path_expr(form[1], line))
    if head == "exists":
        _want(form, 2, "exists", line)
        return Exists(_parse_path_expr(form[1], line))
    if head == "ext-eq":
        _want(form, 3, "ext-eq", line)
        if not isinstance(form[2], str) or isinstance(form[2], Symbol):
            raise ArtifactSyntaxError("ext-eq needs a literal extension", line)
        return ExtEq(_parse_path_expr(form[1], line), form[2])
    if head == "str-eq":
        _want(form, 3, "str-eq", line)
        return StrEq(_parse_path_expr(form[1], line), _parse_path_expr(form[2], line))
    if head == "not":
        _want(form, 2, "not", line)
        return negate(_parse_pred(form[1], line))
    if head == "and":
        if len(form) < 3:
            raise ArtifactSyntaxError("and needs at least two parts", line)
        return And(tuple(_parse_pred(p, line) for p in form[1:]))
    raise ArtifactSyntaxError(f"unknown predicate {head!r}", line)


def _opt_ref(sym, line):
    if not isinstance(sym, Symbol):
        raise ArtifactSyntaxError("expected a node reference", line)
    return None if str(sym) == "-" else str(sym)


def _parse_node(node_id, form, line):
    if not isinstance(form, list) or not form or not isinstance(form[0], Symbol):
        raise ArtifactSyntaxError("malformed node body", line)
    head = str(form[0])
    if head == "task":
        if len(form) < 2 or not isinstance(form[1], Symbol):
            raise ArtifactSyntaxError("task node needs a task id", line)
        bindings = []
        for b in form[2:]:
            if not (isinstance(b, list) and len(b) == 3 and str(b[0]) == "bind"):
                raise ArtifactSyntaxError("malformed bind", line)
            bindings.append((str(b[1]), _parse_path_expr(b[2], line)))
        return TaskNode(node_id, str(form[1]), tuple(bindings))
    if head == "seq":
        children = []
        for c in form[1:]:
            if not isinstance(c, Symbol):
                raise ArtifactSyntaxError("seq children must be node ids", line)
            children.append(str(c))
        return SeqNode(node_id, tuple(children))
    if head == "foreach":
        _want(form, 4, "foreach", line)
        if not isinstance(form[1], str) or isinstance(form[1], Symbol):
            raise ArtifactSyntaxError("foreach needs a glob string", line)
        return ForEachNode(node_id, form[1], str(form[2]), str(form[3]))
    if head == "if":
        _want(form, 4, "if", line)
        return IfNode(
            node_id,
            _parse_pred(form[1], line),
            _opt_ref(form[2], line),
            _opt_ref(form[3], line),
        )
    raise ArtifactSyntaxError(f"unknown node kind {head!r}", line)


def _plist(form):
    """Property list: [(key, values...)] from a task form's tail."""
    out = {}
    for item in form:
        if not isinstance(item, list) or not item or not isinstance(item[0], Symbol):
            raise ArtifactSyntaxError(f"malformed task property: {item!r}")
        out[str(item[0])] = item[1:]
    return out


def _parse_task(form, line):
    if len(form) < 2 or not isinstance(form[1], Symbol):
        raise ArtifactSyntaxError("task needs an id", line)
    task_id = str(form[1])
    props = _plist(form[2:])
    if "command" not in props or len(props["command"]) != 1:
        raise ArtifactSyntaxError(f"task {task_id}: missing command", line)
    command = props["command"][0]
    argv = []
    for seg in props.get("argv", []):
        if not isinstance(seg, list) or len(seg) != 2:
            raise ArtifactSyntaxError(f"task {task_id}: malformed argv segment", line)
        if str(seg[0]) == "lit":
            argv.append(LitSeg(seg[1]))
        elif str(seg[0]) == "var":
            argv.append(VarSeg(str(seg[1])))
        else:
            raise ArtifactSyntaxError(f"task {task_id}: unknown segment {seg[0]!r}", line)
    roles = []
    for r in props.get("roles", []):
        if not isinstance(r, list) or len(r) != 2 or str(r[1]) not in ROLES:
            raise ArtifactSyntaxError(f"task {task_id}: malformed role", line)
        roles.append((str(r[0]), str(r[1])))
    egress = props.get("egress", [Symbol("false")])[0]
    opaque = "opaque" in props and str(props["opaque"][0]) == "true"
    script = props.get("script", [None])[0] if opaque else None
    prompt = props.get("prompt", [""])[0]
    return AdapterTask(
        task_id=task_id,
        command=str(command),
        argv=tuple(argv),
        io_roles=tuple(sorted(roles)),
        egress=str(egress) == "true",
        task_prompt=str(prompt),
        opaque=opaque,
        script=script,
    )


def parse_artifact(source: str) -> ScriptArtifact:
    """Parse canonical artifact text; validates and recomputes the id."""
    lines = source.split("\n")
    if not lines or lines[0].strip() != FORMAT_MARKER:
        raise ArtifactSyntaxError("missing artifact format marker", 1)
    header = {}
    idx = 1
    while idx < len(lines) and lines[idx].startswith("#%"):
        ln = lines[idx]
        key, sep, value = ln[2:].partition(":")
        if not sep:
            raise ArtifactSyntaxError(f"malformed header line {ln!r}", idx + 1)
        header[key.strip()] = value.strip()
        idx += 1

    import json as _json

    prompt_raw = header.get("prompt", '""')
    try:
        nl_prompt = _json.loads(prompt_raw)
    except ValueError:
        raise ArtifactSyntaxError("malformed prompt header", 2) from None

    # split body into workflow/tasks sections
    section = None
    section_text = {"workflow": [], "tasks": []}
    section_start = {"workflow": 0, "tasks": 0}
    for off, ln in enumerate(lines[idx:], start=idx):
        stripped = ln.strip()
        if stripped in ("workflow", "tasks"):
            section = stripped
            section_start[section] = off + 2
            continue
        if section:
            section_text[section].append(ln)
    if not section_text["workflow"]:
        raise ArtifactSyntaxError("missing workflow section", idx + 1)

    root = None
    nodes = []
    edges = []
    forms = sexpr.read_all(
        "\n".join(section_text["workflow"]), start_line=section_start["workflow"]
    )
    for form, line in forms:
        if not form or not isinstance(form[0], Symbol):
            raise ArtifactSyntaxError("malformed workflow form", line)
        head = str(form[0])
        if head == "root":
            _want(form, 2, "root", line)
            root = str(form[1])
        elif head == "node":
            if len(form) != 3 or not isinstance(form[1], Symbol):
                raise ArtifactSyntaxError("malformed node form", line)
            nodes.append(_parse_node(str(form[1]), form[2], line))
        elif head == "edge":
            _want(form, 6, "edge", line)
            kind = str(form[1])
            if kind not in ("data", "control"):
                raise ArtifactSyntaxError(f"unknown edge kind {kind!r}", line)
            edges.append(
                Edge(
                    kind,
                    str(form[2]),
                    _opt_ref(form[3], line),
                    str(form[4]),
                    _opt_ref(form[5], line),
                )
            )
        else:
            raise ArtifactSyntaxError(f"unknown workflow form {head!r}", line)
    if root is None:
        raise ArtifactSyntaxError("workflow has no root", section_start["workflow"])

    tasks = []
    for form, line in sexpr.read_all(
        "\n".join(section_text["tasks"]), start_line=section_start["tasks"]
    ):
        if not form or str(form[0]) != "task":
            raise ArtifactSyntaxError("tasks section admits only (task ...) forms", line)
        tasks.append(_parse_task(form, line))

    artifact = ScriptArtifact(
        artifact_id="",
        nl_prompt=nl_prompt,
        workflow=WorkflowGraph(root=root, nodes=tuple(nodes), edges=tuple(edges)),
        tasks=tuple(tasks),
        backend_id="" if header.get("backend", "-") == "-" else header["backend"],
        created_at="" if header.get("created", "-") == "-" else header["created"],
        parent_artifact=None if header.get("parent", "-") == "-" else header["parent"],
    )
    validate(artifact)
    computed = compute_artifact_id(artifact)
    stated = header.get("id", "-")
    if stated not in ("-", "", computed):
        raise ArtifactIntegrityError(
            f"stated id {stated[:12]}... does not match content hash {computed[:12]}..."
        )
    return replace(artifact, artifact_id=computed)


# ---------------------------------------------------------------------------
# validation


def validate(artifact: ScriptArtifact) -> None:
    wf = artifact.workflow
    node_map = {}
    for node in wf.nodes:
        if node.node_id in node_map:
            raise ArtifactReferenceError(f"duplicate node id {node.node_id!r}")
        node_map[node.node_id] = node
    task_map = {}
    for task in artifact.tasks:
        if task.task_id in task_map:
            raise ArtifactReferenceError(f"duplicate task id {task.task_id!r}")
        task_map[task.task_id] = task

    if wf.root not in node_map:
        raise ArtifactReferenceError(f"root names undefined node {wf.root!r}")

    # structural references exist; task references exist
    for node in wf.nodes:
        for child in wf.structural_children(node):
            if child not in node_map:
                raise ArtifactReferenceError(
                    f"node {node.node_id} references undefined node {child!r}"
                )
        if isinstance(node, TaskNode) and node.task_id not in task_map:
            raise ArtifactReferenceError(
                f"node {node.node_id} references undefined task {node.task_id!r}"
            )

    # acyclic structure, reachability
    state = {}  # node_id -> 1 visiting, 2 done

    def visit(node_id, trail):
        mark = state.get(node_id)
        if mark == 1:
            cycle = " -> ".join(trail + [node_id])
            raise ArtifactCycleError(f"workflow structure cycles: {cycle}")
        if mark == 2:
            return
        state[node_id] = 1
        for child in wf.structural_children(node_map[node_id]):
            visit(child, trail + [node_id])
        state[node_id] = 2

    visit(wf.root, [])
    unreachable = set(node_map) - set(state)
    if unreachable:
        names = ", ".join(sorted(unreachable))
        raise ArtifactReferenceError(f"nodes unreachable from root: {names}")

    # no orphan tasks
    referenced = {n.task_id for n in wf.nodes if isinstance(n, TaskNode)}
    orphans = set(task_map) - referenced
    if orphans:
        raise ArtifactReferenceError(f"orphan tasks: {', '.join(sorted(orphans))}")

    # edges: endpoints exist; data edges match declared roles on task nodes
    for edge in wf.edges:
        for end in (edge.src, edge.dst):
            if end not in node_map:
                raise ArtifactReferenceError(f"edge endpoint {end!r} undefined")
        if edge.kind == "data":
            src, dst = node_map[edge.src], node_map[edge.dst]
            if not isinstance(src, TaskNode) or not isinstance(dst, TaskNode):
                raise ArtifactReferenceError(
                    f"data edge {edge.src}->{edge.dst} must join task nodes"
                )
            src_role = task_map[src.task_id].role_of(edge.src_role or "")
            dst_role = task_map[dst.task_id].role_of(edge.dst_role or "")
            if src_role != ROLE_OUTPUT:
                raise ArtifactReferenceError(
                    f"data edge {edge.src}.{edge.src_role} is not a declared output"
                )
            if dst_role != ROLE_INPUT:
                raise ArtifactReferenceError(
                    f"data edge {edge.dst}.{edge.dst_role} is not a declared input"
                )

    # dependency edges acyclic (structure is a tree; edges could still cycle)
    adj = {}
    for edge in wf.edges:
        adj.setdefault(edge.src, set()).add(edge.dst)
    estate = {}

    def evisit(nid, trail):
        mark = estate.get(nid)
        if mark == 1:
            raise ArtifactCycleError(
                "dependency edges cycle: " + " -> ".join(trail + [nid])
            )
        if mark == 2:
            return
        estate[nid] = 1
        for nxt in adj.get(nid, ()):
            evisit(nxt, trail + [nid])
        estate[nid] = 2

    for nid in adj:
        evisit(nid, [])

    # variable binding discipline
    loops_above = _loop_scopes(wf, node_map)
    edge_roles = {}
    for edge in wf.edges:
        if edge.kind == "data":
            edge_roles.setdefault(edge.dst, set()).add(edge.dst_role)
    for node in wf.nodes:
        if not isinstance(node, TaskNode):
            continue
        task = task_map[node.task_id]
        bound = {var for var, _ in node.bindings}
        bound |= loops_above.get(node.node_id, set())
        bound |= edge_roles.get(node.node_id, set())
        for seg in task.argv:
            if isinstance(seg, VarSeg) and seg.name not in bound:
                raise ArtifactReferenceError(
                    f"node {node.node_id}: variable ${seg.name} of task "
                    f"{task.task_id} is not bound"
                )
        for _, expr in node.bindings:
            free = path_expr_vars(expr) - loops_above.get(node.node_id, set())
            if free:
                raise ArtifactReferenceError(
                    f"node {node.node_id}: binding uses unbound {sorted(free)}"
                )

    # predicates may only use loop variables in scope
    for node in wf.nodes:
        if isinstance(node, IfNode):
            free = pred_vars(node.pred) - loops_above.get(node.node_id, set())
            if free:
                raise ArtifactReferenceError(
                    f"node {node.node_id}: predicate uses unbound {sorted(free)}"
                )

    # egress flag only on allowlisted commands
    for task in artifact.tasks:
        if task.egress and task.command not in DEFAULT_EGRESS_ALLOWLIST:
            raise ArtifactReferenceError(
                f"task {task.task_id}: egress=true but {task.command!r} is not "
                f"an egress tool"
            )


def _loop_scopes(wf: WorkflowGraph, node_map: dict) -> dict:
    """Map node id -> set of loop variables bound by enclosing for-each nodes."""
    scopes = {}

    def walk(node_id, in_scope):
        scopes[node_id] = set(in_scope)
        node = node_map[node_id]
        if isinstance(node, ForEachNode):
            in_scope = in_scope | {node.var}
        for child in wf.structural_children(node):
            walk(child, in_scope)

    walk(wf.root, set())
    return scopes


# ---------------------------------------------------------------------------
# structural isomorphism (used by the lowering round-trip contract)


def canonical_shape(artifact: ScriptArtifact):
    """Node-id-independent structural form, for isomorphism comparison."""
    wf = artifact.workflow
    node_map = wf.node_map()
    task_map = artifact.task_map()

    def shape(node_id):
        node = node_map[node_id]
        if isinstance(node, TaskNode):
            task = task_map[node.task_id]
            return (
                "task",
                task.command,
                tuple(
                    ("lit", s.text) if isinstance(s, LitSeg) else ("var",)
                    for s in task.argv
                ),
                tuple((v, _path_expr_form_key(e)) for v, e in node.bindings),
                task.egress,
                task.opaque,
            )
        if isinstance(node, SeqNode):
            return ("seq",) + tuple(shape(c) for c in node.children)
        if isinstance(node, ForEachNode):
            return ("foreach", node.glob, shape(node.body))
        if isinstance(node, IfNode):
            return (
                "if",
                sexpr.dumps(_pred_form(_anon_pred(node.pred))),
                shape(node.then) if node.then else None,
                shape(node.els) if node.els else None,
            )
        raise TypeError(node)

    return shape(wf.root)


def _anon_pred(pred):
    """Rename variables to positional markers so shapes compare by structure."""
    # loop variables keep their relative identity through a shared mapping
    mapping = {}

    def rename_expr(expr):
        if isinstance(expr, PVar):
            mapping.setdefault(expr.name, f"_{len(mapping)}")
            return PVar(mapping[expr.name])
        if isinstance(expr, PLit):
            return expr
        if isinstance(expr, PBase):
            return PBase(rename_expr(expr.inner))
        if isinstance(expr, PDir):
            return PDir(rename_expr(expr.inner))
        if isinstance(expr, PStripExt):
            return PStripExt(rename_expr(expr.inner))
        if isinstance(expr, PConcat):
            return PConcat(tuple(rename_expr(p) for p in expr.parts))
        raise TypeError(expr)

    def rename(p):
        if isinstance(p, IsFile):
            return IsFile(rename_expr(p.path))
        if isinstance(p, IsDir):
            return IsDir(rename_expr(p.path))
        if isinstance(p, Exists):
            return Exists(rename_expr(p.path))
        if isinstance(p, ExtEq):
            return ExtEq(rename_expr(p.path), p.ext)
        if isinstance(p, StrEq):
            return StrEq(rename_expr(p.left), rename_expr(p.right))
        if isinstance(p, Not):
            return Not(rename(p.inner))
        if isinstance(p, And):
            return And(tuple(rename(x) for x in p.parts))
        raise TypeError(p)

    return rename(pred)


def _path_expr_form_key(expr) -> str:
    return sexpr.dumps(_path_expr_form(expr))
