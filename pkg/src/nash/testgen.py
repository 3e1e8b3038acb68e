"""Test-environment synthesis from workflow control flow.

`extract_paths` enumerates the branch combinations a workflow can take,
one symbolic element per for-each scope.  `solve` searches a bounded
universe (name alphabet, entry count, depth) for a filesystem tree that
drives execution down one such path; `materialize` builds the tree in a
scratch guard root inside its own epoch so the caller can abort it and
leave no trace.  `coverage_run` executes the artifact over environments
and, from the executor's branch trace, marks which conditions were
actually exercised.  `brute_force_feasible` cross-checks the solver by
running the artifact over every tree in a small universe.

Extension and string atoms are decided structurally from candidate
names; file-system atoms (is-file, is-dir, exists) become per-path
constraints solved by enumerating each path's state.  Infeasibility is
always relative to the declared bounds.
"""

from __future__ import annotations

import os
import posixpath
import random
import shutil
import string
from dataclasses import dataclass, field
from itertools import combinations, product

from .annotations import lookup_annotation  # noqa: F401  (part of this API)
from .artifact import (
    And,
    Exists,
    ExtEq,
    ForEachNode,
    IfNode,
    IsDir,
    IsFile,
    Not,
    PVar,
    ScriptArtifact,
    SeqNode,
    StrEq,
    TaskNode,
    WorkflowGraph,
    eval_path,
)
from .errors import ArtifactReferenceError, NashError, StoreError
from .executor import SandboxConfig, atom_key, run
from .guard import GuardHandle, seal_epoch
from .history import abort, begin_epoch
from .store import Store

FILE = "file"
DIR = "dir"
_ABSENT = "absent"

DEFAULT_ALPHABET = ("a.swp", "b.txt", ".b.txt.swp", "d")


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class PathLiteral:
    """One required atom outcome on a path through the workflow."""

    key: str  # symbolic atom key, matching executor branch traces
    value: bool
    atom: object

    def describe(self) -> str:
        return self.key if self.value else f"! {self.key}"


@dataclass(frozen=True)
class PathCondition:
    """Ordered conjunction of literals selecting one execution path.

    `scope` lists the (variable, glob) bindings of the enclosing
    for-each scopes; literals may only reference those variables.
    """

    literals: tuple = ()
    scope: tuple = ()  # ((var, glob), ...)
    note: str = ""

    def describe(self) -> str:
        if not self.literals:
            return self.note or "(no branch constraints)"
        return " && ".join(lit.describe() for lit in self.literals)

    def to_json_obj(self) -> dict:
        return {
            "literals": [[lit.key, lit.value] for lit in self.literals],
            "scope": [[var, glob] for var, glob in self.scope],
            "note": self.note,
        }


@dataclass(frozen=True)
class Bounds:
    files: int = 3  # maximum entries in a synthesized tree
    alphabet: tuple = DEFAULT_ALPHABET
    depth: int = 1  # maximum path components

    def to_json_obj(self) -> dict:
        return {
            "files": self.files,
            "alphabet": list(self.alphabet),
            "depth": self.depth,
        }


@dataclass(frozen=True)
class Infeasible:
    """No model within the declared bounds; not an error."""

    condition: PathCondition
    bounds: Bounds
    reason: str = "no model within bounds"


@dataclass(frozen=True)
class EnvEntry:
    path: str
    kind: str  # file | dir
    content: str = ""
    mode: int = 0o644

    def to_json_obj(self) -> dict:
        return {
            "path": self.path,
            "kind": self.kind,
            "content": self.content,
            "mode": self.mode,
        }


@dataclass(frozen=True)
class EnvironmentSpec:
    """A materializable tree plus the bounds it was drawn from."""

    tree: tuple = ()  # EnvEntry, sorted by path
    alphabet: tuple = ()
    depth: int = 1

    def paths(self) -> list:
        return [entry.path for entry in self.tree]

    def to_json_obj(self) -> dict:
        return {
            "tree": [entry.to_json_obj() for entry in self.tree],
            "alphabet": list(self.alphabet),
            "depth": self.depth,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "EnvironmentSpec":
        tree = tuple(
            EnvEntry(
                path=e["path"],
                kind=e["kind"],
                content=e.get("content", ""),
                mode=int(e.get("mode", 0o644)),
            )
            for e in obj.get("tree", ())
        )
        return cls(
            tree=tree,
            alphabet=tuple(obj.get("alphabet", ())),
            depth=int(obj.get("depth", 1)),
        )


def _entry_for(path: str, kind: str) -> EnvEntry:
    if kind == DIR:
        return EnvEntry(path=path, kind=DIR, content="", mode=0o755)
    return EnvEntry(path=path, kind=FILE, content=f"content of {path}\n")


@dataclass
class ConditionCoverage:
    condition: PathCondition
    feasible: bool
    environment: EnvironmentSpec | None
    exercised: bool


@dataclass
class CoverageReport:
    items: tuple = ()
    errors: tuple = ()  # (environment index, message)

    @property
    def totals(self) -> dict:
        return {
            "conditions": len(self.items),
            "feasible": sum(1 for i in self.items if i.feasible),
            "exercised": sum(1 for i in self.items if i.exercised),
        }

    def to_json_obj(self) -> dict:
        return {
            "conditions": [
                {
                    "condition": item.condition.describe(),
                    "literals": item.condition.to_json_obj()["literals"],
                    "feasible": item.feasible,
                    "exercised": item.exercised,
                    "environment": (
                        item.environment.to_json_obj()
                        if item.environment is not None
                        else None
                    ),
                }
                for item in self.items
            ],
            "errors": [list(e) for e in self.errors],
            "totals": self.totals,
        }

    def render_table(self) -> str:
        lines = ["#  feasible exercised condition"]
        for i, item in enumerate(self.items, start=1):
            lines.append(
                "%-2d %-8s %-9s %s"
                % (
                    i,
                    "yes" if item.feasible else "no",
                    "yes" if item.exercised else "no",
                    item.condition.describe(),
                )
            )
        t = self.totals
        lines.append(
            f"{t['conditions']} condition(s), {t['feasible']} feasible, "
            f"{t['exercised']} exercised"
        )
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# path extraction


def _pred_traces(pred) -> list:
    """All short-circuit evaluation traces of a predicate.

    Each trace is (literals, outcome): the atoms actually evaluated, in
    order, with the raw values they returned, and the predicate's truth.
    Mirrors the executor: `Not` flips the outcome but not the recorded
    atom values; `And` stops at the first false conjunct.
    """
    if isinstance(pred, Not):
        return [(lits, not oc) for lits, oc in _pred_traces(pred.inner)]
    if isinstance(pred, And):
        out = []

        def rec(i: int, acc: tuple):
            if i == len(pred.parts):
                out.append((acc, True))
                return
            for lits, oc in _pred_traces(pred.parts[i]):
                if oc:
                    rec(i + 1, acc + lits)
                else:
                    out.append((acc + lits, False))

        rec(0, ())
        return out
    key = atom_key(pred)
    return [
        ((PathLiteral(key, True, pred),), True),
        ((PathLiteral(key, False, pred),), False),
    ]


def _extend(literals: tuple, more: tuple):
    """Append literals, dropping duplicates; None when contradictory."""
    held = {lit.key: lit.value for lit in literals}
    out = list(literals)
    for lit in more:
        prev = held.get(lit.key)
        if prev is None:
            held[lit.key] = lit.value
            out.append(lit)
        elif prev != lit.value:
            return None
    return tuple(out)


def extract_paths(artifact) -> list:
    """Enumerate branch-combination paths, one symbolic element per loop.

    Accepts a ScriptArtifact or a bare WorkflowGraph.  Opaque artifacts
    have no analyzable control flow and yield the single trivial path
    with a note saying so.
    """
    if isinstance(artifact, ScriptArtifact):
        if any(task.opaque for task in artifact.tasks):
            return [
                PathCondition(
                    note="opaque script: control flow not analyzable"
                )
            ]
        graph = artifact.workflow
    elif isinstance(artifact, WorkflowGraph):
        graph = artifact
    else:
        raise TypeError(f"expected an artifact or workflow, got {artifact!r}")

    def walk(node_id: str, states: list) -> list:
        node = graph.node(node_id)
        if isinstance(node, TaskNode):
            return states
        if isinstance(node, SeqNode):
            for child in node.children:
                states = walk(child, states)
            return states
        if isinstance(node, ForEachNode):
            out = []
            for lits, scope in states:
                out.extend(
                    walk(node.body, [(lits, scope + ((node.var, node.glob),))])
                )
            return out
        if isinstance(node, IfNode):
            out = []
            for lits, scope in states:
                for trace, outcome in _pred_traces(node.pred):
                    ext = _extend(lits, trace)
                    if ext is None:
                        continue
                    state = [(ext, scope)]
                    target = node.then if outcome else node.els
                    out.extend(walk(target, state) if target else state)
            return out
        raise TypeError(node)

    final = walk(graph.root, [((), ())])
    seen = set()
    conditions = []
    for lits, scope in final:
        ident = (tuple((l.key, l.value) for l in lits), scope)
        if ident in seen:
            continue
        seen.add(ident)
        conditions.append(PathCondition(literals=lits, scope=scope))
    return conditions


# ---------------------------------------------------------------------------
# solving


def _safe_rel(path: str) -> str | None:
    """Normalize to a relative path inside the root, else None."""
    if not path or path.startswith("/"):
        return None
    norm = posixpath.normpath(path)
    if norm == "." or norm == ".." or norm.startswith("../"):
        return None
    return norm


def _ancestors(path: str) -> list:
    parts = path.split("/")
    return ["/".join(parts[:i]) for i in range(1, len(parts))]


def _glob_candidates(glob: str, bounds: Bounds) -> list:
    """Alphabet names that a for-each over `glob` could bind, in order."""
    from .util import fnmatch_name

    dirpart, _, namepat = glob.rpartition("/")
    if dirpart and any(c in dirpart for c in "*?["):
        return []
    out = []
    for name in bounds.alphabet:
        if "/" in name:
            continue
        if not fnmatch_name(name, namepat):
            continue
        value = f"{dirpart}/{name}" if dirpart else name
        norm = _safe_rel(value)
        if norm is None or len(norm.split("/")) > bounds.depth:
            continue
        out.append(norm)
    return out


def _struct_ext_equal(path: str, ext: str) -> bool:
    name = posixpath.basename(path)
    stem, dot, got = name.rpartition(".")
    return bool(dot) and bool(stem) and got == ext


def solve(condition: PathCondition, bounds: Bounds):
    """Find a minimal tree taking this path, or Infeasible within bounds.

    Bounded model enumeration: assignments of scope variables to
    alphabet names decide extension and string atoms structurally; the
    file-system atoms then constrain each mentioned path to one of
    absent/file/dir, enumerated directly.
    """
    var_names = [var for var, _ in condition.scope]
    candidate_lists = [
        _glob_candidates(glob, bounds) for _, glob in condition.scope
    ]
    if any(not c for c in candidate_lists):
        return Infeasible(condition, bounds, "no alphabet name matches a loop glob")

    best = None
    best_key = None
    for values in product(*candidate_lists):
        env = dict(zip(var_names, values))
        fs_literals = []  # (normalized path, atom class, required value)
        ok = True
        for lit in condition.literals:
            atom = lit.atom
            try:
                if isinstance(atom, ExtEq):
                    if _struct_ext_equal(eval_path(atom.path, env), atom.ext) != lit.value:
                        ok = False
                        break
                elif isinstance(atom, StrEq):
                    same = eval_path(atom.left, env) == eval_path(atom.right, env)
                    if same != lit.value:
                        ok = False
                        break
                elif isinstance(atom, (IsFile, IsDir, Exists)):
                    norm = _safe_rel(eval_path(atom.path, env))
                    if norm is None:
                        ok = False
                        break
                    fs_literals.append((norm, type(atom), lit.value))
                else:
                    ok = False
                    break
            except ArtifactReferenceError:
                ok = False
                break
        if not ok:
            continue

        constrained = sorted({p for p, _, _ in fs_literals} | set(values))
        for states in product((_ABSENT, FILE, DIR), repeat=len(constrained)):
            state = dict(zip(constrained, states))
            # loop variables bind names the glob actually listed
            if any(state[v] == _ABSENT for v in values):
                continue
            if not all(
                _fs_literal_holds(state[p], cls, want)
                for p, cls, want in fs_literals
            ):
                continue
            tree_state = dict(state)
            conflict = False
            for path, kind in state.items():
                if kind == _ABSENT:
                    continue
                for anc in _ancestors(path):
                    prior = tree_state.get(anc)
                    if prior in (FILE, _ABSENT):
                        conflict = True
                        break
                    tree_state[anc] = DIR
                if conflict:
                    break
            if conflict:
                continue
            entries = sorted(
                p for p, kind in tree_state.items() if kind != _ABSENT
            )
            if len(entries) > bounds.files:
                continue
            if any(len(p.split("/")) > bounds.depth for p in entries):
                continue
            tree = tuple(_entry_for(p, tree_state[p]) for p in entries)
            key = (len(entries), tuple(entries))
            if best_key is None or key < best_key:
                best_key = key
                best = EnvironmentSpec(
                    tree=tree, alphabet=bounds.alphabet, depth=bounds.depth
                )
    if best is None:
        return Infeasible(condition, bounds)
    return best


def _fs_literal_holds(state: str, atom_cls, want: bool) -> bool:
    if atom_cls is IsFile:
        return (state == FILE) == want
    if atom_cls is IsDir:
        return (state == DIR) == want
    return (state != _ABSENT) == want


def derive_alphabet(conditions: list, letters: int = 4) -> tuple:
    """A candidate name universe sized to the conditions' atoms.

    Base names cycle the extensions seen in extension atoms and in loop
    globs (`*.log` wants a `.log` name) plus one neutral extension and
    one bare name; every derived sibling (a path expression over a
    single loop variable) of each base name is added so
    sibling-existence atoms can be made true within the universe.
    """
    ext_pool = {
        lit.atom.ext
        for cond in conditions
        for lit in cond.literals
        if isinstance(lit.atom, ExtEq)
    }
    for cond in conditions:
        for _, glob in cond.scope:
            namepat = glob.rpartition("/")[2]
            stem, dot, ext = namepat.rpartition(".")
            if dot and ext and not any(c in ext for c in "*?["):
                ext_pool.add(ext)
    exts = sorted(ext_pool)
    filler = next(e for e in ("txt", "dat", "out") if e not in exts)
    cycle = exts + [filler, None]
    names = []
    for i in range(max(letters, 1)):
        stem = string.ascii_lowercase[i % 26]
        ext = cycle[i % len(cycle)]
        names.append(f"{stem}.{ext}" if ext else stem)

    templates = []
    for cond in conditions:
        for lit in cond.literals:
            atom = lit.atom
            if isinstance(atom, (IsFile, IsDir, Exists)):
                expr = atom.path
                free = _free_vars(expr)
                if len(free) == 1 and not isinstance(expr, PVar):
                    templates.append((expr, next(iter(free))))
    derived = set()
    for expr, var in templates:
        for name in names:
            try:
                sibling = _safe_rel(eval_path(expr, {var: name}))
            except ArtifactReferenceError:
                continue
            if sibling and sibling not in names:
                derived.add(sibling)
    return tuple(names) + tuple(sorted(derived))


def derive_bounds(conditions: list, *, files: int = 3, letters: int = 4,
                  depth: int | None = None) -> Bounds:
    """Bounds sized to the conditions.

    The alphabet comes from the conditions' atoms; unless given, the
    depth is raised to cover directory-qualified loop globs, since a
    glob like `logs/*.log` can only bind two-component paths.
    """
    alphabet = derive_alphabet(conditions, letters)
    if depth is None:
        depth = 1
        for cond in conditions:
            for _, glob in cond.scope:
                dirpart, _, _ = glob.rpartition("/")
                if dirpart and not any(c in dirpart for c in "*?["):
                    depth = max(depth, len(dirpart.split("/")) + 1)
    return Bounds(files=files, alphabet=alphabet, depth=depth)


def _free_vars(expr) -> set:
    out = set()
    stack = [expr]
    while stack:
        node = stack.pop()
        if isinstance(node, PVar):
            out.add(node.name)
        for attr in ("inner", "parts"):
            sub = getattr(node, attr, None)
            if sub is None:
                continue
            stack.extend(sub if isinstance(sub, tuple) else [sub])
    return out


# ---------------------------------------------------------------------------
# materialization


def materialize(spec: EnvironmentSpec, store: Store) -> int:
    """Build the tree in a fresh scratch root inside its own epoch.

    Returns the epoch id; the guard root is recorded in the epoch's
    metadata.  The caller aborts the epoch (and removes the scratch
    root) when done, leaving no net effect.
    """
    scratch_parent = store.root / "scratch"
    scratch_parent.mkdir(exist_ok=True)
    next_id = max(store.list_epoch_ids(), default=0) + 1
    root = scratch_parent / f"env{next_id}"
    try:
        os.mkdir(root)
    except FileExistsError:
        raise StoreError(f"scratch root {root} already exists") from None
    meta = begin_epoch(
        store, description="testgen environment", guard_root=str(root)
    )
    epoch_id = meta["epoch_id"]
    with GuardHandle(store, str(root), epoch_id) as guard:
        for entry in sorted(spec.tree, key=lambda e: e.path):
            if entry.kind == DIR:
                guard.makedirs(entry.path, entry.mode)
                continue
            parent = posixpath.dirname(entry.path)
            if parent and not guard.isdir(parent):
                guard.makedirs(parent)
            guard.write_file(
                entry.path, entry.content.encode("utf-8"), mode=entry.mode
            )
    seal_epoch(store, epoch_id, str(root))
    return epoch_id


def scratch_root(store: Store, epoch_id: int) -> str:
    return store.read_meta(epoch_id).get("guard_root") or ""


def discard_environment(store: Store, epoch_id: int) -> None:
    """Abort the materialization epoch and remove its scratch root."""
    root = scratch_root(store, epoch_id)
    abort(store, epoch_id)
    if root:
        shutil.rmtree(root, ignore_errors=True)


def run_in_environment(store: Store, artifact: ScriptArtifact,
                       spec: EnvironmentSpec) -> list:
    """Materialize, run the artifact, undo everything; return the trace."""
    env_epoch = materialize(spec, store)
    root = scratch_root(store, env_epoch)
    events: list = []
    try:
        report = run(
            store,
            artifact,
            SandboxConfig(guard_root=root, serial=True),
            trace=events,
        )
        abort(store, report.epoch_id)
    finally:
        discard_environment(store, env_epoch)
    return events


def random_env(bounds: Bounds, seed: int) -> EnvironmentSpec:
    """Deterministic random tree within bounds (top-level entries only)."""
    rng = random.Random(seed)
    names = sorted(n for n in bounds.alphabet if "/" not in n)
    count = rng.randint(0, min(bounds.files, len(names)))
    chosen = rng.sample(names, count)
    tree = tuple(
        _entry_for(name, FILE if rng.random() < 0.75 else DIR)
        for name in sorted(chosen)
    )
    return EnvironmentSpec(tree=tree, alphabet=bounds.alphabet, depth=bounds.depth)


# ---------------------------------------------------------------------------
# coverage


def match_exercised(conditions: list, events: list) -> set:
    """Indexes of conditions whose literal set some iteration satisfied.

    Branch events are pooled per assignment of each condition's scope
    variables (taken from the event's environment); a condition is
    exercised when one pool contains every required (atom, value) pair.
    """
    branch = [e for e in events if e.get("event") == "branch"]
    iters = [e for e in events if e.get("event") == "iter"]
    hits = set()
    for idx, cond in enumerate(conditions):
        if not cond.literals:
            if all(
                any(e.get("var") == var for e in iters)
                for var, _ in cond.scope
            ):
                hits.add(idx)
            continue
        var_names = [var for var, _ in cond.scope]
        pools: dict = {}
        for event in branch:
            env = event.get("env") or {}
            if any(v not in env for v in var_names):
                continue
            key = tuple((v, env[v]) for v in var_names)
            pool = pools.setdefault(key, set())
            pool.update(tuple(a) for a in event.get("atoms", ()))
        need = {(lit.key, lit.value) for lit in cond.literals}
        if any(need <= pool for pool in pools.values()):
            hits.add(idx)
    return hits


def coverage_run(store: Store, artifact: ScriptArtifact,
                 environments: list | None = None,
                 bounds: Bounds | None = None) -> CoverageReport:
    """Solve (when no environments are given), execute, mark coverage."""
    bounds = bounds or Bounds()
    conditions = extract_paths(artifact)
    solved = [solve(cond, bounds) for cond in conditions]
    witnesses = {
        i: s for i, s in enumerate(solved) if isinstance(s, EnvironmentSpec)
    }
    if environments is None:
        environments = []
        seen = set()
        for i in sorted(witnesses):
            spec = witnesses[i]
            ident = tuple((e.path, e.kind) for e in spec.tree)
            if ident not in seen:
                seen.add(ident)
                environments.append(spec)

    exercised: set = set()
    errors = []
    for idx, spec in enumerate(environments):
        try:
            events = run_in_environment(store, artifact, spec)
        except NashError as exc:
            errors.append((idx, str(exc)))
            continue
        exercised |= match_exercised(conditions, events)

    items = tuple(
        ConditionCoverage(
            condition=cond,
            feasible=i in witnesses or i in exercised,
            environment=witnesses.get(i),
            exercised=i in exercised,
        )
        for i, cond in enumerate(conditions)
    )
    return CoverageReport(items=items, errors=tuple(errors))


def brute_force_feasible(store: Store, artifact: ScriptArtifact,
                         names: tuple, max_files: int = 3) -> frozenset:
    """Condition indexes exercised over every tree in the universe.

    The universe is every assignment of file-or-dir to each subset of
    `names` with at most `max_files` entries, all at the top level.
    """
    conditions = extract_paths(artifact)
    observed: set = set()
    for count in range(0, max_files + 1):
        for combo in combinations(sorted(names), count):
            for kinds in product((FILE, DIR), repeat=count):
                tree = tuple(
                    _entry_for(path, kind)
                    for path, kind in zip(combo, kinds)
                )
                spec = EnvironmentSpec(
                    tree=tree, alphabet=tuple(sorted(names)), depth=1
                )
                events = run_in_environment(store, artifact, spec)
                observed |= match_exercised(conditions, events)
    return frozenset(observed)
