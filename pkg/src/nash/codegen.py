"""Prompt-to-artifact generation and example-based feedback regression.

Generation runs in two phases.  `decompose` asks the backend to split a
natural-language request into one workflow prompt plus numbered task
prompts, each referenced by the workflow prompt.  `generate` then asks
for the workflow as restricted shell (invoking task N as the
pseudo-command tN) and for each task as a one-line command over
positional parameters, assembles them into a validated artifact, and
stores it.  Backend output that falls outside the composition grammar is
preserved verbatim as a warning-flagged opaque artifact instead.

Feedback examples pair an initial tree with the effect summary the user
expects; `run_regression` replays an artifact over each example in a
scratch environment and compares summaries by path set per category,
aborting every epoch so the base tree keeps its exact state.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass

from .artifact import (
    DEFAULT_EGRESS_ALLOWLIST,
    AdapterTask,
    LitSeg,
    PLit,
    PVar,
    ScriptArtifact,
    TaskNode,
    VarSeg,
    serialize,
)
from .backends import (
    KIND_DECOMPOSE,
    KIND_TASK,
    KIND_WORKFLOW,
    get_backend,
    split_sections,
)
from .effects import EffectSummary, summarize
from .errors import BackendError, ShellOutOfGrammar, UsageError
from .executor import SandboxConfig, run
from .guard import NONEXISTENT, load_layer
from .history import abort
from .shellio import opaque_artifact, read_shell, shell_to_artifact
from .store import STATE_SEALED, Store
from .testgen import (
    EnvEntry,
    EnvironmentSpec,
    discard_environment,
    materialize,
    scratch_root,
)
from .util import now_iso

EFFECT_CATEGORIES = (
    "added",
    "deleted",
    "content_modified",
    "metadata_modified",
    "renamed",
)

_TASK_LABEL = re.compile(r"task\s+(\d+)$", re.IGNORECASE)


@dataclass(frozen=True)
class Decomposition:
    workflow_prompt: str
    task_prompts: tuple


def decompose(nl_prompt: str, backend=None) -> Decomposition:
    """Split a request into a workflow prompt plus numbered task prompts."""
    if not nl_prompt or not nl_prompt.strip():
        raise UsageError("cannot generate from an empty prompt")
    backend = backend or get_backend()
    text = backend.complete(KIND_DECOMPOSE, nl_prompt.strip())
    head, sections = split_sections(text)
    prompts = []
    for label, body in sections:
        m = _TASK_LABEL.fullmatch(label.strip())
        if not m or int(m.group(1)) != len(prompts) + 1:
            raise BackendError(
                f"malformed decomposition: expected section "
                f"'task {len(prompts) + 1}', got {label!r}"
            )
        if not body:
            raise BackendError(f"malformed decomposition: empty {label!r}")
        prompts.append(body)
    if not head:
        raise BackendError("malformed decomposition: no workflow prompt")
    if not prompts:
        raise BackendError("malformed decomposition: no task prompts")
    for i in range(1, len(prompts) + 1):
        if not re.search(rf"task\s+{i}\b", head, re.IGNORECASE):
            raise BackendError(
                f"malformed decomposition: workflow prompt never "
                f"references task {i}"
            )
    return Decomposition(head, tuple(prompts))


def _task_from_line(line: str, task_id: str, prompt: str) -> AdapterTask:
    """Turn a one-line command with $1.. parameters into an adapter task."""
    graph, tasks = read_shell(line)
    nodes = [n for n in graph.nodes if isinstance(n, TaskNode)]
    if len(graph.nodes) != 1 or len(nodes) != 1:
        raise ShellOutOfGrammar("task code must be a single command")
    base = next(t for t in tasks if t.task_id == nodes[0].task_id)
    bindings = dict(nodes[0].bindings)
    roles = dict(base.io_roles)
    argv = []
    io_roles = []
    for seg in base.argv:
        if isinstance(seg, LitSeg):
            argv.append(seg)
            continue
        expr = bindings.get(seg.name)
        if isinstance(expr, PVar) and expr.name.isdigit():
            argv.append(VarSeg(expr.name))
            io_roles.append((expr.name, roles.get(seg.name, "other")))
        elif isinstance(expr, PLit):
            argv.append(LitSeg(expr.text))
        else:
            raise ShellOutOfGrammar(
                "task parameters must be plain positional references ($1, $2, ...)"
            )
    return AdapterTask(
        task_id=task_id,
        command=base.command,
        argv=tuple(argv),
        io_roles=tuple(sorted(io_roles)),
        egress=base.command in DEFAULT_EGRESS_ALLOWLIST,
        task_prompt=prompt,
    )


def _fallback_script(workflow_text: str, task_lines: list) -> str:
    """Runnable sh for out-of-grammar output: tasks become functions."""
    lines = []
    for ref, _prompt, line in task_lines:
        lines.append(f"{ref}() {{")
        lines.append(f"  {line}")
        lines.append("}")
    lines.append(workflow_text)
    return "\n".join(lines) + "\n"


def generate(store: Store, workflow_prompt: str, task_prompts,
             backend=None, *, nl_prompt: str = "",
             parent: str | None = None) -> ScriptArtifact:
    """Generate, assemble, validate, and store an artifact."""
    if not workflow_prompt or not task_prompts:
        raise UsageError("generation needs a workflow prompt and task prompts")
    backend = backend or get_backend()
    backend_id = backend.descriptor.backend_id
    created = now_iso()
    prompt = nl_prompt or workflow_prompt

    task_lines = []
    for i, task_prompt in enumerate(task_prompts, start=1):
        line = backend.complete(KIND_TASK, task_prompt).strip()
        task_lines.append((f"t{i}", task_prompt, line))
    workflow_text = backend.complete(KIND_WORKFLOW, workflow_prompt).strip()

    try:
        task_refs = {
            ref: _task_from_line(line, ref, task_prompt)
            for ref, task_prompt, line in task_lines
        }
        artifact = shell_to_artifact(
            workflow_text,
            nl_prompt=prompt,
            backend_id=backend_id,
            created_at=created,
            parent=parent,
            task_refs=task_refs,
        )
    except ShellOutOfGrammar as exc:
        artifact = opaque_artifact(
            _fallback_script(workflow_text, task_lines),
            nl_prompt=prompt,
            backend_id=backend_id,
            created_at=created,
            parent=parent,
            reason=f"backend output outside the composition grammar: {exc}",
        )
    store.save_artifact_text(artifact.artifact_id, serialize(artifact))
    return artifact


def generate_from_prompt(store: Store, nl_prompt: str, backend=None,
                         parent: str | None = None) -> ScriptArtifact:
    """The full pipeline: decompose, then generate and store."""
    backend = backend or get_backend()
    decomp = decompose(nl_prompt, backend)
    return generate(
        store,
        decomp.workflow_prompt,
        decomp.task_prompts,
        backend,
        nl_prompt=nl_prompt.strip(),
        parent=parent,
    )


# ---------------------------------------------------------------------------
# feedback examples


@dataclass(frozen=True)
class FeedbackExample:
    """An initial tree plus the effects the user expects from a run."""

    example_id: str
    environment: EnvironmentSpec
    prompt_context: str = ""
    expected_effects: dict | None = None  # category -> [relative path, ...]
    expected_output: str | None = None

    def to_json_obj(self) -> dict:
        return {
            "example_id": self.example_id,
            "environment": self.environment.to_json_obj(),
            "prompt_context": self.prompt_context,
            "expected_effects": (
                {k: sorted(v) for k, v in self.expected_effects.items()}
                if self.expected_effects is not None
                else None
            ),
            "expected_output": self.expected_output,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "FeedbackExample":
        return cls(
            example_id=obj["example_id"],
            environment=EnvironmentSpec.from_json_obj(obj["environment"]),
            prompt_context=obj.get("prompt_context", ""),
            expected_effects=obj.get("expected_effects"),
            expected_output=obj.get("expected_output"),
        )


def _check_example(example: FeedbackExample) -> None:
    if not example.example_id or "/" in example.example_id:
        raise UsageError(f"bad example id {example.example_id!r}")
    for category in example.expected_effects or {}:
        if category not in EFFECT_CATEGORIES:
            raise UsageError(f"unknown effect category {category!r}")


def record_feedback(store: Store, artifact_id: str,
                    example: FeedbackExample) -> None:
    """Append the example to the artifact's suite under the store."""
    _check_example(example)
    directory = store.examples_dir(artifact_id)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{example.example_id}.json"
    path.write_text(
        json.dumps(example.to_json_obj(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def load_examples(store: Store, artifact_id: str) -> list:
    directory = store.examples_dir(artifact_id)
    if not directory.is_dir():
        return []
    return [
        FeedbackExample.from_json_obj(json.loads(p.read_text(encoding="utf-8")))
        for p in sorted(directory.glob("*.json"))
    ]


_SNAPSHOT_MAX_ENTRIES = 200
_SNAPSHOT_MAX_FILE_BYTES = 64 * 1024


def example_from_epoch(store: Store, epoch_id: int, example_id: str, *,
                       prompt_context: str = "") -> FeedbackExample:
    """Turn a sealed run into a feedback example.

    The pre-run tree is reconstructed by walking the current guard-root
    tree and applying the epoch's layer in reverse: created paths are
    dropped, modified and deleted ones take their stashed pre-states.
    The expected effects are the epoch's own summary, so the example
    asserts "this tree, this artifact, these effects".  Symlinks are
    skipped (examples describe files and directories only); trees over
    the snapshot caps are refused rather than truncated.
    """
    meta = store.read_meta(epoch_id)
    if meta.get("state") != STATE_SEALED:
        raise UsageError(
            f"epoch {epoch_id} is {meta.get('state')}; feedback needs a "
            "sealed run (not yet committed or undone)"
        )
    root = meta.get("guard_root")
    if not root:
        raise UsageError(f"epoch {epoch_id} records no guard root")
    layer = load_layer(store, epoch_id)
    summary = summarize(layer, store)

    store_real = os.path.realpath(store.root)
    tree: dict = {}  # rel path -> (kind, content or None, mode)
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(
            d for d in dirnames
            if os.path.realpath(os.path.join(dirpath, d)) != store_real
            and not os.path.islink(os.path.join(dirpath, d))
        )
        for name in dirnames:
            full = os.path.join(dirpath, name)
            rel = os.path.relpath(full, root)
            tree[rel] = ("dir", None, os.stat(full).st_mode & 0o7777)
        for name in sorted(filenames):
            full = os.path.join(dirpath, name)
            if os.path.islink(full):
                continue
            rel = os.path.relpath(full, root)
            st = os.stat(full)
            if st.st_size > _SNAPSHOT_MAX_FILE_BYTES:
                raise UsageError(
                    f"{rel} is {st.st_size} bytes; snapshot cap is "
                    f"{_SNAPSHOT_MAX_FILE_BYTES} bytes per file"
                )
            with open(full, "rb") as fh:
                data = fh.read()
            tree[rel] = ("file", data, st.st_mode & 0o7777)

    # Invert the layer: first journal entry per path holds the original
    # pre-state.
    for path in dict.fromkeys(layer.paths):
        pre = layer.entry(path)["pre_state"]
        if pre == NONEXISTENT:
            tree.pop(path, None)
        elif pre["type"] == "file":
            data = store.blobs.read_bytes(pre["content_ref"])
            mode = (pre.get("metadata") or {}).get("mode", 0o644)
            tree[path] = ("file", data, mode & 0o7777)
        elif pre["type"] == "dir":
            mode = (pre.get("metadata") or {}).get("mode", 0o755)
            tree[path] = ("dir", None, mode & 0o7777)
        else:
            raise UsageError(
                f"cannot snapshot {path}: pre-state is a "
                f"{pre['type']}, not a file or directory"
            )

    if len(tree) > _SNAPSHOT_MAX_ENTRIES:
        raise UsageError(
            f"tree has {len(tree)} entries; snapshot cap is "
            f"{_SNAPSHOT_MAX_ENTRIES}"
        )
    entries = []
    for path in sorted(tree):
        kind, data, mode = tree[path]
        content = "" if data is None else data.decode("utf-8", errors="replace")
        entries.append(EnvEntry(path=path, kind=kind, content=content,
                                mode=mode))
    depth = max((p.count("/") + 1 for p in tree), default=1)
    alphabet = tuple(sorted({p.split("/")[0] for p in tree}))
    expected = {
        cat: sorted(paths)
        for cat, paths in _summary_path_sets(summary).items()
        if paths
    }
    return FeedbackExample(
        example_id=example_id,
        environment=EnvironmentSpec(tree=tuple(entries), alphabet=alphabet,
                                    depth=depth),
        prompt_context=prompt_context,
        expected_effects=expected,
    )


# ---------------------------------------------------------------------------
# regression


@dataclass
class RegressionResult:
    example_id: str
    passed: bool
    detail: str = ""


def _summary_path_sets(summary: EffectSummary) -> dict:
    return {
        "added": {p for p, _ in summary.added},
        "deleted": {p for p, _ in summary.deleted},
        "content_modified": {p for p, _, _ in summary.content_modified},
        "metadata_modified": {p for p, _ in summary.metadata_modified},
        "renamed": {f"{r['from']} -> {r['to']}" for r in summary.renamed},
    }


def run_regression(store: Store, artifact: ScriptArtifact,
                   examples) -> list:
    """Replay the artifact over each example; compare effects per category.

    Every environment lives in a scratch root inside the store and both
    the materialization epoch and the run epoch are aborted, so the run
    leaves zero net filesystem effects.  An empty example list passes
    vacuously (the returned list is empty).
    """
    results = []
    for example in examples:
        _check_example(example)
        env_epoch = materialize(example.environment, store)
        root = scratch_root(store, env_epoch)
        try:
            report = run(
                store,
                artifact,
                SandboxConfig(guard_root=root, serial=True),
            )
            summary = summarize(load_layer(store, report.epoch_id), store)
            abort(store, report.epoch_id)
        finally:
            discard_environment(store, env_epoch)

        problems = []
        expected = example.expected_effects or {}
        actual = _summary_path_sets(summary)
        for category in EFFECT_CATEGORIES:
            want = set(expected.get(category, ()))
            got = actual[category]
            for path in sorted(got - want):
                problems.append(f"{category}: unexpected {path}")
            for path in sorted(want - got):
                problems.append(f"{category}: missing {path}")
        if example.expected_output is not None:
            output = "".join(n.detail for n in report.nodes)
            if output.strip() != example.expected_output.strip():
                problems.append(
                    f"output: expected {example.expected_output!r}, "
                    f"got {output!r}"
                )
        if not report.ok:
            for n in report.nodes:
                if n.status in ("failed", "denied"):
                    problems.append(
                        f"execution: node {n.node_id} {n.status} "
                        f"({n.reason or n.detail.strip()})"
                    )
        results.append(
            RegressionResult(
                example_id=example.example_id,
                passed=not problems,
                detail="; ".join(problems),
            )
        )
    return results
