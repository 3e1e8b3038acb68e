"""Interactive loop: prompt, preview, run, inspect, revert.

A session owns one store and one sandbox config.  Natural-language
lines are decomposed and generated into an artifact whose preview
(lowered shell, task list, egress warnings) is printed; nothing touches
the filesystem until an explicit `:run`.  Meta-commands mirror the
`nash` CLI subcommands, so scripted transcripts and interactive use go
through the same code.

IO streams are injectable so tests can drive a session from a script
and assert on the byte-exact transcript.
"""

from __future__ import annotations

import os
import shlex
import sys
from dataclasses import replace

from .artifact import PLit, ScriptArtifact, TaskNode, parse_artifact
from .backends import get_backend
from .codegen import (
    example_from_epoch,
    generate_from_prompt,
    record_feedback,
    run_regression,
)
from .effects import render_human, summarize
from .egress import APPROVE, DENY, Gate, is_sensitive, render_prompt
from .errors import NashError, UsageError
from .executor import (
    SandboxConfig,
    node_dependency_map,
    resume,
    run,
)
from .guard import load_layer
from .history import abort, commit, list_history, restore_paths
from .shellio import lower_to_shell
from .store import Store
from .testgen import (
    coverage_run,
    derive_bounds,
    extract_paths,
    random_env,
)
from .util import now_iso

PROMPT = "nash> "

EGRESS_POLICIES = ("ask", "approve-all", "deny-all")

_HELP = """\
commands:
  :show                         reprint the current artifact preview
  :run                          execute the current artifact (one epoch)
  :effects [epoch]              full effect listing (default: last run)
  :undo <epoch> [--path P]... [--force]   restore pre-states
  :commit <epoch>               discard undo data for an epoch
  :history                      list epochs, newest first
  :testgen [--seed N]           path conditions + coverage for the artifact
  :feedback <id>                record the last run as a regression example
  :allow-net                    enable network egress for this session
  :quit                         leave
anything else is a natural-language prompt; it generates a preview and
nothing runs until :run."""


class Session:
    """One interactive session: a store, a config, one current artifact."""

    def __init__(self, store: Store, config: SandboxConfig, *,
                 backend=None, stdin=None, stdout=None,
                 egress_policy: str = "ask"):
        if egress_policy not in EGRESS_POLICIES:
            raise UsageError(
                f"unknown egress policy {egress_policy!r}; "
                f"choose from {', '.join(EGRESS_POLICIES)}"
            )
        self.store = store
        self.config = config
        self.backend = backend
        self.stdin = stdin if stdin is not None else sys.stdin
        self.stdout = stdout if stdout is not None else sys.stdout
        self.egress_policy = egress_policy
        self.artifact: ScriptArtifact | None = None
        self.last_epoch: int | None = None
        self.done = False

    # -- io ---------------------------------------------------------

    def say(self, text: str = "") -> None:
        self.stdout.write(text + "\n")

    def ask(self, prompt: str) -> str | None:
        """Prompt and read one line; None on end of input."""
        self.stdout.write(prompt)
        self.stdout.flush()
        line = self.stdin.readline()
        if line == "":
            return None
        return line.strip()

    # -- dispatch ---------------------------------------------------

    def dispatch(self, line: str) -> None:
        """Handle one input line; errors become messages, not crashes."""
        line = line.strip()
        if not line or line.startswith("#"):
            return
        try:
            if line.startswith(":"):
                self._meta(line)
            else:
                self._generate(line)
        except NashError as exc:
            self.say(f"error: {exc}")

    def _meta(self, line: str) -> None:
        try:
            words = shlex.split(line)
        except ValueError as exc:
            raise UsageError(f"unbalanced quoting: {exc}")
        self.command(words[0], words[1:])

    def command(self, name: str, args=()) -> None:
        """Run one meta-command; the CLI subcommands route through here."""
        handler = self._COMMANDS.get(name)
        if handler is None:
            raise UsageError(f"unknown command {name}; try :help")
        handler(self, list(args))

    # -- generation and preview -------------------------------------

    def _generate(self, prompt: str) -> None:
        if self.backend is None:
            self.backend = get_backend()
        self.artifact = generate_from_prompt(self.store, prompt, self.backend)
        self._preview()

    def _need_artifact(self) -> ScriptArtifact:
        if self.artifact is None:
            raise UsageError(
                "no artifact in this session; enter a prompt first"
            )
        return self.artifact

    def _preview(self) -> None:
        art = self._need_artifact()
        self.say(f"artifact {art.artifact_id}")
        shell = lower_to_shell(art).rstrip("\n")
        for line in shell.split("\n"):
            self.say(f"  {line}")
        if art.tasks:
            self.say("tasks:")
            for task in art.tasks:
                label = task.task_prompt or task.command
                suffix = "  [opaque]" if task.opaque else ""
                self.say(f"  {task.task_id}: {label}{suffix}")
        for line in self._egress_warnings(art):
            self.say(line)
        if art.has_warnings:
            self.say("warning: opaque script; effects cannot be analyzed "
                     "before running")
        self.say("preview only; nothing has run (use :run to execute)")

    def _egress_warnings(self, art: ScriptArtifact) -> list:
        """One line per planned external call, with known input paths."""
        lines = []
        tasks = art.task_map()
        for node in art.workflow.nodes:
            if not isinstance(node, TaskNode):
                continue
            task = tasks.get(node.task_id)
            if task is None or not task.egress:
                continue
            lines.append(
                f"egress: node {node.node_id} calls {task.command}; "
                "held for approval at run time"
            )
            for var, expr in node.bindings:
                if task.role_of(var) != "input-file":
                    continue
                if isinstance(expr, PLit):
                    mark = " [SENSITIVE]" if is_sensitive(expr.text) else ""
                    lines.append(f"    reads: {expr.text}{mark}")
        return lines

    def load_artifact(self, artifact_id: str) -> None:
        self.artifact = parse_artifact(
            self.store.load_artifact_text(artifact_id)
        )

    # -- commands ---------------------------------------------------

    def _cmd_help(self, args) -> None:
        self.say(_HELP)

    def _cmd_show(self, args) -> None:
        self._preview()

    def _cmd_quit(self, args) -> None:
        self.done = True

    def _cmd_allow_net(self, args) -> None:
        self.config = replace(
            self.config,
            network="allow",
            network_provenance=("session :allow-net", now_iso()),
        )
        self.say("network egress enabled for this session "
                 "(default is deny)")

    def _cmd_run(self, args) -> None:
        if args:
            raise UsageError(":run takes no arguments")
        art = self._need_artifact()
        gate = Gate(self.store, self.config.egress_allowlist)
        report = run(self.store, art, self.config, gate=gate)
        self.last_epoch = report.epoch_id
        self._report(report)
        while report.pending_egress:
            batches = gate.batch_prompts(node_dependency_map(art))
            if not batches:
                break
            batch = batches[0]
            self.say(render_prompt(batch).rstrip("\n"))
            decisions = self._decide(batch)
            if decisions is None:
                self.say("requests left pending; deferred nodes did not run")
                break
            gate.resolve(batch.batch_id, decisions)
            report = resume(self.store, art, self.config, report.epoch_id,
                            gate=gate)
            self.last_epoch = report.epoch_id
            self._report(report)

    def _decide(self, batch) -> dict | None:
        rids = [r.request_id for r in batch.requests]
        if self.egress_policy == "approve-all":
            self.say(f"policy approve-all: approving {len(rids)} request(s)")
            return {rid: APPROVE for rid in rids}
        if self.egress_policy == "deny-all":
            self.say(f"policy deny-all: denying {len(rids)} request(s)")
            return {rid: DENY for rid in rids}
        while True:
            reply = self.ask(
                f"approve all, deny all, or {len(rids)} y/n tokens? [a/d] "
            )
            if reply is None:
                return None
            reply = reply.lower()
            if reply in ("a", "all", "approve", "approve-all"):
                return {rid: APPROVE for rid in rids}
            if reply in ("d", "deny", "deny-all", "none"):
                return {rid: DENY for rid in rids}
            tokens = reply.split()
            if len(tokens) == len(rids) and all(
                t in ("y", "yes", "n", "no") for t in tokens
            ):
                return {
                    rid: APPROVE if t.startswith("y") else DENY
                    for rid, t in zip(rids, tokens)
                }
            self.say(f"need 'a', 'd', or exactly {len(rids)} y/n tokens")

    def _report(self, report) -> None:
        for res in report.nodes:
            line = f"  {res.node_id}: {res.status}"
            if res.reason:
                line += f" ({res.reason})"
            self.say(line)
        summary = summarize(load_layer(self.store, report.epoch_id),
                            self.store)
        self.say(self._inline_summary(summary))
        tail = f"epoch {report.epoch_id} sealed"
        if report.pending_egress:
            tail += f"; {len(report.pending_egress)} egress request(s) pending"
        ok = "ok" if report.ok else "with failures"
        self.say(f"{tail} ({ok}); :effects for details, "
                 f":undo {report.epoch_id} to revert")

    def _inline_summary(self, summary) -> str:
        """Totals plus top-level directories; :effects has the rest."""
        if summary.is_empty:
            return "no effects"
        totals = summary.totals
        parts = [
            f"{totals[cat]} {cat.replace('_', ' ')}"
            for cat in ("added", "deleted", "content_modified",
                        "metadata_modified", "renamed")
            if totals.get(cat)
        ]
        head = ", ".join(parts) + f" (net {totals.get('net_bytes', 0):+d} B)"
        top: dict = {}
        for parent, counts in summary.dir_rollup.items():
            key = parent.split("/")[0]
            bucket = top.setdefault(key, {})
            for cat, n in counts.items():
                bucket[cat] = bucket.get(cat, 0) + n
        lines = [head]
        for key in sorted(top):
            bits = ", ".join(
                f"{n} {cat.replace('_', ' ')}"
                for cat, n in sorted(top[key].items())
            )
            lines.append(f"  {key}/: {bits}")
        return "\n".join(lines)

    def _cmd_effects(self, args) -> None:
        epoch_id = self._epoch_arg(args, default=self.last_epoch)
        summary = summarize(load_layer(self.store, epoch_id), self.store)
        self.say(render_human(summary, cwd=self._rel_cwd()).rstrip("\n"))

    def _cmd_undo(self, args) -> None:
        epoch_id = None
        paths: list = []
        force = False
        it = iter(args)
        for arg in it:
            if arg == "--path":
                value = next(it, None)
                if value is None:
                    raise UsageError("--path needs a value")
                paths.append(value)
            elif arg == "--force":
                force = True
            elif epoch_id is None:
                epoch_id = _int_arg(arg)
            else:
                raise UsageError(f"unexpected argument {arg!r}")
        if epoch_id is None:
            raise UsageError("usage: :undo <epoch> [--path P]... [--force]")
        if paths:
            report = restore_paths(self.store, epoch_id, paths, force=force)
        else:
            report = abort(self.store, epoch_id, force=force)
        for path, action in report.restored:
            self.say(f"  restored {path} ({action})")
        for path, reason in report.skipped:
            self.say(f"  skipped {path}: {reason}")
        self.say(f"epoch {epoch_id}: {len(report.restored)} restored, "
                 f"{len(report.skipped)} skipped")
        if report.skipped and not force:
            self.say("  (re-run with --force to restore anyway)")

    def _cmd_commit(self, args) -> None:
        if len(args) != 1:
            raise UsageError("usage: :commit <epoch>")
        epoch_id = _int_arg(args[0])
        commit(self.store, epoch_id)
        self.say(f"epoch {epoch_id} committed (undo data discarded)")

    def _cmd_history(self, args) -> None:
        records = list_history(self.store)
        if not records:
            self.say("no epochs yet")
            return
        for rec in records:
            totals = rec["totals"]
            bits = ", ".join(
                f"{totals[cat]} {cat.replace('_', ' ')}"
                for cat in ("added", "deleted", "content_modified",
                            "metadata_modified", "renamed")
                if totals.get(cat)
            )
            line = f"epoch {rec['epoch_id']} [{rec['state']}]"
            if rec["description"]:
                line += f" {rec['description']}"
            if bits:
                line += f" — {bits}"
            if rec["recovered"]:
                line += " [recovered]"
            self.say(line)

    def _cmd_testgen(self, args) -> None:
        art = self._need_artifact()
        seed = None
        it = iter(args)
        for arg in it:
            if arg == "--seed":
                value = next(it, None)
                if value is None:
                    raise UsageError("--seed needs a value")
                seed = _int_arg(value)
            else:
                raise UsageError(f"unexpected argument {arg!r}")
        bounds = derive_bounds(extract_paths(art))
        environments = None
        if seed is not None:
            environments = [random_env(bounds, seed + i) for i in range(8)]
        report = coverage_run(self.store, art, environments=environments,
                              bounds=bounds)
        self.say(report.render_table().rstrip("\n"))
        for idx, message in report.errors:
            self.say(f"  note: environment {idx}: {message}")

    def _cmd_feedback(self, args) -> None:
        art = self._need_artifact()
        if len(args) != 1:
            raise UsageError("usage: :feedback <example-id>")
        if self.last_epoch is None:
            raise UsageError("no run to snapshot; use :run first")
        example = example_from_epoch(
            self.store, self.last_epoch, args[0],
            prompt_context=art.nl_prompt,
        )
        record_feedback(self.store, art.artifact_id, example)
        self.say(f"recorded example {args[0]} for {art.artifact_id} "
                 f"({len(example.environment.tree)} tree entries)")
        for res in run_regression(self.store, art, [example]):
            verdict = "pass" if res.passed else f"FAIL: {res.detail}"
            self.say(f"  replay {res.example_id}: {verdict}")

    # -- helpers ----------------------------------------------------

    def _epoch_arg(self, args, default=None) -> int:
        if len(args) > 1:
            raise UsageError("at most one epoch id")
        if args:
            return _int_arg(args[0])
        if default is None:
            raise UsageError("no epoch to show; pass an id or :run first")
        return default

    def _rel_cwd(self) -> str | None:
        rel = os.path.relpath(os.getcwd(), self.config.guard_root)
        if rel == ".":
            return "."
        if rel.startswith(".."):
            return None
        return rel

    _COMMANDS = {
        ":help": _cmd_help,
        ":show": _cmd_show,
        ":run": _cmd_run,
        ":effects": _cmd_effects,
        ":undo": _cmd_undo,
        ":commit": _cmd_commit,
        ":history": _cmd_history,
        ":testgen": _cmd_testgen,
        ":feedback": _cmd_feedback,
        ":allow-net": _cmd_allow_net,
        ":quit": _cmd_quit,
    }


def _int_arg(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise UsageError(f"expected an integer, got {text!r}")


def run_session(session: Session) -> None:
    """Read lines until :quit or end of input."""
    session.say("nash — type a request in plain language, :help for commands")
    while not session.done:
        line = session.ask(PROMPT)
        if line is None:
            break
        session.dispatch(line)
