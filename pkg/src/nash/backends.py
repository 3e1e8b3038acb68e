"""Prompt-to-text generation backends: a deterministic mock and an HTTP client.

A backend answers three kinds of prompts, each with plain text:

- ``decompose``: the reply opens with a workflow prompt, followed by one
  ``%% task N`` section per task prompt, numbered from 1.  The workflow
  prompt refers to each task by its number ("task 1", "task 2", ...).
- ``workflow``: the reply is restricted shell for the composition grammar,
  invoking the decomposed tasks as pseudo-commands ``t1`` .. ``tN``.
- ``task``: the reply is a single command line whose parameters are the
  positionals ``$1`` .. ``$9``.

The mock backend resolves prompts against a first-match regex rule table
and is a pure function of (kind, prompt, rules) — the test substrate for
the whole generation pipeline.  The HTTP backend speaks a minimal
chat-completion wire format and treats bodies as opaque text plus a
system preamble per prompt kind.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from importlib import resources
from urllib import error as urlerror
from urllib import request as urlrequest

from .errors import BackendError, UsageError
from .util import canon_json, sha256_bytes

KIND_DECOMPOSE = "decompose"
KIND_WORKFLOW = "workflow"
KIND_TASK = "task"
PROMPT_KINDS = (KIND_DECOMPOSE, KIND_WORKFLOW, KIND_TASK)

_SECTION = re.compile(r"^%%\s*(.+?)\s*$")


@dataclass(frozen=True)
class BackendDescriptor:
    backend_id: str
    kind: str  # mock | http
    endpoint: str = ""
    model: str = ""


def split_sections(text: str):
    """Split marked-up text into (head, [(label, body), ...]).

    A line of the form ``%% label`` opens a new section; the head is
    everything before the first marker.
    """
    head_lines = []
    sections = []
    current = head_lines
    for line in text.splitlines():
        m = _SECTION.match(line)
        if m:
            current = []
            sections.append((m.group(1), current))
        else:
            current.append(line)
    head = "\n".join(head_lines).strip()
    return head, [(label, "\n".join(body).strip()) for label, body in sections]


# ---------------------------------------------------------------------------
# mock backend


@dataclass(frozen=True)
class MockRule:
    kind: str
    pattern: str
    response: str
    name: str = ""


def _parse_rules(doc: dict, origin: str) -> tuple:
    if not isinstance(doc, dict) or not isinstance(doc.get("rules"), list):
        raise BackendError(f"{origin}: rule table must be {{'rules': [...]}}")
    rules = []
    for i, entry in enumerate(doc["rules"]):
        try:
            kind = entry["kind"]
            pattern = entry["pattern"]
            response = entry["response"]
        except (TypeError, KeyError) as exc:
            raise BackendError(f"{origin}: rule {i} is malformed ({exc})") from exc
        if kind not in PROMPT_KINDS:
            raise BackendError(f"{origin}: rule {i} has unknown kind {kind!r}")
        if isinstance(response, list):
            response = "\n".join(response)
        try:
            re.compile(pattern)
        except re.error as exc:
            raise BackendError(f"{origin}: rule {i} pattern: {exc}") from exc
        rules.append(MockRule(kind, pattern, response, entry.get("name", "")))
    return tuple(rules)


def packaged_rules() -> tuple:
    """The rule table shipped with the package."""
    text = (resources.files(__package__) / "mockrules" / "default.json").read_text()
    return _parse_rules(json.loads(text), "mockrules/default.json")


def rules_from_path(path: str) -> tuple:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise BackendError(f"cannot read rule table {path}: {exc}") from exc
    except ValueError as exc:
        raise BackendError(f"{path}: invalid JSON ({exc})") from exc
    return _parse_rules(doc, path)


class MockBackend:
    """Deterministic rule-table backend: first matching rule answers."""

    def __init__(self, rules: tuple | None = None):
        self.rules = tuple(rules) if rules is not None else packaged_rules()
        table = [
            {"kind": r.kind, "pattern": r.pattern, "response": r.response}
            for r in self.rules
        ]
        digest = sha256_bytes(canon_json(table).encode("utf-8"))[:12]
        self.descriptor = BackendDescriptor(
            backend_id=f"mock:{digest}", kind="mock", model="rules"
        )

    def complete(self, kind: str, prompt: str) -> str:
        if kind not in PROMPT_KINDS:
            raise UsageError(f"unknown prompt kind {kind!r}")
        for rule in self.rules:
            if rule.kind != kind:
                continue
            m = re.search(rule.pattern, prompt)
            if m:
                return m.expand(rule.response)
        raise BackendError(
            f"mock backend has no {kind} rule matching prompt {prompt!r}"
        )


# ---------------------------------------------------------------------------
# http backend

_PREAMBLES = {
    KIND_DECOMPOSE: (
        "Split the user's request into one workflow prompt and one or more "
        "task prompts. Reply with the workflow prompt first, then a line "
        "'%% task N' before each task prompt, numbering tasks from 1. The "
        "workflow prompt must refer to every task by its number, e.g. "
        "'apply task 1 to each file'. No other commentary."
    ),
    KIND_WORKFLOW: (
        "Write the workflow as restricted POSIX shell using only: simple "
        "commands, 'for NAME in GLOB; do ...; done', and 'if [ ... ]; then "
        "...; else ...; fi' with tests -f/-d/-e, string =/!= comparison, "
        "\"${VAR##*.}\" for the extension, '!' and '&&'. Invoke task N as "
        "the pseudo-command tN with its arguments. No pipes, redirection, "
        "subshells, or command lists. Reply with the script only."
    ),
    KIND_TASK: (
        "Write one command line implementing the task, using \"$1\", "
        "\"$2\", ... for its parameters, each as a whole argument. Reply "
        "with the single line only."
    ),
}


class HttpBackend:
    """Minimal chat-completion-style client; bodies are opaque text."""

    def __init__(self, endpoint: str, api_key: str = "", model: str = "",
                 opener=None, timeout: float = 60.0):
        if not endpoint:
            raise UsageError("http backend needs an endpoint URL")
        self.endpoint = endpoint
        self.api_key = api_key
        self.model = model or "default"
        self.opener = opener or urlrequest.urlopen
        self.timeout = timeout
        self.descriptor = BackendDescriptor(
            backend_id=f"http:{self.model}",
            kind="http",
            endpoint=endpoint,
            model=self.model,
        )

    def complete(self, kind: str, prompt: str) -> str:
        if kind not in PROMPT_KINDS:
            raise UsageError(f"unknown prompt kind {kind!r}")
        body = json.dumps(
            {
                "model": self.model,
                "temperature": 0,
                "messages": [
                    {"role": "system", "content": _PREAMBLES[kind]},
                    {"role": "user", "content": prompt},
                ],
            }
        ).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urlrequest.Request(
            self.endpoint, data=body, headers=headers, method="POST"
        )
        try:
            with self.opener(req, timeout=self.timeout) as resp:
                raw = resp.read()
        except (urlerror.URLError, OSError) as exc:
            raise BackendError(f"model endpoint unreachable: {exc}") from exc
        try:
            doc = json.loads(raw.decode("utf-8"))
            content = doc["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(
                f"model endpoint returned an unexpected body: {exc}"
            ) from exc
        if not isinstance(content, str):
            raise BackendError("model endpoint returned non-text content")
        return content


def get_backend(env=None):
    """Build the backend selected by NASH_BACKEND (mock is the default)."""
    env = os.environ if env is None else env
    name = env.get("NASH_BACKEND", "mock")
    if name == "mock":
        path = env.get("NASH_MOCK_RULES")
        rules = rules_from_path(path) if path else None
        return MockBackend(rules)
    if name == "http":
        return HttpBackend(
            endpoint=env.get("NASH_MODEL_ENDPOINT", ""),
            api_key=env.get("NASH_MODEL_KEY", ""),
            model=env.get("NASH_MODEL", ""),
        )
    raise UsageError(f"unknown backend {name!r} (expected mock or http)")
