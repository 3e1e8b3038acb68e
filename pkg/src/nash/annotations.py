"""Command annotation records: declarative behavior facts for black-box tools.

Each record describes a command's flags (with arity and, for flags whose
value names a file, the value's role), the roles of its positional
operands, and a coarse effect class.  The shell reader uses roles to type
adapter-task operands and infer data edges; test generation uses effect
classes and flag domains; the egress gate uses input roles for taint.

One JSON document per command.  The package ships a starter set; a user
directory can add or override records.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import AnnotationError

EFFECT_CLASSES = ("reads-only", "writes-operands", "deletes-operands")


@dataclass(frozen=True)
class FlagSpec:
    flag: str
    arity: int = 0
    values: tuple = ()  # sample domain for fallback input generation
    value_role: str | None = None  # role of the flag's value when it is a file


@dataclass(frozen=True)
class OperandSpec:
    role: str  # input-file | output-file | other
    repeat: bool = False


@dataclass(frozen=True)
class AnnotationRecord:
    command: str
    flags: tuple = ()
    operands: tuple = ()
    effect_class: str = "reads-only"

    def flag(self, name: str) -> FlagSpec | None:
        for f in self.flags:
            if f.flag == name:
                return f
        return None

    def operand_roles(self, count: int) -> list:
        """Assign roles to `count` positional operands.

        At most one operand spec may repeat; it absorbs the middle.
        """
        specs = list(self.operands)
        repeat_idx = next((i for i, s in enumerate(specs) if s.repeat), None)
        if repeat_idx is None:
            roles = [s.role for s in specs[:count]]
            roles += ["other"] * (count - len(roles))
            return roles
        head = specs[:repeat_idx]
        tail = specs[repeat_idx + 1 :]
        roles = []
        for i in range(count):
            if i < len(head):
                roles.append(head[i].role)
            elif count - i <= len(tail):
                roles.append(tail[len(tail) - (count - i)].role)
            else:
                roles.append(specs[repeat_idx].role)
        return roles


def _parse_record(doc: dict, origin: str) -> AnnotationRecord:
    try:
        command = doc["command"]
        flags = tuple(
            FlagSpec(
                flag=f["flag"],
                arity=int(f.get("arity", 0)),
                values=tuple(f.get("values", ())),
                value_role=f.get("value_role"),
            )
            for f in doc.get("flags", ())
        )
        operands = tuple(
            OperandSpec(role=o["role"], repeat=bool(o.get("repeat", False)))
            for o in doc.get("operands", ())
        )
        effect = doc.get("effect_class", "reads-only")
    except (KeyError, TypeError, ValueError) as exc:
        raise AnnotationError(f"{origin}: malformed annotation ({exc})") from exc
    if effect not in EFFECT_CLASSES:
        raise AnnotationError(f"{origin}: unknown effect class {effect!r}")
    if sum(1 for o in operands if o.repeat) > 1:
        raise AnnotationError(f"{origin}: more than one repeating operand")
    for o in operands:
        if o.role not in ("input-file", "output-file", "other"):
            raise AnnotationError(f"{origin}: unknown operand role {o.role!r}")
    if effect == "reads-only" and any(o.role == "output-file" for o in operands):
        raise AnnotationError(f"{origin}: reads-only command with output operand")
    if effect in ("writes-operands", "deletes-operands") and not any(
        o.role != "other" for o in operands
    ):
        raise AnnotationError(f"{origin}: {effect} command with no file operands")
    return AnnotationRecord(command, flags, operands, effect)


class AnnotationLibrary:
    """The packaged starter records plus optional user directories."""

    def __init__(self, extra_dirs: list | None = None):
        self._records: dict[str, AnnotationRecord] = {}
        self._load_packaged()
        for d in extra_dirs or []:
            self.load_dir(Path(d))

    def _load_packaged(self):
        pkg = resources.files(__package__) / "annotations"
        for entry in sorted(pkg.iterdir(), key=lambda e: e.name):
            if entry.name.endswith(".json"):
                doc = json.loads(entry.read_text())
                rec = _parse_record(doc, f"annotations/{entry.name}")
                self._records[rec.command] = rec

    def load_dir(self, directory: Path):
        for path in sorted(directory.glob("*.json")):
            try:
                doc = json.loads(path.read_text())
            except ValueError as exc:
                raise AnnotationError(f"{path}: invalid JSON ({exc})") from exc
            rec = _parse_record(doc, str(path))
            self._records[rec.command] = rec

    def lookup(self, command: str) -> AnnotationRecord | None:
        return self._records.get(command)

    def commands(self) -> list:
        return sorted(self._records)


_default: AnnotationLibrary | None = None


def default_library() -> AnnotationLibrary:
    global _default
    if _default is None:
        _default = AnnotationLibrary()
    return _default


def lookup_annotation(command: str) -> AnnotationRecord | None:
    """Record for `command` from the default library, or None if absent."""
    return default_library().lookup(command)
