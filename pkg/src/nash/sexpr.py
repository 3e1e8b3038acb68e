"""Minimal S-expression reader/printer for the artifact file format.

Forms are lists; atoms are `Symbol` (a str subclass) and double-quoted
strings are plain `str` with JSON escaping.  The reader tracks line/column
so artifact syntax errors can point at a position.
"""

import json

from .errors import ArtifactSyntaxError


class Symbol(str):
    """Bare atom, distinct from a quoted string."""

    __slots__ = ()

    def __repr__(self):  # pragma: no cover - debug aid
        return f"Symbol({str.__repr__(self)})"


def read_all(text: str, start_line: int = 1):
    """Parse every top-level form in `text`.

    Returns a list of (form, line) pairs, `line` being where the form opened.
    """
    forms = []
    pos = 0
    n = len(text)
    line = start_line
    col = 1

    def error(msg):
        raise ArtifactSyntaxError(msg, line, col)

    def advance(ch):
        nonlocal line, col
        if ch == "\n":
            line += 1
            col = 1
        else:
            col += 1

    stack = []  # (list, open_line)
    while pos < n:
        ch = text[pos]
        if ch in " \t\r\n":
            advance(ch)
            pos += 1
            continue
        if ch == ";":  # comment to end of line
            while pos < n and text[pos] != "\n":
                pos += 1
            continue
        if ch == "(":
            stack.append(([], line))
            advance(ch)
            pos += 1
            continue
        if ch == ")":
            if not stack:
                error("unbalanced ')'")
            done, open_line = stack.pop()
            if stack:
                stack[-1][0].append(done)
            else:
                forms.append((done, open_line))
            advance(ch)
            pos += 1
            continue
        if ch == '"':
            end = pos + 1
            while end < n:
                if text[end] == "\\":
                    end += 2
                    continue
                if text[end] == '"':
                    break
                end += 1
            if end >= n:
                error("unterminated string")
            raw = text[pos : end + 1]
            try:
                value = json.loads(raw)
            except ValueError:
                error(f"bad string literal {raw!r}")
            if not stack:
                error("string outside any form")
            stack[-1][0].append(value)
            for c in raw:
                advance(c)
            pos = end + 1
            continue
        # bare atom
        end = pos
        while end < n and text[end] not in ' \t\r\n()";':
            end += 1
        atom = Symbol(text[pos:end])
        if not stack:
            error(f"atom {atom!r} outside any form")
        stack[-1][0].append(atom)
        for c in text[pos:end]:
            advance(c)
        pos = end
    if stack:
        _, open_line = stack[-1]
        raise ArtifactSyntaxError("unbalanced '('", open_line, None)
    return forms


def dumps(form) -> str:
    """Print one form canonically: single spaces, JSON-escaped strings."""
    if isinstance(form, Symbol):
        return str(form)
    if isinstance(form, str):
        return json.dumps(form, ensure_ascii=True)
    if isinstance(form, (list, tuple)):
        return "(" + " ".join(dumps(x) for x in form) + ")"
    raise TypeError(f"cannot print {type(form).__name__} as an s-expression")
