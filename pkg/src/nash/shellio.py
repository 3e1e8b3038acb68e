"""Shell rendering and reading for the composition language.

`lower_to_shell` prints an artifact as an equivalent POSIX shell script so
users can read or export it.  `shell_to_artifact` reads the restricted
shell subset back into a workflow: `for NAME in GLOB`, `if`/`else` over
`[ ... ]` tests joined with `&&`/`||`/`!`, and simple commands.  Pipes,
redirection, subshells and other constructs are out of grammar and raise
`ShellOutOfGrammar`; callers wrap such scripts as opaque artifacts.

Operand roles come from the annotation library; data edges are inferred
by matching an earlier output operand's expression with a later input
operand's expression.  Consecutive unannotated commands get conservative
control edges, since nothing is known about their behavior.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from . import annotations as annot
from .artifact import (
    DEFAULT_EGRESS_ALLOWLIST,
    AdapterTask,
    And,
    Edge,
    Exists,
    ExtEq,
    ForEachNode,
    IfNode,
    IsDir,
    IsFile,
    LitSeg,
    Not,
    PBase,
    PConcat,
    PDir,
    PLit,
    PStripExt,
    PVar,
    ScriptArtifact,
    SeqNode,
    StrEq,
    TaskNode,
    VarSeg,
    WorkflowGraph,
    finalize,
    negate,
)
from .errors import ShellOutOfGrammar

# ---------------------------------------------------------------------------
# lowering


def _shell_quote_lit(text: str, force_quotes: bool = False) -> str:
    if text and not force_quotes and re.fullmatch(r"[\w@%+=:,./-]+", text):
        return text
    return "'" + text.replace("'", "'\\''") + "'"


def _dq_escape(text: str) -> str:
    out = []
    for ch in text:
        if ch in '"\\$`':
            out.append("\\" + ch)
        else:
            out.append(ch)
    return "".join(out)


def _expr_dq(expr, braced: bool = False) -> str:
    """Render a path expression as the inside of a double-quoted word."""
    if isinstance(expr, PVar):
        return f"${{{expr.name}}}" if braced else f"${expr.name}"
    if isinstance(expr, PLit):
        return _dq_escape(expr.text)
    if isinstance(expr, PBase):
        return f'$(basename "{_expr_dq(expr.inner)}")'
    if isinstance(expr, PDir):
        return f'$(dirname "{_expr_dq(expr.inner)}")'
    if isinstance(expr, PStripExt):
        if isinstance(expr.inner, PVar):
            return f"${{{expr.inner.name}%.*}}"
        return f'$(s="{_expr_dq(expr.inner)}"; printf \'%s\' "${{s%.*}}")'
    if isinstance(expr, PConcat):
        out = []
        parts = expr.parts
        for idx, p in enumerate(parts):
            follower = parts[idx + 1] if idx + 1 < len(parts) else None
            brace = (
                isinstance(p, PVar)
                and isinstance(follower, PLit)
                and bool(re.match(r"[A-Za-z0-9_]", follower.text or " "))
            )
            out.append(_expr_dq(p, braced=brace))
        return "".join(out)
    raise TypeError(f"not a path expression: {expr!r}")


def _expr_word(expr) -> str:
    return f'"{_expr_dq(expr)}"'


def _ext_of_word(expr) -> str:
    if isinstance(expr, PVar):
        return f'"${{{expr.name}##*.}}"'
    return f'"$(s="{_expr_dq(expr)}"; printf \'%s\' "${{s##*.}}")"'


def _render_atom(pred, negated: bool) -> str:
    if isinstance(pred, IsFile):
        core = f"[ -f {_expr_word(pred.path)} ]"
    elif isinstance(pred, IsDir):
        core = f"[ -d {_expr_word(pred.path)} ]"
    elif isinstance(pred, Exists):
        core = f"[ -e {_expr_word(pred.path)} ]"
    elif isinstance(pred, ExtEq):
        op = "!=" if negated else "="
        return f'[ {_ext_of_word(pred.path)} {op} "{_dq_escape(pred.ext)}" ]'
    elif isinstance(pred, StrEq):
        op = "!=" if negated else "="
        return f"[ {_expr_word(pred.left)} {op} {_expr_word(pred.right)} ]"
    else:
        raise TypeError(f"not an atom: {pred!r}")
    return f"! {core}" if negated else core


def _render_pred(pred, under_and: bool = False) -> str:
    """Render a predicate as a shell condition list.

    `&&` and `||` bind equally in shell, so or-level expressions are brace
    grouped whenever they sit under a conjunction.
    """
    if isinstance(pred, And):
        return " && ".join(_render_pred(p, under_and=True) for p in pred.parts)
    if isinstance(pred, Not):
        inner = pred.inner
        if isinstance(inner, And):
            # De Morgan: ! (a && b)  ->  { ! a || ! b; }
            parts = " || ".join(_render_pred(negate(p)) for p in inner.parts)
            return "{ " + parts + "; }" if under_and else parts
        return _render_atom(inner, negated=True)
    return _render_atom(pred, negated=False)


def lower_to_shell(artifact: ScriptArtifact) -> str:
    """Equivalent POSIX shell rendering for display and export."""
    wf = artifact.workflow
    node_map = wf.node_map()
    task_map = artifact.task_map()
    lines = ["#!/bin/sh"]

    producers = {}  # (node_id, role) -> binding expr, for data-edge resolution
    for node in wf.nodes:
        if isinstance(node, TaskNode):
            for var, expr in node.bindings:
                producers[(node.node_id, var)] = expr
    in_edges = {}
    for e in wf.edges:
        if e.kind == "data":
            in_edges[(e.dst, e.dst_role)] = (e.src, e.src_role)

    def resolve(node: TaskNode, var: str, loop_vars: set):
        for v, expr in node.bindings:
            if v == var:
                return expr
        if var in loop_vars:
            return PVar(var)
        if (node.node_id, var) in in_edges:
            src, src_role = in_edges[(node.node_id, var)]
            return resolve(node_map[src], src_role, loop_vars)
        raise TypeError(f"unresolvable variable ${var} in node {node.node_id}")

    def emit_task(node: TaskNode, indent: str, loop_vars: set):
        task = task_map[node.task_id]
        if task.opaque:
            for raw in (task.script or "").splitlines():
                lines.append(indent + raw)
            return
        words = [task.command]
        for seg in task.argv:
            if isinstance(seg, LitSeg):
                words.append(_shell_quote_lit(seg.text))
            else:
                words.append(_expr_word(resolve(node, seg.name, loop_vars)))
        lines.append(indent + " ".join(words))

    def emit(node_id: str, depth: int, loop_vars: set):
        node = node_map[node_id]
        indent = "  " * depth
        if isinstance(node, TaskNode):
            emit_task(node, indent, loop_vars)
        elif isinstance(node, SeqNode):
            for child in node.children:
                emit(child, depth, loop_vars)
        elif isinstance(node, ForEachNode):
            lines.append(f"{indent}for {node.var} in {node.glob}; do")
            emit(node.body, depth + 1, loop_vars | {node.var})
            lines.append(f"{indent}done")
        elif isinstance(node, IfNode):
            lines.append(f"{indent}if {_render_pred(node.pred)}; then")
            if node.then:
                emit(node.then, depth + 1, loop_vars)
            else:
                lines.append(f"{indent}  :")
            if node.els:
                lines.append(f"{indent}else")
                emit(node.els, depth + 1, loop_vars)
            lines.append(f"{indent}fi")
        else:
            raise TypeError(node)

    emit(wf.root, 0, set())
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# reading: tokenizer


@dataclass
class Tok:
    kind: str  # "word" | "op" | "nl"
    value: object
    line: int


_KEYWORDS = {"for", "in", "do", "done", "if", "then", "elif", "else", "fi"}


@dataclass
class Word:
    """One shell word as parsed segments mapping onto a path expression."""

    parts: list = field(default_factory=list)  # PathExpr | ("ext"|"strip", expr)
    has_glob: bool = False
    line: int = 0

    def literal_text(self) -> str | None:
        if len(self.parts) == 1 and isinstance(self.parts[0], PLit):
            return self.parts[0].text
        if not self.parts:
            return ""
        return None

    def to_expr(self):
        plain = []
        for p in self.parts:
            if isinstance(p, tuple):
                raise ShellOutOfGrammar(
                    "extension extraction only usable in comparisons", self.line
                )
            plain.append(p)
        if not plain:
            return PLit("")
        if len(plain) == 1:
            return plain[0]
        # fold adjacent literals for a canonical concat
        folded = []
        for p in plain:
            if isinstance(p, PLit) and folded and isinstance(folded[-1], PLit):
                folded[-1] = PLit(folded[-1].text + p.text)
            else:
                folded.append(p)
        return folded[0] if len(folded) == 1 else PConcat(tuple(folded))

    def special(self) -> tuple | None:
        """("ext"|"strip", expr) when the word is exactly one extraction."""
        if len(self.parts) == 1 and isinstance(self.parts[0], tuple):
            return self.parts[0]
        return None


_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*|\d+")
_SUBSHELL_EXT = re.compile(
    r"^(\w+)=(.*); printf '%s' \"\$\{\1(##\*\.|%\.\*)\}\"$"
)


def _find_close_paren(text: str, start: int) -> int:
    depth = 1
    i = start
    in_sq = in_dq = False
    while i < len(text):
        ch = text[i]
        if in_sq:
            if ch == "'":
                in_sq = False
        elif ch == "\\":
            i += 1
        elif in_dq:
            if ch == '"':
                in_dq = False
        elif ch == "'":
            in_sq = True
        elif ch == '"':
            in_dq = True
        elif ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth == 0:
                return i
        i += 1
    return -1


class _Scanner:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.line = 1

    def error(self, msg):
        raise ShellOutOfGrammar(msg, self.line)

    def _advance_over(self, chunk: str):
        self.line += chunk.count("\n")

    def _read_dollar(self, text, i, word, line):
        """Parse $var, ${var...}, $(cmd) starting at text[i] == '$'."""
        n = len(text)
        if i + 1 < n and text[i + 1] == "{":
            end = text.find("}", i + 2)
            if end < 0:
                self.error("unterminated ${...}")
            body = text[i + 2 : end]
            m = re.fullmatch(r"(\w+)", body)
            if m:
                word.parts.append(PVar(m.group(1)))
                return end + 1
            m = re.fullmatch(r"(\w+)##\*\.", body)
            if m:
                word.parts.append(("ext", PVar(m.group(1))))
                return end + 1
            m = re.fullmatch(r"(\w+)%\.\*", body)
            if m:
                word.parts.append(PStripExt(PVar(m.group(1))))
                return end + 1
            self.error(f"unsupported parameter expansion ${{{body}}}")
        if i + 1 < n and text[i + 1] == "(":
            if i + 2 < n and text[i + 2] == "(":
                self.error("arithmetic expansion is out of grammar")
            close = _find_close_paren(text, i + 2)
            if close < 0:
                self.error("unterminated $(...)")
            inner = text[i + 2 : close]
            m = _SUBSHELL_EXT.match(inner)
            if m:
                inner_word = self._parse_word_text(m.group(2), line)
                kind = "ext" if m.group(3) == "##*." else "strip"
                if kind == "strip":
                    word.parts.append(PStripExt(inner_word.to_expr()))
                else:
                    word.parts.append(("ext", inner_word.to_expr()))
                return close + 1
            m = re.match(r"^\s*(basename|dirname)\s+(.*)$", inner, re.S)
            if not m:
                self.error(f"unsupported command substitution $({inner})")
            func, rest = m.group(1), m.group(2).strip()
            inner_word = self._parse_word_text(rest, line)
            expr = inner_word.to_expr()
            word.parts.append(PBase(expr) if func == "basename" else PDir(expr))
            return close + 1
        # plain $name
        m = _IDENT.match(text, i + 1)
        if not m:
            self.error("stray '$'")
        word.parts.append(PVar(m.group(0)))
        return m.end()

    def _parse_word_text(self, text: str, line: int) -> Word:
        """Parse a standalone word (used for substitution arguments)."""
        word = Word(line=line)
        i = 0
        n = len(text)
        while i < n:
            ch = text[i]
            if ch == '"':
                i = self._scan_dquote(text, i + 1, word, line)
            elif ch == "'":
                end = text.find("'", i + 1)
                if end < 0:
                    self.error("unterminated single quote")
                word.parts.append(PLit(text[i + 1 : end]))
                i = end + 1
            elif ch == "$":
                i = self._read_dollar(text, i, word, line)
            elif ch in " \t":
                self.error(f"expected a single word, got {text!r}")
            else:
                j = i
                while j < n and text[j] not in "\"'$ \t":
                    j += 1
                word.parts.append(PLit(text[i:j]))
                i = j
        return word

    def _scan_dquote(self, text, i, word, line) -> int:
        """Scan a double-quoted region starting just past the opening quote."""
        n = len(text)
        buf = []
        while i < n:
            ch = text[i]
            if ch == '"':
                if buf:
                    word.parts.append(PLit("".join(buf)))
                return i + 1
            if ch == "\\" and i + 1 < n and text[i + 1] in '"\\$`':
                buf.append(text[i + 1])
                i += 2
                continue
            if ch == "`":
                self.error("backquote substitution is out of grammar")
            if ch == "$":
                if buf:
                    word.parts.append(PLit("".join(buf)))
                    buf = []
                i = self._read_dollar(text, i, word, line)
                continue
            if ch == "\n":
                self.line += 1
            buf.append(ch)
            i += 1
        self.error("unterminated double quote")

    def tokens(self) -> list:
        text = self.text
        n = len(text)
        out = []
        i = 0
        while i < n:
            ch = text[i]
            if ch in " \t":
                i += 1
                continue
            if ch == "\\" and i + 1 < n and text[i + 1] == "\n":
                self.line += 1
                i += 2
                continue
            if ch == "\n":
                out.append(Tok("nl", "\n", self.line))
                self.line += 1
                i += 1
                continue
            if ch == "#":
                while i < n and text[i] != "\n":
                    i += 1
                continue
            if ch == ";":
                out.append(Tok("op", ";", self.line))
                i += 1
                continue
            if ch == "&":
                if i + 1 < n and text[i + 1] == "&":
                    out.append(Tok("op", "&&", self.line))
                    i += 2
                    continue
                self.error("background execution is out of grammar")
            if ch == "|":
                if i + 1 < n and text[i + 1] == "|":
                    out.append(Tok("op", "||", self.line))
                    i += 2
                    continue
                self.error("pipelines are out of grammar")
            if ch in "<>":
                self.error("redirection is out of grammar")
            if ch == "(" or ch == ")":
                self.error("subshells are out of grammar")
            if ch == "`":
                self.error("backquote substitution is out of grammar")
            # a word
            word = Word(line=self.line)
            start_line = self.line
            while i < n and text[i] not in " \t\n;&|<>()#":
                ch = text[i]
                if ch == "'":
                    end = text.find("'", i + 1)
                    if end < 0:
                        self.error("unterminated single quote")
                    word.parts.append(PLit(text[i + 1 : end]))
                    self._advance_over(text[i:end])
                    i = end + 1
                elif ch == '"':
                    i = self._scan_dquote(text, i + 1, word, start_line)
                elif ch == "$":
                    i = self._read_dollar(text, i, word, start_line)
                elif ch == "\\" and i + 1 < n:
                    word.parts.append(PLit(text[i + 1]))
                    i += 2
                elif ch == "`":
                    self.error("backquote substitution is out of grammar")
                else:
                    j = i
                    while j < n and text[j] not in " \t\n;&|<>()#'\"$\\`":
                        j += 1
                    chunk = text[i:j]
                    if any(c in chunk for c in "*?["):
                        word.has_glob = True
                    word.parts.append(PLit(chunk))
                    i = j
            out.append(Tok("word", word, start_line))
        out.append(Tok("nl", "<eof>", self.line))
        return out


# ---------------------------------------------------------------------------
# reading: statement parser


@dataclass
class _Simple:
    words: list
    line: int


@dataclass
class _For:
    var: str
    glob: str
    body: list
    line: int


@dataclass
class _If:
    pred: object
    then: list
    els: list
    line: int


class _Parser:
    def __init__(self, toks: list):
        self.toks = toks
        self.i = 0

    def peek(self) -> Tok:
        return self.toks[self.i]

    def next(self) -> Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def error(self, msg, tok=None):
        raise ShellOutOfGrammar(msg, (tok or self.peek()).line)

    def _kw(self, tok) -> str | None:
        if tok.kind == "word":
            lit = tok.value.literal_text()
            if lit in _KEYWORDS:
                return lit
        return None

    def skip_seps(self):
        while self.peek().kind == "nl" or (
            self.peek().kind == "op" and self.peek().value == ";"
        ):
            if self.peek().value == "<eof>":
                return
            self.next()

    def at_eof(self) -> bool:
        t = self.peek()
        return t.kind == "nl" and t.value == "<eof>"

    def parse_script(self) -> list:
        stmts = self.parse_stmts(stop=set())
        self.skip_seps()
        if not self.at_eof():
            self.error("trailing input")
        return stmts

    def parse_stmts(self, stop: set) -> list:
        out = []
        while True:
            self.skip_seps()
            if self.at_eof():
                return out
            t = self.peek()
            kw = self._kw(t)
            if kw in stop:
                return out
            if kw == "for":
                out.append(self.parse_for())
            elif kw == "if":
                out.append(self.parse_if())
            elif kw in _KEYWORDS:
                self.error(f"unexpected keyword {kw!r}")
            else:
                out.append(self.parse_simple())

    def expect_kw(self, kw):
        t = self.next()
        if self._kw(t) != kw:
            self.error(f"expected {kw!r}", t)
        return t

    def parse_for(self) -> _For:
        start = self.expect_kw("for")
        name_tok = self.next()
        name = name_tok.value.literal_text() if name_tok.kind == "word" else None
        if not name or not re.fullmatch(r"\w+", name):
            self.error("for needs a variable name", name_tok)
        self.expect_kw("in")
        glob_tok = self.next()
        if glob_tok.kind != "word":
            self.error("for needs a glob word", glob_tok)
        glob_lit = glob_tok.value.literal_text()
        if glob_lit is None:
            self.error("for glob must be a literal pattern", glob_tok)
        self.skip_seps()
        self.expect_kw("do")
        body = self.parse_stmts(stop={"done"})
        self.expect_kw("done")
        return _For(name, glob_lit, body, start.line)

    def parse_if(self) -> _If:
        start = self.expect_kw("if")
        pred = self.parse_cond()
        self.skip_seps()
        self.expect_kw("then")
        then = self.parse_stmts(stop={"else", "elif", "fi"})
        els = []
        t = self.peek()
        kw = self._kw(t)
        if kw == "else":
            self.next()
            els = self.parse_stmts(stop={"fi"})
        elif kw == "elif":
            # desugar: elif C; then ... -> else { if C; then ... fi }
            self.next()
            nested = self.parse_elif_chain()
            els = [nested]
        self.expect_kw("fi")
        return _If(pred, then, els, start.line)

    def parse_elif_chain(self) -> _If:
        pred = self.parse_cond()
        self.skip_seps()
        self.expect_kw("then")
        then = self.parse_stmts(stop={"else", "elif", "fi"})
        els = []
        kw = self._kw(self.peek())
        if kw == "else":
            self.next()
            els = self.parse_stmts(stop={"fi"})
        elif kw == "elif":
            self.next()
            els = [self.parse_elif_chain()]
        return _If(pred, then, els, self.peek().line)

    # condition grammar: or_expr with equal-precedence && chains and brace groups
    def parse_cond(self):
        return self.parse_or()

    def parse_or(self):
        left = self.parse_and()
        while self.peek().kind == "op" and self.peek().value == "||":
            self.next()
            right = self.parse_and()
            # a || b  ==  not (not a and not b)
            left = negate(And((negate(left), negate(right))))
        return left

    def parse_and(self):
        left = self.parse_cond_unary()
        parts = [left]
        while self.peek().kind == "op" and self.peek().value == "&&":
            self.next()
            parts.append(self.parse_cond_unary())
        if len(parts) == 1:
            return parts[0]
        return And(tuple(parts))

    def parse_cond_unary(self):
        t = self.peek()
        if t.kind == "word":
            lit = t.value.literal_text()
            if lit == "!":
                self.next()
                return negate(self.parse_cond_unary())
            if lit == "{":
                self.next()
                inner = self.parse_or()
                self.skip_seps()
                close = self.next()
                if close.kind != "word" or close.value.literal_text() != "}":
                    self.error("expected '}'", close)
                return inner
            if lit in ("[", "[["):
                return self.parse_test(lit)
        self.error("expected a test expression", t)

    def parse_test(self, opener: str):
        close = "]" if opener == "[" else "]]"
        self.next()  # consume opener
        words = []
        while True:
            t = self.peek()
            if t.kind != "word":
                self.error("unterminated test expression", t)
            lit = t.value.literal_text()
            if lit == close:
                self.next()
                break
            words.append(self.next().value)
        return self.build_test(words, opener)

    def build_test(self, words: list, opener: str):
        if not words:
            self.error("empty test expression")
        negated = False
        while words and words[0].literal_text() == "!":
            negated = not negated
            words = words[1:]
        # [[ a && b ]] style conjunctions inside one bracket pair
        for i, w in enumerate(words):
            if w.literal_text() in ("&&", "-a"):
                left = self.build_test(words[:i], opener)
                right = self.build_test(words[i + 1 :], opener)
                result = And((left, right))
                return negate(result) if negated else result
        atom = self.build_atom(words)
        return negate(atom) if negated else atom

    def build_atom(self, words: list):
        if len(words) == 2:
            flag = words[0].literal_text()
            target = words[1].to_expr()
            if flag == "-f":
                return IsFile(target)
            if flag == "-d":
                return IsDir(target)
            if flag == "-e":
                return Exists(target)
            self.error(f"unsupported test operator {flag!r}")
        if len(words) == 3:
            op = words[1].literal_text()
            if op not in ("=", "==", "!="):
                self.error(f"unsupported comparison {op!r}")
            left, right = words[0], words[2]
            atom = self._comparison(left, right)
            return negate(atom) if op == "!=" else atom
        self.error("unsupported test shape")

    def _comparison(self, left: Word, right: Word):
        lspec, rspec = left.special(), right.special()
        if lspec and lspec[0] == "ext":
            lit = right.literal_text()
            if lit is None:
                self.error("extension must be compared with a literal")
            return ExtEq(lspec[1], lit)
        if rspec and rspec[0] == "ext":
            lit = left.literal_text()
            if lit is None:
                self.error("extension must be compared with a literal")
            return ExtEq(rspec[1], lit)
        return StrEq(left.to_expr(), right.to_expr())

    def parse_simple(self) -> _Simple:
        words = []
        start = self.peek()
        # reserved words are only special at command position, which
        # parse_stmts has already checked; consume every word here
        while self.peek().kind == "word":
            words.append(self.next().value)
        if not words:
            self.error("expected a command", start)
        t = self.peek()
        if t.kind == "op" and t.value in ("&&", "||"):
            self.error("command lists with && / || are out of grammar", t)
        return _Simple(words, start.line)


# ---------------------------------------------------------------------------
# assembly into an artifact


def _expr_key(expr) -> str:
    from .artifact import _path_expr_form_key

    return _path_expr_form_key(expr)


class _Assembler:
    def __init__(self, task_refs: dict | None, library: annot.AnnotationLibrary):
        self.task_refs = task_refs or {}
        self.library = library
        self.nodes = []
        self.edges = []
        self.tasks = {}  # task_id -> AdapterTask
        self.task_shapes = {}  # shape key -> task_id
        self.counter = 0
        self.invocations = []  # (node_id, [(var, role, expr)]) in execution order
        self.prev_stmt_node = {}  # seq scope id -> (node_id, annotated)

    def new_id(self) -> str:
        self.counter += 1
        return f"n{self.counter}"

    def build(self, stmts: list) -> WorkflowGraph:
        root = self.seq_of(stmts, scope=("root",))
        self.infer_data_edges()
        return WorkflowGraph(
            root=root, nodes=tuple(self.nodes), edges=tuple(self.edges)
        )

    def seq_of(self, stmts: list, scope) -> str:
        child_ids = [self.stmt_node(s, scope) for s in stmts]
        if len(child_ids) == 1:
            return child_ids[0]
        nid = self.new_id()
        self.nodes.append(SeqNode(nid, tuple(child_ids)))
        return nid

    def stmt_node(self, stmt, scope) -> str:
        if isinstance(stmt, _Simple):
            return self.simple_node(stmt, scope)
        if isinstance(stmt, _For):
            body = self.seq_of(stmt.body, scope + (f"for{stmt.line}",))
            nid = self.new_id()
            self.nodes.append(ForEachNode(nid, stmt.glob, stmt.var, body))
            return nid
        if isinstance(stmt, _If):
            then = self.seq_of(stmt.then, scope + (f"then{stmt.line}",)) if stmt.then else None
            els = self.seq_of(stmt.els, scope + (f"else{stmt.line}",)) if stmt.els else None
            nid = self.new_id()
            self.nodes.append(IfNode(nid, stmt.pred, then, els))
            return nid
        raise TypeError(stmt)

    def simple_node(self, stmt: _Simple, scope) -> str:
        cmd = stmt.words[0].literal_text()
        if cmd is None:
            raise ShellOutOfGrammar("command name must be literal", stmt.line)
        if cmd == ":":
            nid = self.new_id()
            self.nodes.append(SeqNode(nid, ()))
            return nid
        if cmd in self.task_refs:
            return self.pseudo_invocation(cmd, stmt, scope)
        return self.direct_invocation(cmd, stmt, scope)

    def pseudo_invocation(self, ref: str, stmt: _Simple, scope) -> str:
        task = self.task_refs[ref]
        self.tasks.setdefault(task.task_id, task)
        bindings = []
        ops = []
        for idx, w in enumerate(stmt.words[1:], start=1):
            expr = w.to_expr()
            var = str(idx)
            bindings.append((var, expr))
            role = task.role_of(var) or "other"
            ops.append((var, role, expr))
        nid = self.new_id()
        self.nodes.append(TaskNode(nid, task.task_id, tuple(bindings)))
        self.record_invocation(nid, ops, annotated=True, scope=scope)
        return nid

    def direct_invocation(self, cmd: str, stmt: _Simple, scope) -> str:
        record = self.library.lookup(cmd)
        segs = []
        ops = []  # (var, role, expr) for this invocation
        bindings = []
        roles = []
        operand_words = []
        var_n = 0
        i = 1
        flags_done = False
        words = stmt.words
        while i < len(words):
            w = words[i]
            lit = w.literal_text()
            if not flags_done and lit == "--":
                segs.append(LitSeg("--"))
                flags_done = True
                i += 1
                continue
            if not flags_done and lit is not None and lit.startswith("-") and lit != "-":
                spec = record.flag(lit) if record else None
                segs.append(LitSeg(lit))
                arity = spec.arity if spec else 0
                for k in range(arity):
                    i += 1
                    if i >= len(words):
                        raise ShellOutOfGrammar(
                            f"flag {lit} expects a value", stmt.line
                        )
                    vw = words[i]
                    if spec and spec.value_role:
                        var_n += 1
                        var = f"p{var_n}"
                        segs.append(VarSeg(var))
                        roles.append((var, spec.value_role))
                        expr = vw.to_expr()
                        bindings.append((var, expr))
                        ops.append((var, spec.value_role, expr))
                    else:
                        vlit = vw.literal_text()
                        if vlit is None:
                            var_n += 1
                            var = f"p{var_n}"
                            segs.append(VarSeg(var))
                            roles.append((var, "other"))
                            bindings.append((var, vw.to_expr()))
                        else:
                            segs.append(LitSeg(vlit))
                i += 1
                continue
            operand_words.append(w)
            i += 1
        count = len(operand_words)
        assigned = (
            record.operand_roles(count) if record else ["other"] * count
        )
        for w, role in zip(operand_words, assigned):
            var_n += 1
            var = f"p{var_n}"
            segs.append(VarSeg(var))
            roles.append((var, role))
            expr = w.to_expr()
            bindings.append((var, expr))
            ops.append((var, role, expr))

        shape = (cmd, tuple(
            ("lit", s.text) if isinstance(s, LitSeg) else ("var", s.name)
            for s in segs
        ))
        task_id = self.task_shapes.get(shape)
        if task_id is None:
            base = re.sub(r"[^A-Za-z0-9]+", "-", cmd) or "cmd"
            task_id = base
            k = 1
            while task_id in self.tasks:
                k += 1
                task_id = f"{base}{k}"
            self.task_shapes[shape] = task_id
            self.tasks[task_id] = AdapterTask(
                task_id=task_id,
                command=cmd,
                argv=tuple(segs),
                io_roles=tuple(sorted(roles)),
                egress=cmd in DEFAULT_EGRESS_ALLOWLIST,
                task_prompt="",
            )
        nid = self.new_id()
        self.nodes.append(TaskNode(nid, task_id, tuple(bindings)))
        self.record_invocation(nid, ops, annotated=record is not None, scope=scope)
        return nid

    def record_invocation(self, nid, ops, annotated: bool, scope):
        self.invocations.append((nid, ops))
        prev = self.prev_stmt_node.get(scope)
        if prev is not None:
            prev_nid, prev_annot = prev
            if not annotated or not prev_annot:
                self.edges.append(Edge("control", prev_nid, None, nid, None))
        self.prev_stmt_node[scope] = (nid, annotated)

    def infer_data_edges(self):
        producers = {}  # expr key -> (node_id, var)
        seen = set()
        for nid, ops in self.invocations:
            for var, role, expr in ops:
                key = _expr_key(expr)
                if role == "input-file" and key in producers:
                    src, src_var = producers[key]
                    edge = ("data", src, src_var, nid, var)
                    if src != nid and edge not in seen:
                        seen.add(edge)
                        self.edges.append(Edge(*edge))
            for var, role, expr in ops:
                if role == "output-file":
                    producers[_expr_key(expr)] = (nid, var)


def read_shell(text: str, task_refs: dict | None = None,
               library: annot.AnnotationLibrary | None = None):
    """Parse restricted shell into (graph, tasks); raises ShellOutOfGrammar."""
    toks = _Scanner(text).tokens()
    stmts = _Parser(toks).parse_script()
    asm = _Assembler(task_refs, library or annot.default_library())
    graph = asm.build(stmts)
    return graph, tuple(asm.tasks.values())


def shell_to_artifact(
    text: str,
    nl_prompt: str = "",
    backend_id: str = "",
    created_at: str = "",
    parent: str | None = None,
    task_refs: dict | None = None,
) -> ScriptArtifact:
    """Read restricted shell text into a validated artifact."""
    graph, tasks = read_shell(text, task_refs=task_refs)
    if not graph.nodes:
        nid = "n1"
        graph = WorkflowGraph(root=nid, nodes=(SeqNode(nid, ()),), edges=())
    return finalize(
        ScriptArtifact(
            artifact_id="",
            nl_prompt=nl_prompt,
            workflow=graph,
            tasks=tasks,
            backend_id=backend_id,
            created_at=created_at,
            parent_artifact=parent,
        )
    )


def opaque_artifact(
    script: str,
    nl_prompt: str = "",
    backend_id: str = "",
    created_at: str = "",
    parent: str | None = None,
    reason: str = "",
) -> ScriptArtifact:
    """Wrap unparsable backend output as a single warning-flagged opaque task."""
    task = AdapterTask(
        task_id="opaque",
        command="sh",
        argv=(),
        io_roles=(),
        egress=False,
        task_prompt=reason or "verbatim script outside the composition grammar",
        opaque=True,
        script=script,
    )
    graph = WorkflowGraph(root="n1", nodes=(TaskNode("n1", "opaque"),), edges=())
    return finalize(
        ScriptArtifact(
            artifact_id="",
            nl_prompt=nl_prompt,
            workflow=graph,
            tasks=(task,),
            backend_id=backend_id,
            created_at=created_at,
            parent_artifact=parent,
        )
    )
