"""Adapter-task execution: built-ins, external processes, egress calls.

Built-in implementations of the starter command set run in-process through
guard primitives, which is what gives them exact first-mutation stashing.
Anything else runs as a real subprocess under scan supervision with the
namespace plan applied.  Egress tools (curl/wget) are never executed
directly — their argv is turned into a structured descriptor for the
gate, and `egress_execute` performs the transfer only after approval,
writing any output file through the guard.
"""

from __future__ import annotations

import posixpath
import re
import subprocess
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field

from . import namespaces
from .errors import UsageError


@dataclass
class TaskOutcome:
    exit_code: int
    stdout: str = ""
    stderr: str = ""
    reads: tuple = field(default_factory=tuple)  # rel paths whose content was read


def _ok(stdout="", reads=()):
    return TaskOutcome(0, stdout, "", tuple(reads))


def _fail(msg, code=1):
    return TaskOutcome(code, "", msg if msg.endswith("\n") else msg + "\n")


def _split(argv, flag_arity):
    """Split argv into (flags, operands) per a {flag: arity} table."""
    flags = []
    operands = []
    it = iter(argv)
    seen_ddash = False
    for word in it:
        if not seen_ddash and word == "--":
            seen_ddash = True
            continue
        if not seen_ddash and word.startswith("-") and word != "-":
            if word not in flag_arity:
                raise UsageError(f"unknown flag {word}")
            value = next(it) if flag_arity[word] else None
            flags.append((word, value))
        else:
            operands.append(word)
    return flags, operands


def _is_link(guard, path) -> bool:
    import os

    return os.path.islink(guard.full(guard.to_rel(path)))


# -- built-in commands -------------------------------------------------------


def _bi_rm(guard, argv):
    flags, operands = _split(argv, {"-r": 0, "-R": 0, "-f": 0})
    recursive = any(f in ("-r", "-R") for f, _ in flags)
    force = any(f == "-f" for f, _ in flags)
    if not operands:
        return _ok() if force else _fail("rm: missing operand")
    errs = []
    for path in operands:
        try:
            if guard.isdir(path) and not _is_link(guard, path):
                if recursive:
                    guard.rmtree(path)
                else:
                    errs.append(f"rm: {path}: is a directory")
            else:
                guard.unlink(path)
        except FileNotFoundError:
            if not force:
                errs.append(f"rm: {path}: no such file")
    if errs:
        return _fail("\n".join(errs))
    return _ok()


def _copy_tree(guard, src, dst):
    guard.mkdir(dst)
    for name in guard.listdir(src):
        s, d = f"{src}/{name}", f"{dst}/{name}"
        if guard.isdir(s) and not _is_link(guard, s):
            _copy_tree(guard, s, d)
        else:
            guard.copy_file(s, d)


def _bi_cp(guard, argv):
    flags, operands = _split(argv, {"-r": 0, "-R": 0, "-p": 0, "-f": 0})
    recursive = any(f in ("-r", "-R") for f, _ in flags)
    if len(operands) < 2:
        return _fail("cp: missing operand")
    *srcs, dst = operands
    reads = []
    try:
        for src in srcs:
            target = dst
            if guard.isdir(dst):
                target = f"{dst.rstrip('/')}/{posixpath.basename(src)}"
            elif len(srcs) > 1:
                return _fail(f"cp: target {dst!r} is not a directory")
            if guard.isdir(src) and not _is_link(guard, src):
                if not recursive:
                    return _fail(f"cp: {src}: is a directory (use -r)")
                _copy_tree(guard, src, target)
            else:
                guard.copy_file(src, target)
                reads.append(guard.to_rel(src))
    except FileNotFoundError as exc:
        return _fail(f"cp: {exc}")
    return _ok(reads=reads)


def _bi_mv(guard, argv):
    _, operands = _split(argv, {"-f": 0})
    if len(operands) < 2:
        return _fail("mv: missing operand")
    *srcs, dst = operands
    try:
        if guard.isdir(dst) and not _is_link(guard, dst):
            for src in srcs:
                guard.rename(src, f"{dst.rstrip('/')}/{posixpath.basename(src)}")
        else:
            if len(srcs) > 1:
                return _fail(f"mv: target {dst!r} is not a directory")
            guard.rename(srcs[0], dst)
    except FileNotFoundError as exc:
        return _fail(f"mv: {exc}")
    return _ok()


def _bi_mkdir(guard, argv):
    flags, operands = _split(argv, {"-p": 0, "-m": 1})
    parents = any(f == "-p" for f, _ in flags)
    mode = next((int(v, 8) for f, v in flags if f == "-m"), 0o755)
    if not operands:
        return _fail("mkdir: missing operand")
    for path in operands:
        try:
            if parents:
                guard.makedirs(path, mode)
            else:
                guard.mkdir(path, mode)
        except FileExistsError:
            if not parents:
                return _fail(f"mkdir: {path}: file exists")
        except FileNotFoundError:
            return _fail(f"mkdir: {path}: no such file or directory")
    return _ok()


def _bi_rmdir(guard, argv):
    _, operands = _split(argv, {})
    for path in operands:
        try:
            guard.rmdir(path)
        except OSError as exc:
            return _fail(f"rmdir: {path}: {exc.strerror or exc}")
    return _ok()


def _bi_touch(guard, argv):
    _, operands = _split(argv, {})
    if not operands:
        return _fail("touch: missing operand")
    for path in operands:
        if not guard.exists(path):
            guard.write_file(path, b"")
    return _ok()


def _read_text(guard, path, reads):
    data = guard.read_file(path)
    reads.append(guard.to_rel(path))
    return data.decode("utf-8", errors="replace")


def _bi_cat(guard, argv):
    flags, operands = _split(argv, {"-n": 0})
    number = any(f == "-n" for f, _ in flags)
    reads = []
    out = []
    try:
        for path in operands:
            out.append(_read_text(guard, path, reads))
    except FileNotFoundError:
        return _fail(f"cat: {path}: no such file")
    text = "".join(out)
    if number:
        text = "".join(
            f"{i + 1:6}\t{line}\n"
            for i, line in enumerate(text.splitlines())
        )
    return _ok(text, reads)


def _bi_echo(guard, argv):
    flags, operands = _split(argv, {"-n": 0})
    text = " ".join(operands)
    if not any(f == "-n" for f, _ in flags):
        text += "\n"
    return _ok(text)


def _bi_grep(guard, argv):
    flags, operands = _split(
        argv, {"-v": 0, "-i": 0, "-c": 0, "-l": 0, "-n": 0}
    )
    if not operands:
        return _fail("grep: missing pattern")
    pattern, *files = operands
    opts = {f for f, _ in flags}
    try:
        rx = re.compile(pattern, re.IGNORECASE if "-i" in opts else 0)
    except re.error as exc:
        return _fail(f"grep: bad pattern: {exc}", 2)
    reads = []
    out = []
    matched = False
    try:
        for path in files:
            lines = _read_text(guard, path, reads).splitlines()
            hits = [
                (i + 1, line)
                for i, line in enumerate(lines)
                if bool(rx.search(line)) != ("-v" in opts)
            ]
            matched = matched or bool(hits)
            prefix = f"{path}:" if len(files) > 1 else ""
            if "-c" in opts:
                out.append(f"{prefix}{len(hits)}")
            elif "-l" in opts:
                if hits:
                    out.append(path)
            elif "-n" in opts:
                out.extend(f"{prefix}{n}:{line}" for n, line in hits)
            else:
                out.extend(f"{prefix}{line}" for _, line in hits)
    except FileNotFoundError:
        return _fail(f"grep: {path}: no such file", 2)
    text = "\n".join(out) + ("\n" if out else "")
    return TaskOutcome(0 if matched else 1, text, "", tuple(reads))


def _bi_head(guard, argv):
    flags, operands = _split(argv, {"-n": 1})
    count = next((int(v) for f, v in flags if f == "-n"), 10)
    reads = []
    out = []
    try:
        for path in operands:
            lines = _read_text(guard, path, reads).splitlines(keepends=True)
            out.append("".join(lines[:count]))
    except FileNotFoundError:
        return _fail(f"head: {path}: no such file")
    return _ok("".join(out), reads)


def _bi_wc(guard, argv):
    flags, operands = _split(argv, {"-l": 0, "-c": 0, "-w": 0})
    opts = [f for f, _ in flags] or ["-l", "-w", "-c"]
    reads = []
    out = []
    try:
        for path in operands:
            data = guard.read_file(path)
            reads.append(guard.to_rel(path))
            text = data.decode("utf-8", errors="replace")
            cols = []
            if "-l" in opts:
                cols.append(str(text.count("\n")))
            if "-w" in opts:
                cols.append(str(len(text.split())))
            if "-c" in opts:
                cols.append(str(len(data)))
            out.append(" ".join(cols + [path]))
    except FileNotFoundError:
        return _fail(f"wc: {path}: no such file")
    return _ok("\n".join(out) + ("\n" if out else ""), reads)


def _bi_sort(guard, argv):
    flags, operands = _split(argv, {"-r": 0, "-n": 0, "-o": 1})
    opts = {f: v for f, v in flags}
    reads = []
    lines = []
    try:
        for path in operands:
            lines.extend(_read_text(guard, path, reads).splitlines())
    except FileNotFoundError:
        return _fail(f"sort: {path}: no such file", 2)
    if "-n" in opts:
        def key(line):
            m = re.match(r"\s*(-?\d+)", line)
            return (int(m.group(1)) if m else 0, line)
        lines.sort(key=key)
    else:
        lines.sort()
    if "-r" in opts:
        lines.reverse()
    text = "\n".join(lines) + ("\n" if lines else "")
    if "-o" in opts:
        guard.write_file(opts["-o"], text.encode())
        return _ok(reads=reads)
    return _ok(text, reads)


def _bi_chmod(guard, argv):
    _, operands = _split(argv, {})
    if len(operands) < 2:
        return _fail("chmod: missing operand")
    mode_word, *files = operands
    try:
        mode = int(mode_word, 8)
    except ValueError:
        return _fail(f"chmod: unsupported mode {mode_word!r} (octal only)")
    try:
        for path in files:
            guard.chmod(path, mode)
    except FileNotFoundError:
        return _fail(f"chmod: {path}: no such file")
    return _ok()


def _bi_ln(guard, argv):
    flags, operands = _split(argv, {"-s": 0})
    if len(operands) != 2:
        return _fail("ln: expected TARGET LINK")
    target, link = operands
    try:
        if any(f == "-s" for f, _ in flags):
            guard.symlink(target, link)
        else:
            guard.hardlink(target, link)
    except (FileExistsError, FileNotFoundError) as exc:
        return _fail(f"ln: {exc}")
    return _ok()


def _bi_truncate(guard, argv):
    flags, operands = _split(argv, {"-s": 1})
    size = next((v for f, v in flags if f == "-s"), None)
    if size is None or not operands:
        return _fail("truncate: expected -s SIZE FILE...")
    try:
        size_n = int(size)
    except ValueError:
        return _fail(f"truncate: bad size {size!r}")
    for path in operands:
        guard.truncate(path, size_n)
    return _ok()


BUILTINS = {
    "rm": _bi_rm,
    "cp": _bi_cp,
    "mv": _bi_mv,
    "mkdir": _bi_mkdir,
    "rmdir": _bi_rmdir,
    "touch": _bi_touch,
    "cat": _bi_cat,
    "echo": _bi_echo,
    "grep": _bi_grep,
    "head": _bi_head,
    "wc": _bi_wc,
    "sort": _bi_sort,
    "chmod": _bi_chmod,
    "ln": _bi_ln,
    "truncate": _bi_truncate,
}


def is_builtin(command: str) -> bool:
    return command in BUILTINS


def run_builtin(guard, command: str, argv: list) -> TaskOutcome:
    try:
        return BUILTINS[command](guard, list(argv))
    except UsageError as exc:
        return _fail(f"{command}: {exc}", 2)


# -- external processes under scan supervision -------------------------------


def run_external(guard, argv: list, plan, *, env=None, timeout=None,
                 shell_script: str | None = None) -> TaskOutcome:
    """Run an opaque command in the guard root, pre-stashing the subtree."""
    namespaces.check_spawn_allowed(plan)
    if shell_script is not None:
        base = ["sh", "-c", shell_script]
    else:
        base = list(argv)
    full_argv = namespaces.wrap_argv(plan, base)
    guard.scan_begin(full_argv, cwd=guard.guard_root)
    code = -1
    stdout = stderr = ""
    try:
        proc = subprocess.run(
            full_argv,
            cwd=guard.guard_root,
            capture_output=True,
            text=True,
            env=env,
            timeout=timeout,
            preexec_fn=namespaces.preexec_for(plan),
        )
        code, stdout, stderr = proc.returncode, proc.stdout, proc.stderr
    except FileNotFoundError as exc:
        code, stderr = 127, f"{base[0]}: not found ({exc})\n"
    except subprocess.TimeoutExpired as exc:
        code = 124
        stderr = f"timeout after {exc.timeout}s\n"
    finally:
        guard.scan_end(exit_code=code)
    return TaskOutcome(code, stdout, stderr)


# -- egress tools ------------------------------------------------------------

_CURL_ARITY = {
    "-o": 1, "--output": 1, "-X": 1, "--request": 1, "-H": 1, "--header": 1,
    "-d": 1, "--data": 1, "--data-binary": 1, "-T": 1, "--upload-file": 1,
    "--url": 1, "-s": 0, "-L": 0, "-f": 0, "-q": 0,
}
_WGET_ARITY = {
    "-O": 1, "--output-document": 1, "-q": 0, "--quiet": 0,
    "--post-data": 1, "--post-file": 1,
}


def build_descriptor(tool: str, argv: list) -> dict:
    """Structure an egress tool's argv: method, destination, payload refs."""
    arity = _CURL_ARITY if tool == "curl" else _WGET_ARITY
    try:
        flags, operands = _split(argv, arity)
    except UsageError:
        # Unknown flags stay visible in the parameter summary.
        flags, operands = [], []
        it = iter(argv)
        for word in it:
            if word.startswith("-") and word != "-":
                flags.append((word, next(it) if arity.get(word) else None))
            else:
                operands.append(word)
    fmap = dict(flags)
    url = fmap.get("--url") or next(
        (op for op in operands if "://" in op or "." in op), ""
    )
    method = fmap.get("-X") or fmap.get("--request")
    payload_refs = []
    literal_data = []
    for f, v in flags:
        if f in ("-d", "--data", "--data-binary", "--post-data") and v:
            # @file reads the file; anything else is sent verbatim.
            if v.startswith("@"):
                payload_refs.append(v[1:])
            else:
                literal_data.append(v)
        elif f in ("-T", "--upload-file", "--post-file") and v:
            payload_refs.append(v)
    if method is None:
        has_body = any(f in ("-d", "--data", "--data-binary", "--post-data",
                             "--post-file") for f, _ in flags)
        uploads = any(f in ("-T", "--upload-file") for f, _ in flags)
        method = "POST" if has_body else ("PUT" if uploads else "GET")
    destination = urllib.parse.urlsplit(
        url if "://" in url else "//" + url
    ).hostname or url
    output = None
    for f, v in flags:
        if f in ("-o", "--output", "-O", "--output-document"):
            output = v
    if tool == "wget" and output is None and url:
        tail = urllib.parse.urlsplit(url if "://" in url else "//" + url).path
        output = posixpath.basename(tail) or "index.html"
    parameters = []
    for f, v in flags:
        parameters.append(f if v is None else f"{f} {v}")
    return {
        "method": method,
        "destination": destination,
        "url": url,
        "parameters": parameters,
        "payload_refs": payload_refs,
        "literal_data": literal_data,
        "output": output,
    }


def input_paths(descriptor: dict) -> list:
    return list(descriptor.get("payload_refs", ()))


def egress_execute(guard, descriptor: dict, *, opener=None,
                   timeout=30) -> TaskOutcome:
    """Perform an approved transfer; file output goes through the guard."""
    url = descriptor.get("url", "")
    if "://" not in url:
        url = "http://" + url
    data = None
    reads = []
    for text in descriptor.get("literal_data", ()):
        data = (data or b"") + text.encode("utf-8")
    for ref in descriptor.get("payload_refs", ()):
        try:
            data = (data or b"") + guard.read_file(ref)
            reads.append(guard.to_rel(ref))
        except FileNotFoundError:
            return _fail(f"egress: payload file {ref}: no such file")
    req = urllib.request.Request(
        url, data=data, method=descriptor.get("method", "GET")
    )
    open_fn = opener or urllib.request.urlopen
    try:
        with open_fn(req, timeout=timeout) as resp:
            body = resp.read()
    except (urllib.error.URLError, OSError) as exc:
        return _fail(f"egress: {url}: {exc}", 7)
    out = descriptor.get("output")
    if out:
        guard.write_file(out, body)
        return _ok(reads=reads)
    return _ok(body.decode("utf-8", errors="replace"), reads)
