"""Randomized trees and mutation scripts shared by guard/history tests.

A script is a list of simple op tuples that can be applied either through
the guard's native primitives or as a plain `sh` script supervised in
scan mode.  Ops are best-effort: an op that does not apply to the current
tree (missing file, non-empty dir) is skipped, which keeps random
sequences meaningful without constraint solving.
"""

import os
import random
import shlex

NAMES = ["a", "b", "c", "d", "e", "f", "g", "h"]
DIRS = ["d0", "d1", "d0/sub"]
MODES = [0o600, 0o640, 0o644, 0o700, 0o755]


def build_tree(root, rng: random.Random, max_files=12, max_depth=3):
    """Create a random initial tree with plain os calls."""
    made_dirs = ["."]
    for i in range(rng.randint(0, 3)):
        depth = rng.randint(1, max_depth)
        parts = [rng.choice(["d0", "d1", "sub", "deep"]) for _ in range(depth)]
        rel = "/".join(parts)
        os.makedirs(os.path.join(root, rel), exist_ok=True)
        made_dirs.append(rel)
    for i in range(rng.randint(1, max_files)):
        parent = rng.choice(made_dirs)
        name = f"{rng.choice(NAMES)}{i}.txt"
        rel = name if parent == "." else f"{parent}/{name}"
        full = os.path.join(root, rel)
        with open(full, "wb") as fh:
            fh.write(rng.randbytes(rng.randint(0, 64)))
        os.chmod(full, rng.choice(MODES))
    if rng.random() < 0.3:
        os.symlink("a0.txt", os.path.join(root, "lnk"))


def _paths_in(root):
    files, dirs = [], []
    for dirpath, dirnames, filenames in os.walk(root):
        rel_dir = os.path.relpath(dirpath, root).replace(os.sep, "/")
        for d in dirnames:
            dirs.append(d if rel_dir == "." else f"{rel_dir}/{d}")
        for f in filenames:
            files.append(f if rel_dir == "." else f"{rel_dir}/{f}")
    return files, dirs


def random_ops(root, rng: random.Random, count=10):
    """A mutation script against (a snapshot of) the tree at `root`."""
    files, dirs = _paths_in(root)
    files = list(files)
    dirs = ["."] + list(dirs)
    ops = []
    fresh = 0
    for _ in range(count):
        kind = rng.choice(
            [
                "write",
                "write",
                "append",
                "chmod",
                "rename",
                "delete",
                "mkdir",
                "symlink",
                "rmdir",
            ]
        )
        if kind == "write":
            if files and rng.random() < 0.5:
                path = rng.choice(files)
            else:
                fresh += 1
                parent = rng.choice(dirs)
                name = f"new{fresh}.dat"
                path = name if parent == "." else f"{parent}/{name}"
                files.append(path)
            ops.append(("write", path, rng.randbytes(rng.randint(0, 48))))
        elif kind == "append" and files:
            ops.append(("append", rng.choice(files), rng.randbytes(8)))
        elif kind == "chmod" and files:
            ops.append(("chmod", rng.choice(files), rng.choice(MODES)))
        elif kind == "rename" and files:
            src = rng.choice(files)
            fresh += 1
            dst = f"moved{fresh}.dat"
            files = [f for f in files if f != src] + [dst]
            ops.append(("rename", src, dst))
        elif kind == "delete" and files:
            victim = rng.choice(files)
            files = [f for f in files if f != victim]
            ops.append(("delete", victim))
        elif kind == "mkdir":
            fresh += 1
            parent = rng.choice(dirs)
            path = f"nd{fresh}" if parent == "." else f"{parent}/nd{fresh}"
            dirs.append(path)
            ops.append(("mkdir", path))
        elif kind == "symlink":
            fresh += 1
            ops.append(("symlink", "a0.txt", f"ln{fresh}"))
        elif kind == "rmdir" and len(dirs) > 1:
            ops.append(("rmdir", rng.choice(dirs[1:])))
    return ops


def apply_native(guard, ops):
    """Run a script through the guard's native mutation primitives."""
    for op in ops:
        try:
            if op[0] == "write":
                guard.write_file(op[1], op[2])
            elif op[0] == "append":
                guard.write_file(op[1], op[2], append=True)
            elif op[0] == "chmod":
                guard.chmod(op[1], op[2])
            elif op[0] == "rename":
                guard.rename(op[1], op[2])
            elif op[0] == "delete":
                guard.unlink(op[1])
            elif op[0] == "mkdir":
                guard.mkdir(op[1])
            elif op[0] == "symlink":
                guard.symlink(op[1], op[2])
            elif op[0] == "rmdir":
                guard.rmdir(op[1])
        except OSError:
            pass


def as_shell(ops) -> str:
    """The same script as POSIX sh, for scan-mode supervision."""
    lines = ["set +e"]
    for op in ops:
        if op[0] == "write":
            lines.append(
                f"printf '%s' {shlex.quote(op[2].hex())} > {shlex.quote(op[1])}"
            )
        elif op[0] == "append":
            lines.append(
                f"printf '%s' {shlex.quote(op[2].hex())} >> {shlex.quote(op[1])}"
            )
        elif op[0] == "chmod":
            lines.append(f"chmod {op[2]:o} {shlex.quote(op[1])} 2>/dev/null")
        elif op[0] == "rename":
            lines.append(
                f"mv -- {shlex.quote(op[1])} {shlex.quote(op[2])} 2>/dev/null"
            )
        elif op[0] == "delete":
            lines.append(f"rm -f -- {shlex.quote(op[1])}")
        elif op[0] == "mkdir":
            lines.append(f"mkdir -- {shlex.quote(op[1])} 2>/dev/null")
        elif op[0] == "symlink":
            lines.append(
                f"ln -s -- {shlex.quote(op[1])} {shlex.quote(op[2])} 2>/dev/null"
            )
        elif op[0] == "rmdir":
            lines.append(f"rmdir -- {shlex.quote(op[1])} 2>/dev/null")
    lines.append("true")
    return "\n".join(lines) + "\n"
