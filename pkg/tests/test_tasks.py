import os
import io
import stat

import pytest

from nash.errors import GuardError
from nash.guard import GuardHandle
from nash.history import begin_epoch
from nash.namespaces import plan_isolation
from nash.store import Store
from nash.tasks import (
    TaskOutcome,
    build_descriptor,
    egress_execute,
    input_paths,
    is_builtin,
    run_builtin,
    run_external,
)


@pytest.fixture
def store(store_root):
    with Store(store_root) as s:
        yield s


@pytest.fixture
def guard(store, work_root):
    begin_epoch(store, "task tests", guard_root=str(work_root))
    with GuardHandle(store, work_root, 1) as g:
        yield g


def put(root, rel, text):
    path = root / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


# -- built-in command semantics ----------------------------------------------


def test_builtin_registry_covers_starter_set():
    for name in ("rm", "cp", "mv", "mkdir", "rmdir", "touch", "cat", "echo",
                  "grep", "head", "wc", "sort", "chmod", "ln", "truncate"):
        assert is_builtin(name)
    assert not is_builtin("curl")
    assert not is_builtin("sed")


def test_rm_file_and_flags(guard, work_root):
    put(work_root, "a.txt", "x")
    assert run_builtin(guard, "rm", ["a.txt"]).exit_code == 0
    assert not (work_root / "a.txt").exists()

    out = run_builtin(guard, "rm", ["missing"])
    assert out.exit_code == 1
    assert "no such file" in out.stderr
    assert run_builtin(guard, "rm", ["-f", "missing"]).exit_code == 0


def test_rm_directory_needs_recursive(guard, work_root):
    (work_root / "d").mkdir()
    put(work_root, "d/inner.txt", "x")
    out = run_builtin(guard, "rm", ["d"])
    assert out.exit_code == 1
    assert "is a directory" in out.stderr
    assert run_builtin(guard, "rm", ["-r", "d"]).exit_code == 0
    assert not (work_root / "d").exists()


def test_rm_double_dash_stops_flag_parsing(guard, work_root):
    put(work_root, "-weird", "x")
    assert run_builtin(guard, "rm", ["--", "-weird"]).exit_code == 0
    assert not (work_root / "-weird").exists()


def test_cp_reports_reads(guard, work_root):
    put(work_root, "src.txt", "data")
    out = run_builtin(guard, "cp", ["src.txt", "dst.txt"])
    assert out.exit_code == 0
    assert out.reads == ("src.txt",)
    assert (work_root / "dst.txt").read_text() == "data"


def test_cp_into_directory_and_recursive(guard, work_root):
    put(work_root, "one.txt", "1")
    put(work_root, "two.txt", "2")
    (work_root / "into").mkdir()
    assert run_builtin(guard, "cp", ["one.txt", "two.txt", "into"]).exit_code == 0
    assert (work_root / "into" / "one.txt").read_text() == "1"

    put(work_root, "tree/deep/leaf.txt", "leaf")
    assert run_builtin(guard, "cp", ["tree", "copy"]).exit_code == 1
    assert run_builtin(guard, "cp", ["-r", "tree", "copy"]).exit_code == 0
    assert (work_root / "copy" / "deep" / "leaf.txt").read_text() == "leaf"


def test_mv_rename_and_into_directory(guard, work_root):
    put(work_root, "a.txt", "A")
    assert run_builtin(guard, "mv", ["a.txt", "b.txt"]).exit_code == 0
    assert (work_root / "b.txt").read_text() == "A"
    (work_root / "dir").mkdir()
    assert run_builtin(guard, "mv", ["b.txt", "dir"]).exit_code == 0
    assert (work_root / "dir" / "b.txt").exists()


def test_mkdir_variants(guard, work_root):
    assert run_builtin(guard, "mkdir", ["plain"]).exit_code == 0
    assert run_builtin(guard, "mkdir", ["plain"]).exit_code == 1
    assert run_builtin(guard, "mkdir", ["-p", "plain"]).exit_code == 0
    assert run_builtin(guard, "mkdir", ["-p", "a/b/c"]).exit_code == 0
    assert (work_root / "a" / "b" / "c").is_dir()
    assert run_builtin(guard, "mkdir", ["deep/missing"]).exit_code == 1


def test_touch_is_noop_on_existing(guard, work_root):
    put(work_root, "kept.txt", "content")
    assert run_builtin(guard, "touch", ["kept.txt", "fresh.txt"]).exit_code == 0
    assert (work_root / "kept.txt").read_text() == "content"
    assert (work_root / "fresh.txt").read_bytes() == b""


def test_cat_and_numbering(guard, work_root):
    put(work_root, "f.txt", "alpha\nbeta\n")
    out = run_builtin(guard, "cat", ["f.txt"])
    assert out.stdout == "alpha\nbeta\n"
    assert out.reads == ("f.txt",)
    numbered = run_builtin(guard, "cat", ["-n", "f.txt"]).stdout
    assert numbered.splitlines()[0].endswith("\talpha")


def test_echo(guard):
    assert run_builtin(guard, "echo", ["hi", "there"]).stdout == "hi there\n"
    assert run_builtin(guard, "echo", ["-n", "raw"]).stdout == "raw"


def test_grep_exit_codes_and_modes(guard, work_root):
    put(work_root, "log.txt", "error: boom\nok line\nerror: again\n")
    hit = run_builtin(guard, "grep", ["error", "log.txt"])
    assert hit.exit_code == 0
    assert hit.stdout.count("error") == 2
    miss = run_builtin(guard, "grep", ["absent", "log.txt"])
    assert miss.exit_code == 1
    assert run_builtin(guard, "grep", ["error", "nope.txt"]).exit_code == 2

    count = run_builtin(guard, "grep", ["-c", "error", "log.txt"])
    assert count.stdout == "2\n"
    inverted = run_builtin(guard, "grep", ["-v", "error", "log.txt"])
    assert inverted.stdout == "ok line\n"
    numbered = run_builtin(guard, "grep", ["-n", "again", "log.txt"])
    assert numbered.stdout == "3:error: again\n"
    names = run_builtin(guard, "grep", ["-l", "error", "log.txt"])
    assert names.stdout == "log.txt\n"


def test_grep_multi_file_prefixes(guard, work_root):
    put(work_root, "p.txt", "needle\n")
    put(work_root, "q.txt", "needle\n")
    out = run_builtin(guard, "grep", ["needle", "p.txt", "q.txt"])
    assert out.stdout == "p.txt:needle\nq.txt:needle\n"


def test_head_default_and_explicit(guard, work_root):
    put(work_root, "many.txt", "".join(f"l{i}\n" for i in range(20)))
    assert run_builtin(guard, "head", ["many.txt"]).stdout.count("\n") == 10
    out = run_builtin(guard, "head", ["-n", "3", "many.txt"])
    assert out.stdout == "l0\nl1\nl2\n"


def test_wc_columns(guard, work_root):
    put(work_root, "w.txt", "one two\nthree\n")
    assert run_builtin(guard, "wc", ["-l", "w.txt"]).stdout == "2 w.txt\n"
    assert run_builtin(guard, "wc", ["-w", "w.txt"]).stdout == "3 w.txt\n"
    full = run_builtin(guard, "wc", ["w.txt"]).stdout
    assert full == "2 3 14 w.txt\n"


def test_sort_modes_and_output_file(guard, work_root):
    put(work_root, "nums.txt", "10\n2\n33\n")
    assert run_builtin(guard, "sort", ["nums.txt"]).stdout == "10\n2\n33\n"
    assert run_builtin(guard, "sort", ["-n", "nums.txt"]).stdout == "2\n10\n33\n"
    assert run_builtin(guard, "sort", ["-r", "nums.txt"]).stdout == "33\n2\n10\n"
    out = run_builtin(guard, "sort", ["-n", "-o", "sorted.txt", "nums.txt"])
    assert out.exit_code == 0
    assert (work_root / "sorted.txt").read_text() == "2\n10\n33\n"


def test_chmod_octal_only(guard, work_root):
    put(work_root, "f.sh", "#!/bin/sh\n")
    assert run_builtin(guard, "chmod", ["755", "f.sh"]).exit_code == 0
    assert stat.S_IMODE(os.stat(work_root / "f.sh").st_mode) == 0o755
    out = run_builtin(guard, "chmod", ["u+x", "f.sh"])
    assert out.exit_code == 1
    assert "octal" in out.stderr


def test_ln_symlink_and_hardlink(guard, work_root):
    put(work_root, "orig.txt", "O")
    assert run_builtin(guard, "ln", ["-s", "orig.txt", "link.txt"]).exit_code == 0
    assert (work_root / "link.txt").is_symlink()
    assert run_builtin(guard, "ln", ["orig.txt", "hard.txt"]).exit_code == 0
    assert os.stat(work_root / "hard.txt").st_ino == os.stat(work_root / "orig.txt").st_ino


def test_truncate(guard, work_root):
    put(work_root, "t.bin", "abcdefgh")
    assert run_builtin(guard, "truncate", ["-s", "3", "t.bin"]).exit_code == 0
    assert (work_root / "t.bin").read_bytes() == b"abc"
    assert run_builtin(guard, "truncate", ["-s", "6", "t.bin"]).exit_code == 0
    assert (work_root / "t.bin").read_bytes() == b"abc\0\0\0"


def test_unknown_flag_is_usage_error(guard, work_root):
    put(work_root, "a.txt", "x")
    out = run_builtin(guard, "rm", ["--no-such-flag", "a.txt"])
    assert out.exit_code == 2
    assert (work_root / "a.txt").exists()


def test_builtin_mutations_are_journaled(store, guard, work_root):
    put(work_root, "gone.txt", "bye")
    run_builtin(guard, "rm", ["gone.txt"])
    run_builtin(guard, "touch", ["new.txt"])
    lines = store.journal_path(1).read_text().splitlines()
    paths = sorted(__import__("json").loads(l)["path"] for l in lines)
    assert paths == ["gone.txt", "new.txt"]


# -- external processes under scan supervision --------------------------------


def test_run_external_captures_and_reconciles(store, guard, work_root):
    put(work_root, "in.txt", "zeta\nalpha\n")
    plan = plan_isolation("deny")
    out = run_external(
        guard,
        [],
        plan,
        env={"PATH": os.environ["PATH"]},
        shell_script="sed -n 1p in.txt > first.txt",
    )
    assert out.exit_code == 0
    assert (work_root / "first.txt").read_text() == "zeta\n"
    meta = store.read_meta(1)
    assert meta["scans"][-1]["state"] == "reconciled"
    assert meta["scans"][-1]["exit_code"] == 0
    # the spawned process's creation was reconciled into the journal
    lines = store.journal_path(1).read_text().splitlines()
    created = [
        l for l in lines if '"first.txt"' in l and '"create"' in l
    ]
    assert created


def test_run_external_missing_command(guard):
    plan = plan_isolation("deny")
    out = run_external(guard, ["definitely-not-a-command-xyz"], plan,
                       env={"PATH": "/nonexistent"})
    assert out.exit_code == 127


def test_run_external_refused_without_isolation(guard):
    from nash.namespaces import IsolationPlan

    broken = IsolationPlan(network="deny", mechanism="none")
    with pytest.raises(GuardError):
        run_external(guard, ["true"], broken, env={})


# -- egress descriptors -------------------------------------------------------


def test_descriptor_simple_get():
    d = build_descriptor("curl", ["-s", "-o", "out.bin", "http://example.com/f"])
    assert d["method"] == "GET"
    assert d["destination"] == "example.com"
    assert d["url"] == "http://example.com/f"
    assert d["output"] == "out.bin"
    assert d["payload_refs"] == []
    assert "-o out.bin" in d["parameters"]


def test_descriptor_post_forms():
    literal = build_descriptor("curl", ["-d", "k=v", "http://api.example.com/x"])
    assert literal["method"] == "POST"
    assert literal["literal_data"] == ["k=v"]
    assert literal["payload_refs"] == []

    fromfile = build_descriptor("curl", ["-d", "@body.json", "http://api.example.com/x"])
    assert fromfile["payload_refs"] == ["body.json"]
    assert input_paths(fromfile) == ["body.json"]


def test_descriptor_upload_is_put():
    d = build_descriptor("curl", ["-T", "big.tar", "http://example.com/up"])
    assert d["method"] == "PUT"
    assert d["payload_refs"] == ["big.tar"]


def test_descriptor_explicit_method_wins():
    d = build_descriptor("curl", ["-X", "DELETE", "http://example.com/r"])
    assert d["method"] == "DELETE"


def test_descriptor_wget_default_output():
    d = build_descriptor("wget", ["http://example.com/pkg/file.tar.gz"])
    assert d["output"] == "file.tar.gz"
    bare = build_descriptor("wget", ["http://example.com/"])
    assert bare["output"] == "index.html"
    named = build_descriptor("wget", ["-O", "saved.bin", "http://example.com/x"])
    assert named["output"] == "saved.bin"


def test_descriptor_tolerates_unknown_flags():
    d = build_descriptor("curl", ["--retry", "3", "http://example.com/f"])
    assert d["destination"] == "example.com"
    assert any(p.startswith("--retry") for p in d["parameters"])


# -- post-approval transfer ---------------------------------------------------


class _Resp(io.BytesIO):
    status = 200

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def test_egress_execute_download_via_guard(store, guard, work_root):
    seen = {}

    def opener(req, timeout=None):
        seen["url"] = req.full_url
        seen["method"] = req.get_method()
        return _Resp(b"remote bytes")

    d = build_descriptor("curl", ["-o", "fetched.bin", "http://example.com/f"])
    out = egress_execute(guard, d, opener=opener)
    assert out.exit_code == 0
    assert seen == {"url": "http://example.com/f", "method": "GET"}
    assert (work_root / "fetched.bin").read_bytes() == b"remote bytes"
    # the write went through the guard, so it is journaled
    assert '"fetched.bin"' in store.journal_path(1).read_text()


def test_egress_execute_upload_reads_payload(guard, work_root):
    put(work_root, "payload.json", '{"k": 1}')
    captured = {}

    def opener(req, timeout=None):
        captured["data"] = req.data
        captured["method"] = req.get_method()
        return _Resp(b"ok")

    d = build_descriptor("curl", ["-d", "@payload.json", "http://api.example.com/in"])
    out = egress_execute(guard, d, opener=opener)
    assert out.exit_code == 0
    assert captured == {"data": b'{"k": 1}', "method": "POST"}
    assert out.reads == ("payload.json",)
    assert out.stdout == "ok"


def test_egress_execute_missing_payload_fails(guard):
    d = build_descriptor("curl", ["-d", "@absent.bin", "http://example.com/x"])
    out = egress_execute(guard, d, opener=lambda *a, **k: _Resp(b""))
    assert out.exit_code == 1
    assert "absent.bin" in out.stderr


def test_egress_execute_network_error_exit_7(guard):
    import urllib.error

    def opener(req, timeout=None):
        raise urllib.error.URLError("unreachable")

    d = build_descriptor("curl", ["http://example.com/x"])
    out = egress_execute(guard, d, opener=opener)
    assert out.exit_code == 7
