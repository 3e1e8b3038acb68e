import pytest

from nash.egress import (
    APPROVE,
    DENY,
    DEFAULT_SENSITIVE_PATTERNS,
    EgressRequest,
    Gate,
    is_sensitive,
    render_prompt,
    summarize_taint,
)
from nash.errors import EgressDenied, EgressError
from nash.store import Store
from nash.tasks import build_descriptor


@pytest.fixture
def store(store_root):
    with Store(store_root) as s:
        yield s


@pytest.fixture
def gate(store):
    return Gate(store)


def intercept_get(gate, node, url, out=None, taint=()):
    argv = ["-s"]
    if out:
        argv += ["-o", out]
    argv.append(url)
    return gate.intercept(node, "curl", build_descriptor("curl", argv), taint)


# -- interception -------------------------------------------------------------


def test_intercept_registers_without_executing(gate):
    req = intercept_get(gate, "n2", "http://example.com/a", out="a.bin")
    assert req.request_id == "r1"
    assert req.origin_node == "n2"
    assert gate.pending() == [req]
    assert gate.decision("r1") is None


def test_intercept_assigns_sequential_ids(gate):
    first = intercept_get(gate, "n2", "http://example.com/a")
    second = intercept_get(gate, "n3", "http://example.com/b")
    assert (first.request_id, second.request_id) == ("r1", "r2")


def test_non_allowlisted_tool_hard_denied(store):
    gate = Gate(store, allowlist=("wget",))
    with pytest.raises(EgressDenied):
        gate.intercept("n2", "curl", build_descriptor("curl", ["http://x.example"]))
    events = [e["event"] for e in store.load_egress()]
    assert events == ["denied-tool"]
    assert gate.pending() == []


def test_unknown_request_raises(gate):
    with pytest.raises(EgressError):
        gate.request("r99")
    with pytest.raises(EgressError):
        gate.decision("r99")


# -- taint --------------------------------------------------------------------


def test_sensitive_patterns():
    assert is_sensitive(".ssh/id_rsa")
    assert is_sensitive("home/user/.ssh/config")
    assert is_sensitive("backup/server.key")
    assert is_sensitive(".netrc")
    assert is_sensitive("dir/.bash_history")
    assert not is_sensitive("notes.txt")
    assert not is_sensitive("src/main.py")


def test_tag_taint_sorts_and_flags(gate):
    tags = gate.tag_taint(["report.txt", ".ssh/id_rsa", "data.csv"])
    assert tags == (
        (".ssh/id_rsa", True),
        ("data.csv", False),
        ("report.txt", False),
    )


def test_intercepted_taint_is_tagged(gate):
    req = intercept_get(
        gate, "n2", "http://example.com/x", taint=["secrets.pem", "plain.txt"]
    )
    assert dict(req.taint) == {"secrets.pem": True, "plain.txt": False}
    assert gate.taint_report(req.request_id) == req.taint


def test_custom_sensitive_patterns(store):
    gate = Gate(store, sensitive_patterns=("*.conf",))
    req = intercept_get(
        gate, "n2", "http://example.com/x", taint=["app.conf", "id_rsa"]
    )
    assert dict(req.taint) == {"app.conf": True, "id_rsa": False}


# -- batching -----------------------------------------------------------------


def test_independent_requests_form_one_batch(gate):
    for i in range(4):
        intercept_get(gate, f"n{i + 2}", f"http://example.com/{i}")
    deps = {f"n{i + 2}": set() for i in range(4)}
    batches = gate.batch_prompts(deps)
    assert len(batches) == 1
    assert [r.request_id for r in batches[0].requests] == ["r1", "r2", "r3", "r4"]


def test_dependent_request_held_for_next_round(gate):
    intercept_get(gate, "n2", "http://example.com/first")
    intercept_get(gate, "n3", "http://example.com/second")
    deps = {"n2": set(), "n3": {"n2"}}
    round1 = gate.batch_prompts(deps)
    assert [r.request_id for r in round1[0].requests] == ["r1"]
    gate.resolve(round1[0].batch_id, {"r1": APPROVE})
    round2 = gate.batch_prompts(deps)
    assert [r.request_id for r in round2[0].requests] == ["r2"]


def test_no_pending_means_no_batches(gate):
    assert gate.batch_prompts({}) == []


def test_same_node_requests_stay_together(gate):
    # two loop iterations of one call site are mutually independent
    intercept_get(gate, "n4", "http://example.com/a")
    intercept_get(gate, "n4", "http://example.com/b")
    batches = gate.batch_prompts({"n4": set()})
    assert len(batches) == 1
    assert len(batches[0].requests) == 2


# -- decisions ----------------------------------------------------------------


def test_resolve_requires_full_decision_map(gate):
    intercept_get(gate, "n2", "http://example.com/a")
    intercept_get(gate, "n3", "http://example.com/b")
    [batch] = gate.batch_prompts({})
    with pytest.raises(EgressError, match="partial"):
        gate.resolve(batch.batch_id, {"r1": APPROVE})
    with pytest.raises(EgressError, match="partial"):
        gate.resolve(batch.batch_id, {"r1": APPROVE, "r2": DENY, "r9": DENY})
    with pytest.raises(EgressError):
        gate.resolve(batch.batch_id, {"r1": "maybe", "r2": DENY})
    gate.resolve(batch.batch_id, {"r1": APPROVE, "r2": DENY})
    assert gate.decision("r1") == APPROVE
    assert gate.decision("r2") == DENY
    assert gate.pending() == []


def test_approved_unexecuted_tracking(gate):
    intercept_get(gate, "n2", "http://example.com/a")
    [batch] = gate.batch_prompts({})
    gate.resolve(batch.batch_id, {"r1": APPROVE})
    assert [r.request_id for r in gate.approved_unexecuted()] == ["r1"]
    gate.mark_executed("r1", ok=True)
    assert gate.approved_unexecuted() == []


def test_unknown_batch(gate):
    with pytest.raises(EgressError):
        gate.resolve("b9", {})


# -- durability ---------------------------------------------------------------


def test_gate_state_replays_from_log(store):
    gate = Gate(store)
    intercept_get(gate, "n2", "http://example.com/a", out="a.bin",
                  taint=["input.csv"])
    intercept_get(gate, "n3", "http://example.com/b")
    [batch] = gate.batch_prompts({})
    gate.resolve(batch.batch_id, {"r1": APPROVE, "r2": DENY})
    gate.mark_executed("r1", ok=True)

    fresh = Gate(store)
    assert fresh.decision("r1") == APPROVE
    assert fresh.decision("r2") == DENY
    assert fresh.pending() == []
    assert fresh.approved_unexecuted() == []
    replayed = fresh.request("r1")
    assert replayed.descriptor["output"] == "a.bin"
    assert replayed.taint == (("input.csv", False),)
    assert fresh.batch(batch.batch_id).decisions == {
        "r1": APPROVE, "r2": DENY,
    }


def test_replay_preserves_pending(store):
    gate = Gate(store)
    intercept_get(gate, "n2", "http://example.com/a")
    fresh = Gate(store)
    assert [r.request_id for r in fresh.pending()] == ["r1"]
    # ids keep counting from the replayed state
    req = intercept_get(fresh, "n3", "http://example.com/b")
    assert req.request_id == "r2"


# -- prompt rendering ---------------------------------------------------------


def test_render_prompt_shows_everything(gate):
    intercept_get(gate, "n2", "http://example.com/data.bin", out="data.bin",
                  taint=["notes.txt", ".ssh/id_rsa"])
    [batch] = gate.batch_prompts({})
    text = render_prompt(batch)
    assert text.startswith("pending egress (1 request):")
    assert "[1] curl GET example.com" in text
    assert "writes: data.bin" in text
    assert "reads: notes.txt" in text
    assert "reads: .ssh/id_rsa [SENSITIVE]" in text


def test_render_prompt_numbering(gate):
    for i in range(3):
        intercept_get(gate, f"n{i + 2}", f"http://example.com/{i}")
    [batch] = gate.batch_prompts({})
    text = render_prompt(batch)
    for i in range(1, 4):
        assert f"[{i}] curl" in text


def test_summarize_taint_line():
    req = EgressRequest(
        request_id="r1",
        tool="curl",
        descriptor={},
        origin_node="n2",
        taint=(("a.txt", False), ("b.pem", True)),
        created_at="1970-01-01T00:00:00Z",
    )
    assert summarize_taint(req) == "reads: a.txt, b.pem [SENSITIVE]"
    bare = EgressRequest("r2", "curl", {}, "n2", (), "1970-01-01T00:00:00Z")
    assert summarize_taint(bare) == ""


def test_default_patterns_cover_key_material():
    joined = " ".join(DEFAULT_SENSITIVE_PATTERNS)
    for needle in (".ssh", "id_rsa", "*.pem", ".aws", ".netrc"):
        assert needle in joined
