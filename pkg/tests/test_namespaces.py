import socket
import subprocess
import sys
import threading

import pytest

from nash.errors import GuardError
from nash.namespaces import (
    CLONE_NEWNET,
    IsolationPlan,
    check_spawn_allowed,
    plan_isolation,
    preexec_for,
    probe_unshare,
    wrap_argv,
)


def test_plan_allow_never_degrades_network():
    plan = plan_isolation("allow")
    assert plan.network == "allow"
    assert plan.enforced
    assert not any("network denial" in d for d in plan.degraded)


def test_plan_deny_picks_a_mechanism_or_refuses():
    plan = plan_isolation("deny")
    if plan.mechanism == "none":
        assert not plan.enforced
        with pytest.raises(GuardError):
            check_spawn_allowed(plan)
    else:
        assert plan.mechanism in ("netns", "wrapper")
        assert plan.enforced
        check_spawn_allowed(plan)


def test_user_namespace_always_noted():
    plan = plan_isolation("deny")
    assert any("user namespace" in d for d in plan.degraded)


def test_wrap_argv_only_for_wrapper():
    netns = IsolationPlan(network="deny", mechanism="netns")
    assert wrap_argv(netns, ["ls"]) == ["ls"]
    wrapped = IsolationPlan(network="deny", mechanism="wrapper")
    argv = wrap_argv(wrapped, ["ls", "-l"])
    assert argv[1:3] == ["-n", "--"]
    assert argv[-2:] == ["ls", "-l"]


def test_preexec_none_when_nothing_to_do():
    plan = IsolationPlan(network="allow", mechanism="none", pid_fresh=False)
    assert preexec_for(plan) is None


def test_unenforceable_plan_refuses_spawn():
    broken = IsolationPlan(network="deny", mechanism="none")
    with pytest.raises(GuardError) as err:
        check_spawn_allowed(broken)
    assert "refusing to spawn" in str(err.value)


def _free_listener():
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(8)
    return srv, srv.getsockname()[1]


@pytest.mark.skipif(
    not probe_unshare(CLONE_NEWNET), reason="network namespace unavailable"
)
def test_netns_child_cannot_connect_to_local_listener():
    srv, port = _free_listener()
    accepted = []

    def acceptor():
        srv.settimeout(3)
        try:
            while True:
                conn, _ = srv.accept()
                accepted.append(conn)
                conn.close()
        except OSError:
            pass

    thread = threading.Thread(target=acceptor, daemon=True)
    thread.start()
    plan = plan_isolation("deny")
    assert plan.mechanism in ("netns", "wrapper")
    code = (
        "import socket,sys\n"
        "s = socket.socket()\n"
        "s.settimeout(2)\n"
        "try:\n"
        f"    s.connect(('127.0.0.1', {port}))\n"
        "    sys.exit(0)\n"
        "except OSError:\n"
        "    sys.exit(3)\n"
    )
    argv = wrap_argv(plan, [sys.executable, "-c", code])
    proc = subprocess.run(
        argv, preexec_fn=preexec_for(plan), capture_output=True, timeout=20
    )
    srv.close()
    thread.join(timeout=3)
    assert proc.returncode == 3, proc.stderr.decode()
    assert accepted == []


@pytest.mark.skipif(
    not probe_unshare(CLONE_NEWNET), reason="network namespace unavailable"
)
def test_unisolated_control_can_connect():
    """The listener itself works; only isolated children are cut off."""
    srv, port = _free_listener()
    try:
        client = socket.socket()
        client.settimeout(2)
        client.connect(("127.0.0.1", port))
        client.close()
        conn, _ = srv.accept()
        conn.close()
    finally:
        srv.close()


def test_probe_is_cached():
    first = probe_unshare(CLONE_NEWNET)
    second = probe_unshare(CLONE_NEWNET)
    assert first == second
