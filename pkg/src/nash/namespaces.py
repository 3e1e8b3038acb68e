"""Process isolation for external task processes.

External commands run in fresh namespaces; the network namespace is the
load-bearing one (default-deny egress).  Mechanisms are probed once per
process and anything unachievable is recorded as a degradation note so
reports can surface it instead of silently weakening isolation.  When
network denial is requested but no mechanism works, spawning is refused
(fail closed) rather than run unisolated.
"""

from __future__ import annotations

import ctypes
import shutil
import subprocess
import sys
from dataclasses import dataclass, field

from .errors import GuardError

CLONE_NEWNET = 0x40000000
CLONE_NEWPID = 0x20000000

NETWORK_DENY = "deny"
NETWORK_ALLOW = "allow"

_probe_cache: dict = {}


def _unshare(flags: int) -> int:
    libc = ctypes.CDLL(None, use_errno=True)
    if libc.unshare(flags) != 0:
        return ctypes.get_errno()
    return 0


def probe_unshare(flags: int) -> bool:
    """Check (in a throwaway child process) whether unshare(flags) works."""
    if flags in _probe_cache:
        return _probe_cache[flags]
    code = (
        "import ctypes,sys;"
        "libc=ctypes.CDLL(None,use_errno=True);"
        f"sys.exit(0 if libc.unshare({flags})==0 else 1)"
    )
    try:
        rc = subprocess.run(
            [sys.executable, "-c", code],
            stdout=subprocess.DEVNULL,
            stderr=subprocess.DEVNULL,
            timeout=10,
        ).returncode
    except (OSError, subprocess.SubprocessError):
        rc = 1
    _probe_cache[flags] = rc == 0
    return _probe_cache[flags]


def _unshare_binary() -> str | None:
    return shutil.which("unshare")


@dataclass(frozen=True)
class IsolationPlan:
    """How task processes will be isolated, and how far short that falls."""

    network: str = NETWORK_DENY
    mechanism: str = "none"  # netns | wrapper | none
    pid_fresh: bool = False
    degraded: tuple = field(default_factory=tuple)

    @property
    def enforced(self) -> bool:
        return self.network == NETWORK_ALLOW or self.mechanism != "none"


def plan_isolation(network: str = NETWORK_DENY, pid: str = "fresh",
                   user: str = "mapped") -> IsolationPlan:
    degraded = []
    if user == "mapped":
        degraded.append(
            "user namespace not applied (uid mapping unavailable here)"
        )
    pid_fresh = False
    if pid == "fresh":
        if probe_unshare(CLONE_NEWPID):
            pid_fresh = True
            degraded.append(
                "pid namespace applies to the task's children, not the task"
            )
        else:
            degraded.append("pid namespace unavailable")
    if network == NETWORK_ALLOW:
        return IsolationPlan(NETWORK_ALLOW, "none", pid_fresh, tuple(degraded))
    if probe_unshare(CLONE_NEWNET):
        mechanism = "netns"
    elif _unshare_binary() is not None:
        mechanism = "wrapper"
        degraded.append("network namespace via external unshare wrapper")
    else:
        mechanism = "none"
        degraded.append(
            "network denial unenforceable: external tasks will be refused"
        )
    return IsolationPlan(NETWORK_DENY, mechanism, pid_fresh, tuple(degraded))


def wrap_argv(plan: IsolationPlan, argv: list) -> list:
    if plan.mechanism == "wrapper":
        return [_unshare_binary(), "-n", "--"] + list(argv)
    return list(argv)


def preexec_for(plan: IsolationPlan):
    """A preexec_fn applying the plan, or None when nothing to do.

    The network unshare is strict — failure kills the child before exec so
    no un-isolated process ever runs.  The pid unshare is best-effort.
    """
    flags = 0
    if plan.network == NETWORK_DENY and plan.mechanism == "netns":
        flags |= CLONE_NEWNET
    pid_flag = CLONE_NEWPID if plan.pid_fresh else 0
    if not flags and not pid_flag:
        return None

    def preexec():
        if flags and _unshare(flags) != 0:
            raise OSError("unshare(CLONE_NEWNET) failed in child")
        if pid_flag:
            _unshare(pid_flag)  # best-effort

    return preexec


def check_spawn_allowed(plan: IsolationPlan) -> None:
    """Refuse to start an external process that cannot be isolated."""
    if not plan.enforced:
        raise GuardError(
            "refusing to spawn external task: network=deny requested but "
            "no isolation mechanism is available"
        )
