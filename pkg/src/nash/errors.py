"""Exception hierarchy shared across the runtime."""


class NashError(Exception):
    """Base class for all errors raised by this package."""


class ArtifactSyntaxError(NashError):
    """Malformed artifact or shell text; carries a position."""

    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        self.line = line
        self.col = col
        where = f" at line {line}" if line is not None else ""
        where += f", col {col}" if col is not None else ""
        super().__init__(f"{message}{where}")


class ArtifactReferenceError(NashError):
    """Undefined task, node, or variable referenced by an artifact."""


class ArtifactCycleError(NashError):
    """Workflow structure or dependency edges contain a cycle."""


class ArtifactIntegrityError(NashError):
    """Stated artifact id does not match the canonical content hash."""


class ShellOutOfGrammar(NashError):
    """Shell text uses constructs outside the composition grammar."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"{message} at line {line}")


class StoreError(NashError):
    """Layer-store problem: missing epoch, bad state, lock contention."""


class EpochStateError(StoreError):
    """Operation applied to an epoch in the wrong lifecycle state."""


class GuardError(NashError):
    """Guard mount/stash failure.  Stash failures are fail-closed."""


class PathOutsideGuard(GuardError):
    """A supervised mutation tried to escape the guarded root."""


class BackendError(NashError):
    """Code-generation backend failure (transport or refusal), surfaced verbatim."""


class EgressError(NashError):
    """Egress gate misuse: unknown request, partial decisions."""


class EgressDenied(EgressError):
    """Hard deny: a non-allowlisted tool attempted an external call."""


class AnnotationError(NashError):
    """Malformed command annotation file; names the file."""


class UsageError(NashError):
    """User-facing CLI/REPL mistake (exit code 1)."""
