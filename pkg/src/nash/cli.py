"""The `nash` binary: a thin argparse front over the session commands.

Every subcommand routes through the same Session methods the
interactive loop uses, so scripted invocations (`nash run`, `nash undo`)
behave exactly like their `:command` counterparts.  Exit codes: 0 on
success, 1 for user errors, 2 for internal faults.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import NashError, UsageError
from .executor import SandboxConfig
from .guard import recover_store
from .repl import EGRESS_POLICIES, Session, run_session
from .store import Store
from .testgen import (
    Bounds,
    coverage_run,
    derive_bounds,
    extract_paths,
    random_env,
)

DEFAULT_STORE_NAME = ".nash-store"


class _Parser(argparse.ArgumentParser):
    """argparse's usage failures become UsageError (exit code 1)."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="nash",
        description="guardrailed natural-language shell",
    )
    parser.add_argument(
        "--store",
        default=None,
        help=f"store directory (default: $NASH_STORE or "
             f"<root>/{DEFAULT_STORE_NAME})",
    )
    parser.add_argument(
        "--root",
        default=".",
        help="guard root; commands only touch files under it (default: .)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("repl", help="interactive session")
    p.add_argument("--egress-policy", choices=EGRESS_POLICIES, default="ask")
    p.add_argument("--serial", action="store_true",
                   help="run workflow nodes one at a time")
    p.set_defaults(func=cmd_repl)

    p = sub.add_parser("gen", help="generate an artifact from a prompt")
    p.add_argument("prompt")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="execute a stored artifact")
    p.add_argument("artifact_id")
    p.add_argument("--egress-policy", choices=EGRESS_POLICIES, default="ask")
    p.add_argument("--serial", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("history", help="list epochs")
    p.set_defaults(func=cmd_history)

    p = sub.add_parser("effects", help="effect summary of an epoch")
    p.add_argument("epoch", nargs="?", type=int, default=None)
    p.set_defaults(func=cmd_effects)

    p = sub.add_parser("undo", help="restore an epoch's pre-states")
    p.add_argument("epoch", type=int)
    p.add_argument("--path", action="append", default=[],
                   help="restore only this path (repeatable)")
    p.add_argument("--force", action="store_true",
                   help="restore even over later-epoch or external changes")
    p.set_defaults(func=cmd_undo)

    p = sub.add_parser("commit", help="discard an epoch's undo data")
    p.add_argument("epoch", type=int)
    p.set_defaults(func=cmd_commit)

    p = sub.add_parser("testgen",
                       help="path conditions, environments, coverage")
    p.add_argument("artifact_id")
    p.add_argument("--bounds", default="",
                   help="comma list: files=3,alpha=4,depth=1")
    p.add_argument("--seed", type=int, default=None,
                   help="use randomized environments from this seed")
    p.add_argument("--json", action="store_true", dest="as_json",
                   help="emit the report as JSON")
    p.set_defaults(func=cmd_testgen)

    return parser


def _open(args) -> tuple:
    root = os.path.abspath(args.root)
    store_path = (
        args.store
        or os.environ.get("NASH_STORE")
        or os.path.join(root, DEFAULT_STORE_NAME)
    )
    store = Store(store_path)
    recovered = recover_store(store)
    for eid in recovered:
        print(f"note: epoch {eid} was left open by a crash and has been "
              f"sealed; `nash undo {eid}` reverts it", file=sys.stderr)
    config = SandboxConfig(
        guard_root=root,
        store_path=str(store.root),
        serial=bool(getattr(args, "serial", False)),
    )
    return store, config


def _session(args, **kwargs) -> Session:
    store, config = _open(args)
    return Session(store, config, **kwargs)


def cmd_repl(args) -> int:
    session = _session(args, egress_policy=args.egress_policy)
    run_session(session)
    return 0


def cmd_gen(args) -> int:
    session = _session(args)
    session.dispatch(args.prompt)
    return 0 if session.artifact is not None else 1


def cmd_run(args) -> int:
    session = _session(args, egress_policy=args.egress_policy)
    session.load_artifact(args.artifact_id)
    session.command(":run")
    return 0


def cmd_history(args) -> int:
    session = _session(args)
    session.command(":history")
    return 0


def cmd_effects(args) -> int:
    session = _session(args)
    if args.epoch is None:
        epochs = session.store.list_epoch_ids()
        if not epochs:
            raise UsageError("no epochs yet")
        session.last_epoch = max(epochs)
        session.command(":effects")
    else:
        session.command(":effects", [str(args.epoch)])
    return 0


def cmd_undo(args) -> int:
    session = _session(args)
    argv = [str(args.epoch)]
    for path in args.path:
        argv += ["--path", path]
    if args.force:
        argv.append("--force")
    session.command(":undo", argv)
    return 0


def cmd_commit(args) -> int:
    session = _session(args)
    session.command(":commit", [str(args.epoch)])
    return 0


def _parse_bounds(text: str, artifact) -> Bounds:
    files, alpha, depth = 3, 4, None
    if text:
        for part in text.split(","):
            key, sep, value = part.partition("=")
            if not sep:
                raise UsageError(f"malformed bounds entry {part!r}")
            try:
                number = int(value)
            except ValueError:
                raise UsageError(f"bounds value must be an integer: {part!r}")
            if key == "files":
                files = number
            elif key == "alpha":
                alpha = number
            elif key == "depth":
                depth = number
            else:
                raise UsageError(f"unknown bounds key {key!r}")
    return derive_bounds(extract_paths(artifact), files=files, letters=alpha,
                         depth=depth)


def cmd_testgen(args) -> int:
    session = _session(args)
    session.load_artifact(args.artifact_id)
    artifact = session.artifact
    bounds = _parse_bounds(args.bounds, artifact)
    environments = None
    if args.seed is not None:
        environments = [random_env(bounds, args.seed + i) for i in range(8)]
    report = coverage_run(session.store, artifact,
                          environments=environments, bounds=bounds)
    if args.as_json:
        print(json.dumps(report.to_json_obj(), indent=2, sort_keys=True))
    else:
        print(report.render_table())
        for idx, message in report.errors:
            print(f"  note: environment {idx}: {message}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except NashError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - internal fault path
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
