"""Shared builders for tests: canonical sample artifacts and tree helpers."""

from nash.artifact import (
    AdapterTask,
    Edge,
    Exists,
    ExtEq,
    ForEachNode,
    IfNode,
    IsFile,
    LitSeg,
    PBase,
    PConcat,
    PLit,
    PVar,
    ScriptArtifact,
    SeqNode,
    TaskNode,
    VarSeg,
    WorkflowGraph,
    finalize,
)

SWP_SIBLING = PConcat((PLit("."), PBase(PVar("f")), PLit(".swp")))


def cleanup_artifact() -> ScriptArtifact:
    """The swap-file cleanup workflow: for-each over *, nested tests, rm.

    Decision structure: skip non-files; delete *.swp files outright; for
    other files delete a stale .<name>.swp sibling when one exists.
    """
    rm = AdapterTask(
        task_id="rm",
        command="rm",
        argv=(LitSeg("--"), VarSeg("p1")),
        io_roles=(("p1", "input-file"),),
        egress=False,
        task_prompt="delete one file",
    )
    nodes = (
        ForEachNode("n1", "*", "f", "n2"),
        IfNode("n2", IsFile(PVar("f")), "n3", None),
        IfNode("n3", ExtEq(PVar("f"), "swp"), "n4", "n5"),
        TaskNode("n4", "rm", (("p1", PVar("f")),)),
        IfNode("n5", Exists(SWP_SIBLING), "n6", None),
        TaskNode("n6", "rm", (("p1", SWP_SIBLING),)),
    )
    art = ScriptArtifact(
        artifact_id="",
        nl_prompt="delete all the editor swap files in this directory, "
        "and stale swap files for files that still exist",
        workflow=WorkflowGraph(root="n1", nodes=nodes, edges=()),
        tasks=(rm,),
        backend_id="mock",
        created_at="1970-01-01T00:00:00Z",
    )
    return finalize(art)


def download_artifact(urls_outputs) -> ScriptArtifact:
    """N independent `curl -o OUT URL` invocations under one sequence."""
    curl = AdapterTask(
        task_id="fetch",
        command="curl",
        argv=(LitSeg("-s"), LitSeg("-o"), VarSeg("p1"), VarSeg("p2")),
        io_roles=(("p1", "output-file"), ("p2", "other")),
        egress=True,
        task_prompt="download one url",
    )
    nodes = []
    children = []
    for i, (url, out) in enumerate(urls_outputs, start=1):
        nid = f"n{i + 1}"
        children.append(nid)
        nodes.append(
            TaskNode(nid, "fetch", (("p1", PLit(out)), ("p2", PLit(url))))
        )
    nodes.insert(0, SeqNode("n1", tuple(children)))
    art = ScriptArtifact(
        artifact_id="",
        nl_prompt="download the files",
        workflow=WorkflowGraph(root="n1", nodes=tuple(nodes), edges=()),
        tasks=(curl,),
        backend_id="mock",
        created_at="1970-01-01T00:00:00Z",
    )
    return finalize(art)


def chain_artifact(url: str, mid: str, dest: str) -> ScriptArtifact:
    """curl -o mid URL, then cp mid dest, with a data edge between them."""
    curl = AdapterTask(
        task_id="fetch",
        command="curl",
        argv=(LitSeg("-s"), LitSeg("-o"), VarSeg("p1"), VarSeg("p2")),
        io_roles=(("p1", "output-file"), ("p2", "other")),
        egress=True,
        task_prompt="download one url",
    )
    cp = AdapterTask(
        task_id="copy",
        command="cp",
        argv=(VarSeg("p1"), VarSeg("p2")),
        io_roles=(("p1", "input-file"), ("p2", "output-file")),
        egress=False,
        task_prompt="copy a file",
    )
    nodes = (
        SeqNode("n1", ("n2", "n3")),
        TaskNode("n2", "fetch", (("p1", PLit(mid)), ("p2", PLit(url)))),
        TaskNode("n3", "copy", (("p2", PLit(dest)),)),
    )
    edges = (Edge("data", "n2", "p1", "n3", "p1"),)
    art = ScriptArtifact(
        artifact_id="",
        nl_prompt="download then copy",
        workflow=WorkflowGraph(root="n1", nodes=nodes, edges=edges),
        tasks=(curl, cp),
        backend_id="mock",
        created_at="1970-01-01T00:00:00Z",
    )
    return finalize(art)
