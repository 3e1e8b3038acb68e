import dataclasses

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import chain_artifact, cleanup_artifact, download_artifact
from nash.artifact import (
    FORMAT_MARKER,
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
    canonical_shape,
    compute_artifact_id,
    eval_path,
    finalize,
    negate,
    parse_artifact,
    serialize,
    validate,
)
from nash.errors import (
    ArtifactCycleError,
    ArtifactIntegrityError,
    ArtifactReferenceError,
    ArtifactSyntaxError,
)


def test_cleanup_artifact_validates():
    art = cleanup_artifact()
    assert art.artifact_id
    validate(art)


def test_serialize_starts_with_marker_and_id():
    text = serialize(cleanup_artifact())
    lines = text.splitlines()
    assert lines[0] == FORMAT_MARKER
    assert lines[1].startswith("#%id:")


def test_round_trip_is_byte_stable():
    text = serialize(cleanup_artifact())
    again = serialize(parse_artifact(text))
    assert again == text


def test_round_trip_preserves_structure():
    art = cleanup_artifact()
    back = parse_artifact(serialize(art))
    assert canonical_shape(back) == canonical_shape(art)
    assert back.artifact_id == art.artifact_id


def test_round_trip_chain_with_data_edge():
    art = chain_artifact("http://example.test/a.csv", "raw.csv", "copy.csv")
    back = parse_artifact(serialize(art))
    assert back.workflow.edges == art.workflow.edges
    assert canonical_shape(back) == canonical_shape(art)


def test_id_ignores_created_and_id_lines():
    art = cleanup_artifact()
    moved = dataclasses.replace(art, created_at="2031-05-05T00:00:00Z")
    assert compute_artifact_id(moved) == art.artifact_id


def test_id_depends_on_prompt():
    art = cleanup_artifact()
    changed = dataclasses.replace(art, nl_prompt="something else")
    assert compute_artifact_id(changed) != art.artifact_id


def test_parse_rejects_wrong_stated_id():
    text = serialize(cleanup_artifact())
    lines = text.splitlines()
    lines[1] = "#%id:" + "0" * 64
    with pytest.raises(ArtifactIntegrityError):
        parse_artifact("\n".join(lines))


def test_parse_rejects_missing_marker():
    with pytest.raises(ArtifactSyntaxError):
        parse_artifact("#!/bin/sh\n")


def test_parse_error_has_line_number():
    text = serialize(cleanup_artifact()) + "\n(dangling"
    with pytest.raises(ArtifactSyntaxError) as err:
        parse_artifact(text)
    assert err.value.line > 1


def node_ids(art):
    return [n.node_id for n in art.workflow.nodes]


def test_canonical_shape_is_node_id_independent():
    art = cleanup_artifact()
    mapping = {nid: f"k{i}" for i, nid in enumerate(node_ids(art), start=1)}

    def rename(node):
        node = dataclasses.replace(node, node_id=mapping[node.node_id])
        if isinstance(node, SeqNode):
            node = dataclasses.replace(
                node, children=tuple(mapping[c] for c in node.children)
            )
        elif isinstance(node, ForEachNode):
            node = dataclasses.replace(node, body=mapping[node.body])
        elif isinstance(node, IfNode):
            node = dataclasses.replace(
                node,
                then=mapping.get(node.then),
                els=mapping.get(node.els),
            )
        return node

    renamed = dataclasses.replace(
        art,
        workflow=WorkflowGraph(
            root=mapping[art.workflow.root],
            nodes=tuple(rename(n) for n in art.workflow.nodes),
            edges=(),
        ),
    )
    assert canonical_shape(renamed) == canonical_shape(art)


def simple_artifact(nodes, tasks, root="n1", edges=()):
    return ScriptArtifact(
        artifact_id="",
        nl_prompt="p",
        workflow=WorkflowGraph(root=root, nodes=nodes, edges=edges),
        tasks=tasks,
        backend_id="mock",
        created_at="1970-01-01T00:00:00Z",
    )


ECHO = AdapterTask("say", "echo", (VarSeg("p1"),), (("p1", "other"),))


def test_validate_rejects_unknown_root():
    art = simple_artifact((SeqNode("n1", ()),), (), root="zz")
    with pytest.raises(ArtifactReferenceError):
        validate(art)


def test_validate_rejects_unknown_task_ref():
    art = simple_artifact((TaskNode("n1", "ghost"),), (ECHO,))
    with pytest.raises(ArtifactReferenceError):
        validate(art)


def test_validate_rejects_structural_cycle():
    art = simple_artifact((SeqNode("n1", ("n1",)),), ())
    with pytest.raises(ArtifactCycleError):
        validate(art)


def test_validate_rejects_unreachable_node():
    art = simple_artifact(
        (TaskNode("n1", "say", (("p1", PLit("x")),)),
         TaskNode("n2", "say", (("p1", PLit("y")),))),
        (ECHO,),
    )
    with pytest.raises(ArtifactReferenceError):
        validate(art)


def test_validate_rejects_orphan_task():
    art = simple_artifact(
        (TaskNode("n1", "say", (("p1", PLit("x")),)),),
        (ECHO, AdapterTask("other", "echo", (VarSeg("p1"),), (("p1", "other"),))),
    )
    with pytest.raises(ArtifactReferenceError):
        validate(art)


def test_validate_rejects_unbound_variable():
    art = simple_artifact((TaskNode("n1", "say"),), (ECHO,))
    with pytest.raises(ArtifactReferenceError):
        validate(art)


def test_loop_variable_counts_as_bound():
    art = simple_artifact(
        (
            ForEachNode("n1", "*.txt", "f", "n2"),
            TaskNode("n2", "say", (("p1", PVar("f")),)),
        ),
        (ECHO,),
    )
    validate(art)


def test_validate_rejects_out_of_scope_variable():
    art = simple_artifact(
        (
            SeqNode("n1", ("n2", "n3")),
            ForEachNode("n2", "*", "f", "n4"),
            TaskNode("n3", "say", (("p1", PVar("f")),)),
            TaskNode("n4", "say", (("p1", PVar("f")),)),
        ),
        (ECHO,),
    )
    with pytest.raises(ArtifactReferenceError):
        validate(art)


def test_validate_rejects_egress_on_non_allowlisted_command():
    bad = AdapterTask(
        "del", "rm", (VarSeg("p1"),), (("p1", "input-file"),), egress=True
    )
    art = simple_artifact(
        (TaskNode("n1", "del", (("p1", PLit("x")),)),), (bad,)
    )
    with pytest.raises(ArtifactReferenceError):
        validate(art)


def test_validate_rejects_dependency_cycle():
    cp = AdapterTask(
        "copy",
        "cp",
        (VarSeg("p1"), VarSeg("p2")),
        (("p1", "input-file"), ("p2", "output-file")),
    )
    nodes = (
        SeqNode("n1", ("n2", "n3")),
        TaskNode("n2", "copy", (("p1", PLit("a")), ("p2", PLit("b")))),
        TaskNode("n3", "copy", (("p1", PLit("b")), ("p2", PLit("a")))),
    )
    edges = (
        Edge("data", "n2", "p2", "n3", "p1"),
        Edge("data", "n3", "p2", "n2", "p1"),
    )
    art = simple_artifact(nodes, (cp,), edges=edges)
    with pytest.raises(ArtifactCycleError):
        validate(art)


def test_validate_rejects_data_edge_with_wrong_roles():
    art = chain_artifact("http://example.test/a", "m", "d")
    bad_edges = (Edge("data", "n2", "p2", "n3", "p1"),)  # p2 is not an output
    broken = dataclasses.replace(
        art, workflow=dataclasses.replace(art.workflow, edges=bad_edges)
    )
    with pytest.raises(ArtifactReferenceError):
        validate(broken)


def test_eval_path_expressions():
    env = {"f": "docs/report.txt"}
    assert eval_path(PVar("f"), env) == "docs/report.txt"
    assert eval_path(PBase(PVar("f")), env) == "report.txt"
    assert eval_path(PDir(PVar("f")), env) == "docs"
    assert eval_path(PStripExt(PVar("f")), env) == "docs/report"
    swp = PConcat((PLit("."), PBase(PVar("f")), PLit(".swp")))
    assert eval_path(swp, env) == ".report.txt.swp"


def test_negate_eliminates_double_negation():
    atom = IsFile(PVar("f"))
    assert negate(negate(atom)) == atom
    assert negate(atom) == Not(atom)


def test_download_artifact_has_independent_tasks():
    art = download_artifact(
        [(f"http://example.test/{i}", f"out{i}") for i in range(4)]
    )
    assert len([n for n in art.workflow.nodes if isinstance(n, TaskNode)]) == 4
    assert art.workflow.edges == ()


# --- property tests ---------------------------------------------------------

path_exprs = st.recursive(
    st.one_of(
        st.sampled_from([PVar("f"), PVar("g")]),
        st.text(
            alphabet="abcxyz./-_", min_size=1, max_size=8
        ).map(PLit),
    ),
    lambda inner: st.one_of(
        inner.map(PBase),
        inner.map(PDir),
        inner.map(PStripExt),
        st.lists(inner, min_size=2, max_size=3).map(
            lambda ps: PConcat(tuple(ps))
        ),
    ),
    max_leaves=6,
)

predicates = st.recursive(
    st.one_of(
        path_exprs.map(IsFile),
        path_exprs.map(IsDir),
        path_exprs.map(Exists),
        st.tuples(path_exprs, st.sampled_from(["swp", "txt"])).map(
            lambda t: ExtEq(*t)
        ),
        st.tuples(path_exprs, path_exprs).map(lambda t: StrEq(*t)),
    ),
    lambda inner: st.one_of(
        inner.map(negate),
        st.lists(inner, min_size=2, max_size=3).map(lambda ps: And(tuple(ps))),
    ),
    max_leaves=8,
)


@given(predicates)
def test_negate_is_involutive(pred):
    assert negate(negate(pred)) == pred


@given(predicates)
def test_predicates_round_trip_through_artifact_text(pred):
    art = simple_artifact(
        (
            ForEachNode("n1", "*", "f", "n2"),
            IfNode("n2", pred, "n3", None),
            TaskNode("n3", "say", (("p1", PVar("f")),)),
        ),
        (ECHO,),
    )
    # close over both loop variables so any generated var is in scope
    art = dataclasses.replace(
        art,
        workflow=dataclasses.replace(
            art.workflow,
            nodes=(
                ForEachNode("n0", "*", "g", "n1"),
                ForEachNode("n1", "*", "f", "n2"),
                IfNode("n2", pred, "n3", None),
                TaskNode("n3", "say", (("p1", PVar("f")),)),
            ),
            root="n0",
        ),
    )
    back = parse_artifact(serialize(art))
    (if_node,) = [n for n in back.workflow.nodes if isinstance(n, IfNode)]
    assert if_node.pred == pred
