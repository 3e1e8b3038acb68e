import pytest

from helpers import chain_artifact, cleanup_artifact, download_artifact
from nash.artifact import (
    And,
    ExtEq,
    ForEachNode,
    IfNode,
    IsFile,
    Not,
    PVar,
    SeqNode,
    TaskNode,
    canonical_shape,
)
from nash.errors import ShellOutOfGrammar
from nash.shellio import lower_to_shell, opaque_artifact, shell_to_artifact

CLEANUP_SH = """\
for f in *; do
  if [ -f "$f" ]; then
    if [ "${f##*.}" = "swp" ]; then
      rm -- "$f"
    else
      if [ -e ".$(basename "$f").swp" ]; then
        rm -- ".$(basename "$f").swp"
      fi
    fi
  fi
done
"""


def test_lower_cleanup_matches_expected_script():
    text = lower_to_shell(cleanup_artifact())
    assert text == "#!/bin/sh\n" + CLEANUP_SH


def test_lowered_script_round_trips_to_isomorphic_graph():
    art = cleanup_artifact()
    back = shell_to_artifact(lower_to_shell(art))
    assert canonical_shape(back) == canonical_shape(art)


def test_read_shell_builds_for_if_structure():
    art = shell_to_artifact(CLEANUP_SH)
    (loop,) = [n for n in art.workflow.nodes if isinstance(n, ForEachNode)]
    assert loop.glob == "*" and loop.var == "f"
    ifs = [n for n in art.workflow.nodes if isinstance(n, IfNode)]
    assert len(ifs) == 3


def test_read_shell_dedupes_task_shapes():
    art = shell_to_artifact(CLEANUP_SH)
    assert [t.task_id for t in art.tasks] == ["rm"]
    rm = art.tasks[0]
    assert rm.command == "rm"
    assert rm.role_of("p1") == "input-file"


def test_roles_come_from_annotations():
    art = shell_to_artifact("cp a.txt b.txt\n")
    (task,) = art.tasks
    assert task.role_of("p1") == "input-file"
    assert task.role_of("p2") == "output-file"


def test_curl_dash_o_value_is_an_output_operand():
    art = shell_to_artifact("curl -s -o data.csv http://example.test/d.csv\n")
    (task,) = art.tasks
    assert task.egress is True
    roles = dict(task.io_roles)
    assert "output-file" in roles.values()


def test_data_edge_inferred_from_matching_paths():
    text = (
        "curl -s -o raw.csv http://example.test/a.csv\n"
        "cp raw.csv copy.csv\n"
    )
    art = shell_to_artifact(text)
    data = [e for e in art.workflow.edges if e.kind == "data"]
    assert len(data) == 1
    edge = data[0]
    src = art.workflow.node(edge.src)
    dst = art.workflow.node(edge.dst)
    assert art.task(src.task_id).command == "curl"
    assert art.task(dst.task_id).command == "cp"


def test_no_data_edge_between_unrelated_paths():
    art = shell_to_artifact("cp a b\ncp c d\n")
    assert [e for e in art.workflow.edges if e.kind == "data"] == []


def test_unannotated_commands_get_control_edges():
    art = shell_to_artifact("frobnicate a\ndefrobnicate b\n")
    ctrl = [e for e in art.workflow.edges if e.kind == "control"]
    assert len(ctrl) == 1


def test_annotated_commands_get_no_control_edge():
    art = shell_to_artifact("cp a b\ncp c d\n")
    assert [e for e in art.workflow.edges if e.kind == "control"] == []


def test_double_bracket_and_negation():
    text = (
        "for f in *; do\n"
        '  if [[ ! -f "$f" ]]; then\n'
        "    mkdir -- out\n"
        "  fi\n"
        "done\n"
    )
    art = shell_to_artifact(text)
    (if_node,) = [n for n in art.workflow.nodes if isinstance(n, IfNode)]
    assert if_node.pred == Not(IsFile(PVar("f")))


def test_conjunction_normalizes_to_and():
    text = 'if [ -f "$f" ] && [ "${f##*.}" = "swp" ]; then\n  rm -- "$f"\nfi\n'
    art = shell_to_artifact("for f in *; do\n" + text + "done\n")
    (if_node,) = [n for n in art.workflow.nodes if isinstance(n, IfNode)]
    assert if_node.pred == And((IsFile(PVar("f")), ExtEq(PVar("f"), "swp")))


def test_disjunction_normalizes_via_de_morgan():
    text = "for f in *; do\nif [ -f \"$f\" ] || [ -d \"$f\" ]; then\n  rm -- \"$f\"\nfi\ndone\n"
    art = shell_to_artifact(text)
    (if_node,) = [n for n in art.workflow.nodes if isinstance(n, IfNode)]
    pred = if_node.pred
    assert isinstance(pred, Not) and isinstance(pred.inner, And)


def test_elif_desugars_to_nested_if():
    text = (
        "for f in *; do\n"
        'if [ -f "$f" ]; then\n'
        '  rm -- "$f"\n'
        'elif [ -d "$f" ]; then\n'
        "  rmdir -- \"$f\"\n"
        "fi\n"
        "done\n"
    )
    art = shell_to_artifact(text)
    ifs = [n for n in art.workflow.nodes if isinstance(n, IfNode)]
    assert len(ifs) == 2


@pytest.mark.parametrize(
    "script",
    [
        "cat a | sort\n",
        "echo hi > out.txt\n",
        "wc -l < in.txt\n",
        "(cd /tmp)\n",
        "echo `date`\n",
        "sleep 5 &\n",
        "x=$((1+2))\n",
        "rm $(ls)\n",
    ],
)
def test_out_of_grammar_constructs_raise(script):
    with pytest.raises(ShellOutOfGrammar):
        shell_to_artifact(script)


def test_out_of_grammar_error_carries_line():
    with pytest.raises(ShellOutOfGrammar) as err:
        shell_to_artifact("cp a b\ncat a | sort\n")
    assert err.value.line == 2


def test_opaque_artifact_wraps_raw_script():
    script = "cat a | sort\n"
    art = opaque_artifact(script, nl_prompt="sort it")
    (task,) = art.tasks
    assert task.opaque is True
    assert task.script == script
    assert art.has_warnings


def test_lower_opaque_reproduces_raw_script():
    script = "cat a | sort -r\nwc -l x\n"
    art = opaque_artifact(script)
    lowered = lower_to_shell(art)
    assert "cat a | sort -r" in lowered


def test_comments_and_blank_lines_ignored():
    art = shell_to_artifact("#!/bin/sh\n# remove it\n\nrm -- stale.txt\n")
    (node,) = [n for n in art.workflow.nodes if isinstance(n, TaskNode)]
    assert art.task(node.task_id).command == "rm"


def test_semicolon_separates_statements():
    art = shell_to_artifact("cp a b; cp c d\n")
    tasks = [n for n in art.workflow.nodes if isinstance(n, TaskNode)]
    assert len(tasks) == 2
    root = art.workflow.node(art.workflow.root)
    assert isinstance(root, SeqNode)


def test_download_lowering_emits_four_curls():
    art = download_artifact(
        [(f"http://example.test/{i}.bin", f"o{i}.bin") for i in range(4)]
    )
    text = lower_to_shell(art)
    assert text.count("curl -s -o ") == 4


def test_chain_lowering_resolves_data_edge_operand():
    art = chain_artifact("http://example.test/a.csv", "raw.csv", "copy.csv")
    text = lower_to_shell(art)
    assert 'cp "raw.csv" "copy.csv"' in text


def test_chain_round_trip_recovers_data_edge():
    art = chain_artifact("http://example.test/a.csv", "raw.csv", "copy.csv")
    back = shell_to_artifact(lower_to_shell(art))
    data = [e for e in back.workflow.edges if e.kind == "data"]
    assert len(data) == 1


def test_pseudo_command_task_refs():
    from nash.artifact import AdapterTask, LitSeg, VarSeg

    rm = AdapterTask(
        task_id="wipe",
        command="rm",
        argv=(LitSeg("--"), VarSeg("1")),
        io_roles=(("1", "input-file"),),
    )
    art = shell_to_artifact(
        "for f in *.tmp; do\n  t1 \"$f\"\ndone\n", task_refs={"t1": rm}
    )
    assert [t.task_id for t in art.tasks] == ["wipe"]
    (node,) = [n for n in art.workflow.nodes if isinstance(n, TaskNode)]
    assert node.task_id == "wipe"
    assert node.bindings == (("1", PVar("f")),)
