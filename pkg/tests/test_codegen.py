"""Generation pipeline: decompose, generate, feedback, regression."""

import pytest

from nash.artifact import parse_artifact, serialize, validate
from nash.backends import (
    KIND_DECOMPOSE,
    KIND_TASK,
    KIND_WORKFLOW,
    MockBackend,
    MockRule,
)
from nash.codegen import (
    FeedbackExample,
    decompose,
    example_from_epoch,
    generate,
    generate_from_prompt,
    load_examples,
    record_feedback,
    run_regression,
)
from nash.errors import BackendError, UsageError
from nash.executor import SandboxConfig, run
from nash.store import Store
from nash.testgen import EnvEntry, EnvironmentSpec
from treeoracle import tree_hash

SWAP_PROMPT = (
    "I want to delete the swap files that my editor has left behind."
)


@pytest.fixture
def store(store_root):
    return Store(store_root)


@pytest.fixture
def backend():
    return MockBackend()


class TestDecompose:
    def test_swap_prompt_decomposes(self, backend):
        dec = decompose(SWAP_PROMPT, backend)
        assert len(dec.task_prompts) == 1
        assert "task 1" in dec.workflow_prompt
        assert "remove" in dec.task_prompts[0]

    def test_ambiguity_made_explicit(self, backend):
        dec = decompose("delete all log files in the logs directory", backend)
        text = dec.workflow_prompt
        assert "*.log" in text
        assert "top level only" in text
        assert "dotfiles are skipped" in text

    def test_empty_prompt(self, backend):
        with pytest.raises(UsageError):
            decompose("", backend)
        with pytest.raises(UsageError):
            decompose("   \n", backend)

    def test_refusal_surfaces_verbatim(self, backend):
        with pytest.raises(BackendError) as err:
            decompose("translate my cat's meows", backend)
        assert "no decompose rule" in str(err.value)

    def test_malformed_section_label(self):
        rules = (MockRule(KIND_DECOMPOSE, ".", "head task 1\n%% part A\nx"),)
        with pytest.raises(BackendError) as err:
            decompose("p", MockBackend(rules))
        assert "malformed decomposition" in str(err.value)

    def test_nonsequential_task_numbers(self):
        rules = (MockRule(KIND_DECOMPOSE, ".", "head task 2\n%% task 2\nx"),)
        with pytest.raises(BackendError):
            decompose("p", MockBackend(rules))

    def test_unreferenced_task_rejected(self):
        rules = (MockRule(KIND_DECOMPOSE, ".", "just a head\n%% task 1\nx"),)
        with pytest.raises(BackendError):
            decompose("p", MockBackend(rules))

    def test_empty_workflow_prompt_rejected(self):
        rules = (MockRule(KIND_DECOMPOSE, ".", "%% task 1\nx"),)
        with pytest.raises(BackendError):
            decompose("p", MockBackend(rules))


class TestGenerate:
    def test_swap_prompt_end_to_end(self, store, backend):
        art = generate_from_prompt(store, SWAP_PROMPT, backend)
        validate(art)
        assert art.nl_prompt == SWAP_PROMPT
        assert art.backend_id == backend.descriptor.backend_id
        assert not art.has_warnings
        task = art.task("t1")
        assert task.command == "rm"
        assert task.egress is False
        assert task.task_prompt == "remove a given file"

    def test_artifact_is_stored(self, store, backend):
        art = generate_from_prompt(store, SWAP_PROMPT, backend)
        text = store.load_artifact_text(art.artifact_id)
        assert parse_artifact(text) == art

    def test_generation_is_deterministic(self, store, backend):
        texts = set()
        for _ in range(10):
            art = generate_from_prompt(store, SWAP_PROMPT, backend)
            texts.add(serialize(art))
        assert len(texts) == 1

    def test_download_task_is_egress(self, store, backend):
        art = generate_from_prompt(
            store, "download http://h/x.bin to x.bin", backend
        )
        assert art.task("t1").command == "curl"
        assert art.task("t1").egress is True

    def test_parent_recorded(self, store, backend):
        first = generate_from_prompt(store, SWAP_PROMPT, backend)
        second = generate_from_prompt(
            store, SWAP_PROMPT, backend, parent=first.artifact_id
        )
        assert second.parent_artifact == first.artifact_id
        assert second.artifact_id != first.artifact_id

    def test_workflow_refusal_is_not_masked(self, store):
        rules = (
            MockRule(KIND_DECOMPOSE, ".", "use task 1\n%% task 1\nremove"),
            MockRule(KIND_TASK, ".", 'rm -f -- "$1"'),
        )
        with pytest.raises(BackendError) as err:
            generate_from_prompt(store, "p", MockBackend(rules))
        assert "no workflow rule" in str(err.value)

    def test_out_of_grammar_workflow_becomes_opaque(self, store):
        rules = (
            MockRule(KIND_DECOMPOSE, ".", "use task 1\n%% task 1\nremove"),
            MockRule(KIND_WORKFLOW, ".", "ls | grep swp"),
            MockRule(KIND_TASK, ".", 'rm -f -- "$1"'),
        )
        art = generate_from_prompt(store, "p", MockBackend(rules))
        assert art.has_warnings
        task = art.tasks[0]
        assert task.opaque
        assert "ls | grep swp" in task.script
        assert "t1() {" in task.script
        assert 'rm -f -- "$1"' in task.script

    def test_out_of_grammar_task_line_becomes_opaque(self, store):
        rules = (
            MockRule(KIND_DECOMPOSE, ".", "use task 1\n%% task 1\nbackup"),
            MockRule(KIND_WORKFLOW, ".", 't1 "a.txt"'),
            MockRule(KIND_TASK, ".", 'cp -- "$1" "$1.bak"'),
        )
        art = generate_from_prompt(store, "p", MockBackend(rules))
        assert art.has_warnings

    def test_generate_requires_prompts(self, store, backend):
        with pytest.raises(UsageError):
            generate(store, "", [], backend)
        with pytest.raises(UsageError):
            generate(store, "wf", [], backend)


def _env(*entries) -> EnvironmentSpec:
    return EnvironmentSpec(tree=tuple(entries))


def _swap_env() -> EnvironmentSpec:
    return _env(
        EnvEntry("a.swp", "file", "stale\n"),
        EnvEntry("b.txt", "file", "keep me\n"),
        EnvEntry(".b.txt.swp", "file", "sibling\n"),
    )


class TestFeedbackExamples:
    def test_round_trip(self):
        ex = FeedbackExample(
            example_id="ex1",
            environment=_swap_env(),
            prompt_context="swap cleanup",
            expected_effects={"deleted": [".b.txt.swp", "a.swp"]},
            expected_output=None,
        )
        back = FeedbackExample.from_json_obj(ex.to_json_obj())
        assert back == ex

    def test_record_and_load_sorted(self, store):
        for name in ("b", "a"):
            record_feedback(store, "art1", FeedbackExample(name, _env()))
        loaded = load_examples(store, "art1")
        assert [e.example_id for e in loaded] == ["a", "b"]

    def test_no_examples_is_empty(self, store):
        assert load_examples(store, "never-seen") == []

    def test_bad_example_id(self, store):
        with pytest.raises(UsageError):
            record_feedback(store, "a", FeedbackExample("x/y", _env()))
        with pytest.raises(UsageError):
            record_feedback(store, "a", FeedbackExample("", _env()))

    def test_bad_category(self, store):
        ex = FeedbackExample("e", _env(), expected_effects={"vibes": ["x"]})
        with pytest.raises(UsageError):
            record_feedback(store, "a", ex)


class TestExampleFromEpoch:
    def _run_swap(self, store, work_root, backend):
        for name, data in (
            ("a.swp", b"stale\n"),
            ("b.txt", b"keep me\n"),
            (".b.txt.swp", b"sibling\n"),
        ):
            (work_root / name).write_bytes(data)
        art = generate_from_prompt(store, SWAP_PROMPT, backend)
        config = SandboxConfig(guard_root=str(work_root), serial=True)
        return art, run(store, art, config)

    def test_reconstructs_pre_run_tree(self, store, work_root, backend):
        art, report = self._run_swap(store, work_root, backend)
        assert report.ok
        example = example_from_epoch(store, report.epoch_id, "ex1")
        paths = {e.path: e for e in example.environment.tree}
        assert set(paths) == {"a.swp", "b.txt", ".b.txt.swp"}
        assert paths["a.swp"].content == "stale\n"
        assert paths[".b.txt.swp"].content == "sibling\n"
        assert example.expected_effects == {
            "deleted": [".b.txt.swp", "a.swp"],
        }

    def test_recorded_example_replays_green(self, store, work_root, backend):
        art, report = self._run_swap(store, work_root, backend)
        example = example_from_epoch(store, report.epoch_id, "ex1")
        record_feedback(store, art.artifact_id, example)
        results = run_regression(store, art, load_examples(store,
                                                           art.artifact_id))
        assert [(r.example_id, r.passed) for r in results] == [("ex1", True)]

    def test_committed_epoch_refused(self, store, work_root, backend):
        from nash.history import commit

        art, report = self._run_swap(store, work_root, backend)
        commit(store, report.epoch_id)
        with pytest.raises(UsageError):
            example_from_epoch(store, report.epoch_id, "ex1")


class TestRegression:
    def test_empty_suite_is_vacuous(self, store, backend):
        art = generate_from_prompt(store, SWAP_PROMPT, backend)
        assert run_regression(store, art, []) == []

    def test_matching_example_passes(self, store, backend):
        art = generate_from_prompt(store, SWAP_PROMPT, backend)
        ex = FeedbackExample(
            "ex1", _swap_env(),
            expected_effects={"deleted": ["a.swp", ".b.txt.swp"]},
        )
        results = run_regression(store, art, [ex])
        assert results[0].passed, results[0].detail
        assert results[0].detail == ""

    def test_mismatch_names_category_and_path(self, store, backend):
        art = generate_from_prompt(store, SWAP_PROMPT, backend)
        ex = FeedbackExample(
            "ex1", _swap_env(),
            expected_effects={"deleted": ["a.swp"]},
        )
        results = run_regression(store, art, [ex])
        assert not results[0].passed
        assert "deleted: unexpected .b.txt.swp" in results[0].detail

    def test_missing_effect_reported(self, store, backend):
        art = generate_from_prompt(store, SWAP_PROMPT, backend)
        ex = FeedbackExample(
            "ex1", _env(EnvEntry("b.txt", "file", "keep me\n")),
            expected_effects={"deleted": ["a.swp"]},
        )
        results = run_regression(store, art, [ex])
        assert not results[0].passed
        assert "deleted: missing a.swp" in results[0].detail

    def test_expected_output_comparison(self, store, backend):
        art = generate_from_prompt(store, "count lines in notes.txt", backend)
        env = _env(EnvEntry("notes.txt", "file", "a\nb\nc\n"))
        good = FeedbackExample("good", env, expected_output="3 notes.txt")
        bad = FeedbackExample("bad", env, expected_output="7 notes.txt")
        results = run_regression(store, art, [good, bad])
        assert results[0].passed, results[0].detail
        assert not results[1].passed
        assert "output" in results[1].detail

    def test_base_tree_untouched(self, store, work_root, backend, chdir):
        chdir(work_root)
        (work_root / "live.swp").write_bytes(b"do not touch\n")
        before = tree_hash(work_root)
        art = generate_from_prompt(store, SWAP_PROMPT, backend)
        run_regression(store, art, [
            FeedbackExample(
                "ex1", _swap_env(),
                expected_effects={"deleted": ["a.swp", ".b.txt.swp"]},
            ),
        ])
        assert tree_hash(work_root) == before
        assert (work_root / "live.swp").read_bytes() == b"do not touch\n"
