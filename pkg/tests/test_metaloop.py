import json

import numpy as np
import pytest

from flowforge.dsl import parse_workflow, serialize
from flowforge.errors import (
    EmptyTrace,
    MetaClientUnavailable,
    MultipleWorkflowBlocks,
    NoWorkflowBlock,
)
from flowforge.executor import QueryInstance
from flowforge.grpo import normalize_rewards
from flowforge.llm import LlmError
from flowforge.metaloop import (
    MetaLoopConfig,
    RoundRecord,
    append_trace,
    build_meta_prompt,
    build_sft_sample,
    default_instruction,
    export_sft,
    load_traces,
    optimize,
    parse_meta_output,
    placeholder_workflow,
    rollout_group,
    round_delimiter,
    select_best,
    select_best_index,
    trace_from_record,
    trace_to_record,
)
from flowforge.reward import RewardWeights, breakdown, penalty_breakdown
from flowforge.sandbox import StubSandbox

from conftest import scripted_client

GOOD_OUTPUT = """Reasoning first.
```workflow
id: wf
entry: gen
exit: gen
nodes:
  - id: gen
    kind: CodeGenerate
    params:
      prompt: "{problem}"
```
Closing remark."""


def make_record(index, combined, workflow=None, reasoning=""):
    pass_rate = max(0.0, min(1.0, combined))
    return RoundRecord(
        index=index,
        raw_output="",
        reasoning=reasoning or f"thoughts {index}",
        workflow=workflow,
        pass_rate=pass_rate,
        reward=breakdown(pass_rate, 0.0, 0.0, RewardWeights(1.0, 0.0, 0.0))
        if combined >= 0
        else penalty_breakdown(),
    )


class TestBuildMetaPrompt:
    def test_first_round_has_no_feedback(self, query):
        messages = build_meta_prompt(query, [], "be a workflow designer")
        assert len(messages) == 2
        assert messages[0].role == "system"
        assert messages[0].content == "be a workflow designer"
        assert query.problem in messages[1].content
        assert "Feedback" not in messages[1].content
        assert "kind: CodeGenerate" in messages[1].content or "CodeGenerate" in messages[1].content

    def test_history_produces_one_block_per_round(self, query, review_revise):
        records = [
            make_record(1, 0.0, workflow=review_revise),
            RoundRecord(2, "", "", None, 0.0, penalty_breakdown(),
                        invalid=True, error="no block"),
        ]
        messages = build_meta_prompt(query, records, "sys")
        body = messages[1].content
        assert "--- Feedback for round 1 ---" in body
        assert "--- Feedback for round 2 ---" in body
        assert serialize(review_revise).rstrip() in body
        assert "Workflow: INVALID (no block)" in body

    def test_pass_rate_rendered_compactly(self, query, review_revise):
        record = make_record(1, 0.75, workflow=review_revise)
        body = build_meta_prompt(query, [record], "sys")[1].content
        assert "Pass rate: 0.75" in body

    def test_failing_details_included(self, query, review_revise):
        record = RoundRecord(1, "", "", review_revise, 0.5,
                             breakdown(0.5, 0.1, 1.0),
                             failing=("case 2: assertion failed",))
        body = build_meta_prompt(query, [record], "sys")[1].content
        assert "case 2: assertion failed" in body

    def test_empty_instruction_rejected(self, query):
        with pytest.raises(ValueError):
            build_meta_prompt(query, [], "")


class TestParseMetaOutput:
    def test_reasoning_and_workflow_split(self):
        reasoning, workflow = parse_meta_output(GOOD_OUTPUT)
        assert "Reasoning first." in reasoning
        assert "Closing remark." in reasoning
        assert "```" not in reasoning
        assert workflow.id == "wf"

    def test_no_block(self):
        with pytest.raises(NoWorkflowBlock):
            parse_meta_output("just musings, no code")

    def test_multiple_blocks(self):
        doubled = GOOD_OUTPUT + "\n" + GOOD_OUTPUT
        with pytest.raises(MultipleWorkflowBlocks):
            parse_meta_output(doubled)

    def test_other_fences_ignored(self):
        text = "```python\nprint(1)\n```\n" + GOOD_OUTPUT
        reasoning, workflow = parse_meta_output(text)
        assert workflow.id == "wf"
        assert "print(1)" in reasoning


class TestOptimize:
    def test_three_round_fixture_run(self, query, meta_mock, stub_sandbox):
        cfg = MetaLoopConfig(rounds=10, seed=7)
        trace = optimize(query, meta_mock, meta_mock, stub_sandbox, cfg)
        assert len(trace.rounds) == 3  # early stop at the perfect round
        assert [r.pass_rate for r in trace.rounds] == [0.0, 0.75, 1.0]
        assert trace.selected == 3
        assert select_best(trace).id == "wf3"
        assert all(not r.invalid for r in trace.rounds)
        # feedback accumulates: round-3 prompt saw the 0.75 round
        assert trace.rounds[1].failing  # the partial round reports failures

    def test_no_early_stop_runs_all_rounds(self, query, meta_mock, stub_sandbox):
        cfg = MetaLoopConfig(rounds=3, early_stop=False, seed=7)
        trace = optimize(query, meta_mock, meta_mock, stub_sandbox, cfg)
        assert len(trace.rounds) == 3
        assert trace.selected == 3

    def test_duplicate_workflow_scores_zero_distinctness(self, query, stub_sandbox):
        body = GOOD_OUTPUT
        meta = scripted_client({"q1/round1": body, "q1/round2": body})
        worker = scripted_client({"default": "# PARTIAL"})
        cfg = MetaLoopConfig(rounds=2, early_stop=False)
        trace = optimize(query, meta, worker, stub_sandbox, cfg)
        assert trace.rounds[0].reward.distinctness == 1.0
        assert trace.rounds[1].reward.distinctness == 0.0

    def test_garbage_rounds_are_penalties_not_aborts(self, query, stub_sandbox):
        meta = scripted_client({"default": "no workflow here"})
        cfg = MetaLoopConfig(rounds=4)
        trace = optimize(query, meta, meta, stub_sandbox, cfg)
        assert len(trace.rounds) == 4
        assert all(r.invalid for r in trace.rounds)
        assert all(r.reward.combined == -cfg.weights.w_cplx for r in trace.rounds)
        assert trace.selected == 1  # all tied, earliest wins
        assert select_best(trace).id.endswith("placeholder")

    def test_invalid_round_recovery(self, query, stub_sandbox):
        meta = scripted_client({
            "q1/round1": "thinking aloud, forgot the block",
            "q1/round2": GOOD_OUTPUT,
        })
        worker = scripted_client({"default": "# GOOD"})
        cfg = MetaLoopConfig(rounds=2)
        trace = optimize(query, meta, worker, stub_sandbox, cfg)
        assert trace.rounds[0].invalid
        assert not trace.rounds[1].invalid
        assert trace.rounds[1].pass_rate == 1.0
        assert trace.selected == 2

    def test_meta_transport_failure_raises(self, query, stub_sandbox):
        class Down:
            def complete(self, req):
                raise LlmError("transport", "offline")

            def total_cost(self):
                return 0.0

        with pytest.raises(MetaClientUnavailable):
            optimize(query, Down(), Down(), stub_sandbox, MetaLoopConfig(rounds=1))

    def test_requires_test_cases(self, meta_mock, stub_sandbox):
        bare = QueryInstance("q", "p", test_cases=())
        with pytest.raises(ValueError):
            optimize(bare, meta_mock, meta_mock, stub_sandbox)


class TestSelectBest:
    def test_argmax(self):
        records = [make_record(1, 0.2), make_record(2, 0.9), make_record(3, 0.5)]
        assert select_best_index(records) == 2

    def test_tie_goes_to_earliest(self):
        records = [make_record(1, 0.5), make_record(2, 0.9),
                   make_record(3, 0.9), make_record(4, 0.1)]
        assert select_best_index(records) == 2

    def test_empty(self):
        with pytest.raises(EmptyTrace):
            select_best_index([])

    def test_placeholder_is_valid(self):
        from flowforge.dsl import validate

        assert validate(placeholder_workflow()) == []


class TestRolloutGroup:
    def test_shape_and_determinism(self, query, meta_mock, stub_sandbox):
        cfg = MetaLoopConfig(rounds=3, group_size=2, seed=7)
        scores, traces = rollout_group(query, meta_mock, meta_mock, stub_sandbox, cfg)
        assert scores.shape == (2, 3)
        assert len(traces) == 2
        # early stop is disabled inside the group
        assert all(len(t.rounds) == 3 for t in traces)
        # the scripted client is seed-independent, so rows coincide
        assert np.array_equal(scores[0], scores[1])

    def test_feeds_normalization(self, query, meta_mock, stub_sandbox):
        cfg = MetaLoopConfig(rounds=3, group_size=2, seed=7)
        scores, _ = rollout_group(query, meta_mock, meta_mock, stub_sandbox, cfg)
        normalized = normalize_rewards(scores, k=1.1)
        assert normalized.shape == scores.shape
        assert np.all(normalized == 0.0)  # identical rows have zero spread


class TestSftExport:
    @pytest.fixture
    def trace(self, query, meta_mock, stub_sandbox):
        return optimize(query, meta_mock, meta_mock, stub_sandbox,
                        MetaLoopConfig(rounds=10, seed=7))

    def test_sample_fields(self, trace):
        sample = build_sft_sample(trace)
        assert sample.instruction == trace.instruction
        assert sample.query == trace.query.problem
        for i in range(1, 4):
            assert round_delimiter(i) in sample.reasoning
        assert sample.reasoning.count("=== round ") == 3
        restored = parse_workflow(sample.system)
        assert restored == select_best(trace)

    def test_export_appends_records(self, trace, tmp_path):
        out = tmp_path / "sft.jsonl"
        export_sft(trace, str(out))
        export_sft(trace, str(out))
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 2
        record = json.loads(lines[0])
        assert set(record) == {"instruction", "query", "reasoning", "system"}

    def test_reasoning_has_no_workflow_blocks(self, trace):
        sample = build_sft_sample(trace)
        assert "```workflow" not in sample.reasoning


class TestTracePersistence:
    @pytest.fixture
    def trace(self, query, meta_mock, stub_sandbox):
        return optimize(query, meta_mock, meta_mock, stub_sandbox,
                        MetaLoopConfig(rounds=10, seed=7))

    def test_record_round_trip(self, trace):
        restored = trace_from_record(trace_to_record(trace))
        assert restored.selected == trace.selected
        assert restored.query == trace.query
        assert len(restored.rounds) == len(trace.rounds)
        for a, b in zip(restored.rounds, trace.rounds):
            assert a.workflow == b.workflow
            assert a.reward == b.reward
            assert a.pass_rate == b.pass_rate
        assert select_best(restored) == select_best(trace)

    def test_file_round_trip_byte_identical(self, trace, tmp_path):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        append_trace(trace, str(p1))
        append_trace(load_traces(str(p1))[0], str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_default_instruction_is_packaged(self):
        text = default_instruction()
        assert "workflow" in text.lower()
        assert text.strip()
