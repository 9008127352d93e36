"""The outer optimization loop: per query, iterate rounds of
(meta-agent proposes reasoning + workflow -> execute -> score -> feed
back), then select the best workflow. Also emits SFT training samples and
group score matrices for the GRPO kernel."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from importlib import resources
from typing import Sequence

import numpy as np

from .dsl import (
    NodeKind,
    OperatorNode,
    Port,
    PortType,
    Workflow,
    ast_complexity,
    parse_workflow,
    serialize,
)
from .errors import (
    DslSyntaxError,
    EmptyTrace,
    IoError,
    LlmError,
    MetaClientUnavailable,
    MultipleWorkflowBlocks,
    NoWorkflowBlock,
    SchemaError,
)
from .executor import EvaluationRun, Limits, QueryInstance, evaluate
from .llm import CompletionRequest, Message, ModelClient
from .reward import (
    RewardBreakdown,
    RewardWeights,
    breakdown,
    complexity_penalty,
    distinctness,
    penalty_breakdown,
)
from .sandbox import SandboxClient


def default_instruction() -> str:
    return resources.files("flowforge").joinpath("assets/meta_instruction.txt").read_text("utf-8")


DSL_SCHEMA_HELP = """\
Workflow document schema (YAML, one workflow per document):
  id: <workflow id>
  entry: <node id receiving the query>
  exit: <node id producing the answer>
  nodes:
    - id: <node id>
      kind: CodeGenerate | FormatGenerate | Ensemble | Review | Revise | CodeTest | Custom
      params: {model, prompt, temperature, format, max_retries}
  edges:
    - {from: <node>, from_port: <port>, to: <node>, to_port: <port>}
The graph must be acyclic; every node must lie on a path from entry to exit.
Input ports named 'problem' are bound to the user query automatically.
"""

OPERATOR_CATALOG = """\
Operators and their ports:
  CodeGenerate  in: problem:Text                          out: solution:Code
  FormatGenerate in: problem:Text                         out: answer:Text
  Review        in: problem:Text, solution:Code           out: critique:Text
  Revise        in: problem:Text, solution:Code, critique:Text  out: solution:Code
  Ensemble      in: problem:Text, solutions:SolutionList  out: solution:Code
  CodeTest      in: solution:Code                         out: report:TestReport, solution:Code
  Custom        declared freely (default in: problem:Text, out: answer:Text)
A failing CodeTest re-invokes its solution producer up to the producer's
max_retries, feeding the failure details back as {feedback}.
"""


@dataclass(frozen=True)
class MetaLoopConfig:
    rounds: int = 10
    repetitions: int = 3
    early_stop: bool = True
    group_size: int = 5
    meta_model: str = "meta"
    worker_model: str = "worker"
    meta_temperature: float = 0.7
    meta_max_tokens: int = 8192
    meta_retries: int = 2
    weights: RewardWeights = RewardWeights()
    complexity_cap: int = 100
    limits: Limits = Limits()
    seed: int = 0
    instruction: str = ""

    def __post_init__(self):
        if self.rounds < 1 or self.repetitions < 1 or self.group_size < 1:
            raise ValueError("rounds, repetitions, and group size must be positive")

    def resolved_instruction(self) -> str:
        return self.instruction or default_instruction()

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "repetitions": self.repetitions,
            "early_stop": self.early_stop,
            "group_size": self.group_size,
            "meta_model": self.meta_model,
            "worker_model": self.worker_model,
            "meta_temperature": self.meta_temperature,
            "weights": {
                "w_perf": self.weights.w_perf,
                "w_cplx": self.weights.w_cplx,
                "w_dist": self.weights.w_dist,
            },
            "complexity_cap": self.complexity_cap,
            "limits": {
                "node_timeout_s": self.limits.node_timeout_s,
                "total_timeout_s": self.limits.total_timeout_s,
                "max_llm_calls": self.limits.max_llm_calls,
            },
            "seed": self.seed,
        }


@dataclass(frozen=True)
class RoundRecord:
    index: int
    raw_output: str
    reasoning: str
    workflow: Workflow | None
    pass_rate: float
    reward: RewardBreakdown
    runs: tuple[EvaluationRun, ...] = ()
    invalid: bool = False
    error: str | None = None
    cost: float = 0.0
    answers: tuple[str, ...] = ()
    failing: tuple[str, ...] = ()


@dataclass(frozen=True)
class OptimizationTrace:
    query: QueryInstance
    instruction: str
    rounds: tuple[RoundRecord, ...]
    selected: int  # 1-based round index
    config: dict
    seed: int


@dataclass(frozen=True)
class SftSample:
    instruction: str
    query: str
    reasoning: str
    system: str


def placeholder_workflow(workflow_id: str = "placeholder") -> Workflow:
    """Stand-in returned when the selected round recorded no valid
    workflow (degenerate all-invalid traces)."""
    node = OperatorNode(
        id="gen",
        kind=NodeKind.CODE_GENERATE,
        params={"prompt": "Solve the problem:\n{problem}"},
        inputs=(Port("problem", PortType.TEXT),),
        outputs=(Port("solution", PortType.CODE),),
    )
    return Workflow(workflow_id, (node,), (), "gen", "gen")


# ---------------------------------------------------------------------------
# Prompting and meta-output parsing
# ---------------------------------------------------------------------------

def _fmt(value: float) -> str:
    return f"{value:g}"


def build_meta_prompt(q: QueryInstance, history: Sequence[RoundRecord],
                      instruction: str) -> tuple[Message, ...]:
    if not instruction:
        raise ValueError("instruction must be nonempty")
    parts = [DSL_SCHEMA_HELP, OPERATOR_CATALOG, f"Problem:\n{q.problem}"]
    if q.test_cases:
        parts.append(f"The answer will be checked against {len(q.test_cases)} test cases.")
    for record in history:
        block = [f"--- Feedback for round {record.index} ---"]
        if record.workflow is not None:
            block.append("Workflow:\n" + serialize(record.workflow).rstrip())
        else:
            block.append(f"Workflow: INVALID ({record.error})")
        block.append(f"Pass rate: {_fmt(record.pass_rate)}")
        if record.failing:
            block.append("Failing tests:\n" + "\n".join(record.failing))
        block.append(f"Reward: {_fmt(record.reward.combined)}")
        parts.append("\n".join(block))
    return (Message("system", instruction), Message("user", "\n\n".join(parts)))


_WORKFLOW_BLOCK_RE = re.compile(r"```workflow[ \t]*\n(.*?)```", re.DOTALL)


def parse_meta_output(text: str) -> tuple[str, Workflow]:
    """Split a meta-agent completion into reasoning text and the single
    fenced workflow block, parsed."""
    blocks = _WORKFLOW_BLOCK_RE.findall(text)
    if not blocks:
        raise NoWorkflowBlock("meta output contains no ```workflow block")
    if len(blocks) > 1:
        raise MultipleWorkflowBlocks(f"meta output contains {len(blocks)} workflow blocks")
    reasoning = _WORKFLOW_BLOCK_RE.sub("", text).strip()
    return reasoning, parse_workflow(blocks[0])


def reasoning_outside_blocks(text: str) -> str:
    return _WORKFLOW_BLOCK_RE.sub("", text).strip()


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------

def _meta_complete(meta: ModelClient, messages: tuple[Message, ...],
                   cfg: MetaLoopConfig, tag: str, seed: int) -> str:
    req = CompletionRequest(
        model=cfg.meta_model,
        messages=messages,
        temperature=cfg.meta_temperature,
        max_tokens=cfg.meta_max_tokens,
        seed=seed,
        tag=tag,
    )
    last: LlmError | None = None
    for _ in range(cfg.meta_retries + 1):
        try:
            return meta.complete(req)[0]
        except LlmError as exc:
            last = exc
            if exc.kind not in ("transport", "rate-limit"):
                break
    raise MetaClientUnavailable(str(last))


def optimize(q: QueryInstance, meta: ModelClient, worker: ModelClient,
             sandbox: SandboxClient, cfg: MetaLoopConfig = MetaLoopConfig()) -> OptimizationTrace:
    """Run up to ``cfg.rounds`` propose/execute/score rounds for one query.
    Bad meta output never aborts the trace; it is recorded as a penalty
    round."""
    if not q.test_cases:
        raise ValueError("optimize requires a query with test cases")
    instruction = cfg.resolved_instruction()
    records: list[RoundRecord] = []
    prior_workflows: list[Workflow] = []

    for j in range(1, cfg.rounds + 1):
        messages = build_meta_prompt(q, records, instruction)
        raw = _meta_complete(meta, messages, cfg, tag=f"{q.id}/round{j}", seed=cfg.seed + j)

        try:
            reasoning, workflow = parse_meta_output(raw)
        except (NoWorkflowBlock, MultipleWorkflowBlocks, DslSyntaxError, SchemaError) as exc:
            records.append(
                RoundRecord(
                    index=j,
                    raw_output=raw,
                    reasoning=reasoning_outside_blocks(raw),
                    workflow=None,
                    pass_rate=0.0,
                    reward=penalty_breakdown(cfg.weights),
                    invalid=True,
                    error=str(exc),
                )
            )
            continue

        outcome = evaluate(
            workflow,
            q,
            worker,
            sandbox,
            repetitions=cfg.repetitions,
            limits=cfg.limits,
            tag_prefix=f"{q.id}/round{j}/",
            seed=cfg.seed + j,
        )
        cplx = complexity_penalty(ast_complexity(workflow), cfg.complexity_cap)
        dist = distinctness(workflow, prior_workflows)
        reward = breakdown(outcome.pass_rate, cplx, dist, cfg.weights)
        failing: list[str] = []
        for run in outcome.runs:
            if run.report is not None:
                failing.extend(run.report.failing_details())
            elif run.result.failure:
                failing.append(f"execution failed: {run.result.failure}")
        records.append(
            RoundRecord(
                index=j,
                raw_output=raw,
                reasoning=reasoning,
                workflow=workflow,
                pass_rate=outcome.pass_rate,
                reward=reward,
                runs=outcome.runs,
                cost=sum(r.result.total_cost for r in outcome.runs),
                answers=tuple(r.result.answer or "" for r in outcome.runs),
                failing=tuple(dict.fromkeys(failing)),
            )
        )
        prior_workflows.append(workflow)
        if cfg.early_stop and outcome.pass_rate >= 1.0:
            break

    selected = select_best_index(records)
    return OptimizationTrace(q, instruction, tuple(records), selected, cfg.to_dict(), cfg.seed)


def select_best_index(records: Sequence[RoundRecord]) -> int:
    """1-based index of the round with maximal combined reward; ties go to
    the earliest round."""
    if not records:
        raise EmptyTrace("no rounds recorded")
    best = max(records, key=lambda r: (r.reward.combined, -r.index))
    return best.index


def select_best(trace: OptimizationTrace) -> Workflow:
    record = next(r for r in trace.rounds if r.index == trace.selected)
    if record.workflow is None:
        return placeholder_workflow(f"{trace.query.id}-placeholder")
    return record.workflow


def rollout_group(q: QueryInstance, meta: ModelClient, worker: ModelClient,
                  sandbox: SandboxClient, cfg: MetaLoopConfig = MetaLoopConfig(),
                  ) -> tuple[np.ndarray, list[OptimizationTrace]]:
    """Run ``cfg.group_size`` independent optimizations with distinct seeds
    and collect the G x l combined-reward matrix. Early stop is disabled so
    every row has exactly ``cfg.rounds`` entries; token log-probabilities
    are left for an external trainer to attach."""
    traces = []
    for g in range(cfg.group_size):
        rollout_cfg = replace(cfg, early_stop=False, seed=cfg.seed + 1000 * g)
        traces.append(optimize(q, meta, worker, sandbox, rollout_cfg))
    scores = np.array(
        [[r.reward.combined for r in trace.rounds] for trace in traces], dtype=float
    )
    return scores, traces


# ---------------------------------------------------------------------------
# SFT export
# ---------------------------------------------------------------------------

def round_delimiter(index: int) -> str:
    return f"=== round {index} ==="


def build_sft_sample(trace: OptimizationTrace) -> SftSample:
    if not trace.rounds:
        raise EmptyTrace("cannot export an empty trace")
    reasoning = "\n".join(
        f"{round_delimiter(r.index)}\n{r.reasoning}" for r in trace.rounds
    )
    return SftSample(
        instruction=trace.instruction,
        query=trace.query.problem,
        reasoning=reasoning,
        system=serialize(select_best(trace)),
    )


def export_sft(trace: OptimizationTrace, out_path: str) -> SftSample:
    """Append one line-delimited record {instruction, query, reasoning,
    system} to the dataset file."""
    sample = build_sft_sample(trace)
    try:
        with open(out_path, "a", encoding="utf-8") as handle:
            handle.write(
                json.dumps(
                    {
                        "instruction": sample.instruction,
                        "query": sample.query,
                        "reasoning": sample.reasoning,
                        "system": sample.system,
                    }
                )
                + "\n"
            )
    except OSError as exc:
        raise IoError(f"cannot append to {out_path!r}: {exc}") from exc
    return sample


# ---------------------------------------------------------------------------
# Trace persistence (append-only JSONL, one record per query)
# ---------------------------------------------------------------------------

def _reward_to_dict(r: RewardBreakdown) -> dict:
    return {
        "pass_rate": r.pass_rate,
        "complexity_penalty": r.complexity_penalty,
        "distinctness": r.distinctness,
        "combined": r.combined,
        "weights": {"w_perf": r.weights.w_perf, "w_cplx": r.weights.w_cplx,
                    "w_dist": r.weights.w_dist},
    }


def _reward_from_dict(d: dict) -> RewardBreakdown:
    w = d["weights"]
    return RewardBreakdown(
        pass_rate=d["pass_rate"],
        complexity_penalty=d["complexity_penalty"],
        distinctness=d["distinctness"],
        combined=d["combined"],
        weights=RewardWeights(w["w_perf"], w["w_cplx"], w["w_dist"]),
    )


def trace_to_record(trace: OptimizationTrace) -> dict:
    return {
        "query": {
            "id": trace.query.id,
            "problem": trace.query.problem,
            "entry_point": trace.query.entry_point,
            "test_cases": list(trace.query.test_cases),
        },
        "instruction": trace.instruction,
        "seed": trace.seed,
        "selected": trace.selected,
        "config": trace.config,
        "rounds": [
            {
                "index": r.index,
                "raw_output": r.raw_output,
                "reasoning": r.reasoning,
                "workflow": None if r.workflow is None else serialize(r.workflow),
                "invalid": r.invalid,
                "error": r.error,
                "pass_rate": r.pass_rate,
                "reward": _reward_to_dict(r.reward),
                "cost": r.cost,
                "answers": list(r.answers),
                "failing": list(r.failing),
            }
            for r in trace.rounds
        ],
    }


def trace_from_record(record: dict) -> OptimizationTrace:
    query = QueryInstance(
        id=record["query"]["id"],
        problem=record["query"]["problem"],
        entry_point=record["query"].get("entry_point"),
        test_cases=tuple(record["query"].get("test_cases") or ()),
    )
    rounds = tuple(
        RoundRecord(
            index=r["index"],
            raw_output=r.get("raw_output", ""),
            reasoning=r.get("reasoning", ""),
            workflow=None if r.get("workflow") is None else parse_workflow(r["workflow"]),
            pass_rate=r["pass_rate"],
            reward=_reward_from_dict(r["reward"]),
            invalid=r.get("invalid", False),
            error=r.get("error"),
            cost=r.get("cost", 0.0),
            answers=tuple(r.get("answers") or ()),
            failing=tuple(r.get("failing") or ()),
        )
        for r in record["rounds"]
    )
    return OptimizationTrace(
        query, record["instruction"], rounds, record["selected"],
        record.get("config") or {}, record.get("seed", 0),
    )


def append_trace(trace: OptimizationTrace, path: str) -> None:
    try:
        with open(path, "a", encoding="utf-8") as handle:
            handle.write(json.dumps(trace_to_record(trace), sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot append trace to {path!r}: {exc}") from exc


def load_traces(path: str) -> list[OptimizationTrace]:
    traces = []
    try:
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                if line.strip():
                    traces.append(trace_from_record(json.loads(line)))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise IoError(f"cannot load traces from {path!r}: {exc}") from exc
    return traces
