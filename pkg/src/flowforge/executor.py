"""Workflow interpreter: topological scheduling, port routing, operator
invocation, and pass-rate evaluation against a query's test cases."""

from __future__ import annotations

import graphlib
import time
from dataclasses import dataclass
from typing import Any

from .dsl import LLM_KINDS, NodeKind, OperatorNode, PortType, Workflow, ensure_valid
from .errors import (
    FlowForgeError,
    LlmError,
    MissingBinding,
    PortError,
    SandboxError,
)
from .llm import ModelClient
from .operators import OperatorOutput, execute_operator
from .sandbox import SandboxClient, SandboxJob, TestReport


@dataclass(frozen=True)
class QueryInstance:
    id: str
    problem: str
    entry_point: str | None = None
    test_cases: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.problem:
            raise ValueError("problem must be nonempty")


@dataclass(frozen=True)
class Limits:
    node_timeout_s: float = 60.0
    total_timeout_s: float = 300.0
    max_llm_calls: int = 50

    def __post_init__(self):
        if self.node_timeout_s <= 0 or self.total_timeout_s <= 0 or self.max_llm_calls <= 0:
            raise ValueError("limits must be positive")


@dataclass(frozen=True)
class NodeLogEntry:
    node_id: str
    attempt: int
    output: OperatorOutput


@dataclass
class ExecutionResult:
    answer: str | None
    node_log: list[NodeLogEntry]
    total_cost: float
    wall_time_s: float
    failure: str | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None


def topological_order(w: Workflow) -> list[str]:
    """Deterministic linear extension: ready nodes run in declaration order."""
    position = {n.id: i for i, n in enumerate(w.nodes)}
    sorter = graphlib.TopologicalSorter(
        {n.id: [e.from_node for e in w.in_edges(n.id)] for n in w.nodes}
    )
    sorter.prepare()
    order: list[str] = []
    while sorter.is_active():
        ready = sorted(sorter.get_ready(), key=position.__getitem__)
        order.extend(ready)
        sorter.done(*ready)
    return order


class _Run:
    def __init__(self, w: Workflow, q: QueryInstance, llm: ModelClient | None,
                 sandbox: SandboxClient | None, limits: Limits, tag_prefix: str,
                 seed: int | None):
        self.w = w
        self.q = q
        self.llm = llm
        self.sandbox = sandbox
        self.limits = limits
        self.tag_prefix = tag_prefix
        self.seed = seed
        self.start = time.monotonic()
        self.values: dict[tuple[str, str], Any] = {}
        self.log: list[NodeLogEntry] = []
        self.llm_calls = 0

    def elapsed(self) -> float:
        return time.monotonic() - self.start

    def gather_inputs(self, node: OperatorNode) -> dict[str, Any]:
        inputs: dict[str, Any] = {}
        for port in node.inputs:
            incoming = [e for e in self.w.edges if e.to_node == node.id and e.to_port == port.name]
            if port.type is PortType.SOLUTION_LIST:
                collected: list[str] = []
                for e in incoming:
                    value = self.values[(e.from_node, e.from_port)]
                    collected.extend(value if isinstance(value, list) else [value])
                if not collected:
                    raise PortError(f"port {node.id}.{port.name} received no solutions")
                inputs[port.name] = collected
            elif incoming:
                inputs[port.name] = self.values[(incoming[0].from_node, incoming[0].from_port)]
            elif port.name == "problem" and port.type is PortType.TEXT:
                inputs[port.name] = self.q.problem
            else:
                raise PortError(f"input port {node.id}.{port.name} has no producer")
        return inputs

    def run_node(self, node: OperatorNode, attempt: int = 0,
                 feedback: str | None = None) -> OperatorOutput:
        if node.kind in LLM_KINDS:
            if self.llm_calls >= self.limits.max_llm_calls:
                raise _Budget()
            self.llm_calls += 1
        tag = f"{self.tag_prefix}{node.id}"
        if attempt:
            tag = f"{tag}~retry{attempt}"
        output = execute_operator(
            node,
            self.gather_inputs(node),
            self.llm,
            self.sandbox,
            test_cases=self.q.test_cases,
            entry_point=self.q.entry_point,
            tag=tag,
            timeout_s=self.limits.node_timeout_s,
            seed=self.seed,
            extra_bindings={"feedback": feedback or ""},
        )
        self.values.update({(node.id, name): value for name, value in output.ports.items()})
        self.log.append(NodeLogEntry(node.id, attempt, output))
        return output

    def retry_producer(self, test_node: OperatorNode, report: TestReport) -> None:
        """Test-and-retry inner loop: on a failing CodeTest, regenerate the
        solution via its producer up to the producer's retry budget."""
        edge = next(
            (e for e in self.w.edges if e.to_node == test_node.id and e.to_port == "solution"),
            None,
        )
        if edge is None:
            return
        producer = self.w.node(edge.from_node)
        if producer.kind not in LLM_KINDS:
            return
        budget = int(producer.params.get("max_retries", 0))
        for attempt in range(1, budget + 1):
            if self.elapsed() > self.limits.total_timeout_s:
                raise _Timeout()
            feedback = "; ".join(report.failing_details()) or "tests failed"
            self.run_node(producer, attempt=attempt, feedback=feedback)
            output = self.run_node(test_node, attempt=attempt)
            report = output.payload
            if report.all_passed:
                return


class _Timeout(Exception):
    pass


class _Budget(Exception):
    pass


def execute_workflow(
    w: Workflow,
    q: QueryInstance,
    llm: ModelClient | None,
    sandbox: SandboxClient | None,
    limits: Limits = Limits(),
    *,
    tag_prefix: str = "",
    seed: int | None = None,
) -> ExecutionResult:
    """Run a valid workflow on one query. Limit hits and node failures are
    reported in ``ExecutionResult.failure``; this function never hangs or
    raises on them."""
    ensure_valid(w)
    run = _Run(w, q, llm, sandbox, limits, tag_prefix, seed)
    failure: str | None = None

    try:
        for node_id in topological_order(w):
            if run.elapsed() > limits.total_timeout_s:
                raise _Timeout()
            node = w.node(node_id)
            output = run.run_node(node)
            if node.kind is NodeKind.CODE_TEST and not output.payload.all_passed:
                run.retry_producer(node, output.payload)
    except _Timeout:
        failure = "TimeoutExceeded"
    except _Budget:
        failure = "CallBudgetExceeded"
    except (LlmError, SandboxError, PortError, MissingBinding, FlowForgeError) as exc:
        failure = f"OperatorFailed({node_id}): {exc}"

    answer: str | None = None
    if failure is None:
        exit_node = w.node(w.exit)
        payload = run.values.get((w.exit, exit_node.primary_output.name))
        if isinstance(payload, str) and payload:
            answer = payload
        else:
            failure = f"OperatorFailed({w.exit}): exit produced no text answer"

    total_cost = sum(entry.output.usage.cost for entry in run.log)
    return ExecutionResult(answer, run.log, total_cost, run.elapsed(), failure)


@dataclass(frozen=True)
class EvaluationRun:
    result: ExecutionResult
    report: TestReport | None

    @property
    def pass_fraction(self) -> float:
        return self.report.pass_fraction if self.report is not None else 0.0


@dataclass(frozen=True)
class EvaluationOutcome:
    pass_rate: float
    runs: tuple[EvaluationRun, ...]


def evaluate(
    w: Workflow,
    q: QueryInstance,
    llm: ModelClient | None,
    sandbox: SandboxClient,
    repetitions: int = 3,
    limits: Limits = Limits(),
    *,
    tag_prefix: str = "",
    seed: int | None = None,
) -> EvaluationOutcome:
    """Pass rate over ``repetitions`` executions: the mean fraction of test
    cases the produced answer passes; failed executions count as 0."""
    if not q.test_cases:
        raise ValueError("evaluate requires at least one test case")
    if repetitions < 1:
        raise ValueError("repetitions must be positive")
    runs = []
    for rep in range(repetitions):
        rep_seed = None if seed is None else seed + rep
        result = execute_workflow(
            w, q, llm, sandbox, limits, tag_prefix=tag_prefix, seed=rep_seed
        )
        report = None
        if result.ok:
            report = sandbox.run(
                SandboxJob(
                    solution=result.answer,
                    test_cases=q.test_cases,
                    entry_point=q.entry_point,
                    timeout_s=limits.node_timeout_s,
                )
            )
        runs.append(EvaluationRun(result, report))
    pass_rate = sum(r.pass_fraction for r in runs) / repetitions
    return EvaluationOutcome(pass_rate, tuple(runs))
