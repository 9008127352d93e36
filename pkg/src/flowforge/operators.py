"""Semantic contracts of the workflow operators.

Each operator maps its node's inputs and parameters to one LLM call
(CodeGenerate, FormatGenerate, Ensemble, Review, Revise, Custom) or one
sandbox call (CodeTest).
"""

from __future__ import annotations

import re
import string
import time
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .dsl import NodeKind, OperatorNode, PortType
from .errors import LlmError, MissingBinding, PortError
from .llm import CompletionRequest, Message, ModelClient, UsageRecord, ZERO_USAGE
from .sandbox import SandboxClient, SandboxJob, TestReport

SolutionList = list

DEFAULT_MODEL = "default"
DEFAULT_MAX_TOKENS = 4096


@dataclass(frozen=True)
class OperatorOutput:
    payload: Any  # Text | Code | TestReport | SolutionList
    usage: UsageRecord = ZERO_USAGE
    duration_s: float = 0.0
    #: All produced port values; ``payload`` is the primary output port's.
    ports: Mapping[str, Any] = field(default_factory=dict)


def instantiate_prompt(template: str, bindings: Mapping[str, Any]) -> str:
    """Substitute ``{name}`` placeholders; unbound names raise
    :class:`MissingBinding`."""
    out = []
    for literal, name, format_spec, conversion in string.Formatter().parse(template):
        out.append(literal)
        if name is None:
            continue
        if name not in bindings:
            raise MissingBinding(name)
        value = bindings[name]
        if conversion:
            value = {"s": str, "r": repr, "a": ascii}[conversion](value)
        out.append(format(value, format_spec or ""))
    return "".join(out)


def _check_ports(node: OperatorNode, inputs: Mapping[str, Any]) -> None:
    required = {p.name for p in node.inputs}
    supplied = set(inputs)
    if supplied != required:
        missing = sorted(required - supplied)
        extra = sorted(supplied - required)
        raise PortError(
            f"node {node.id!r} ({node.kind.value}): ports differ from contract"
            + (f", missing {missing}" if missing else "")
            + (f", extra {extra}" if extra else "")
        )
    for port in node.inputs:
        value = inputs[port.name]
        if port.type is PortType.SOLUTION_LIST:
            if not isinstance(value, list) or not value:
                raise PortError(f"port {node.id}.{port.name} expects a nonempty solution list")
        elif port.type is PortType.TEST_REPORT:
            if not isinstance(value, TestReport):
                raise PortError(f"port {node.id}.{port.name} expects a TestReport")
        elif not isinstance(value, str):
            raise PortError(f"port {node.id}.{port.name} expects text, got {type(value).__name__}")


def _call_llm(node: OperatorNode, prompt: str, llm: ModelClient, tag: str,
              seed: int | None) -> tuple[str, UsageRecord]:
    retries = int(node.params.get("max_retries", 0))
    req = CompletionRequest(
        model=str(node.params.get("model", DEFAULT_MODEL)),
        messages=(Message("user", prompt),),
        temperature=float(node.params.get("temperature", 0.0)),
        max_tokens=DEFAULT_MAX_TOKENS,
        seed=seed,
        tag=tag,
    )
    attempt = 0
    while True:
        try:
            return llm.complete(req)
        except LlmError as exc:
            # Retry budget covers transport-level failures only.
            if exc.kind not in ("transport", "rate-limit") or attempt >= retries:
                raise
            attempt += 1


_INDEX_RE = re.compile(r"-?\d+")


def select_from_ensemble_reply(reply: str, solutions: Sequence[str]) -> str:
    """Interpret the ensemble LLM reply as a 1-based index; malformed or
    out-of-range replies fall back to the first solution."""
    match = _INDEX_RE.search(reply)
    if match:
        idx = int(match.group())
        if 1 <= idx <= len(solutions):
            return solutions[idx - 1]
    return solutions[0]


def _render_solutions(solutions: Sequence[str]) -> str:
    return "\n".join(f"[{i + 1}]\n{s}" for i, s in enumerate(solutions))


def execute_operator(
    node: OperatorNode,
    inputs: Mapping[str, Any],
    llm: ModelClient | None,
    sandbox: SandboxClient | None,
    *,
    test_cases: Sequence[str] = (),
    entry_point: str | None = None,
    tag: str = "",
    timeout_s: float = 60.0,
    seed: int | None = None,
    extra_bindings: Mapping[str, Any] | None = None,
) -> OperatorOutput:
    """Run one operator node. ``extra_bindings`` extends the prompt
    namespace (e.g. test feedback on regeneration attempts)."""
    _check_ports(node, inputs)
    start = time.monotonic()

    if node.kind is NodeKind.CODE_TEST:
        if sandbox is None:
            raise PortError(f"node {node.id!r}: CodeTest requires a sandbox client")
        report = sandbox.run(
            SandboxJob(
                solution=inputs["solution"],
                test_cases=tuple(test_cases),
                entry_point=entry_point,
                timeout_s=timeout_s,
            )
        )
        return OperatorOutput(
            payload=report,
            usage=ZERO_USAGE,
            duration_s=time.monotonic() - start,
            ports={"report": report, "solution": inputs["solution"]},
        )

    bindings: dict[str, Any] = dict(extra_bindings or {})
    bindings.update(inputs)
    if node.kind is NodeKind.ENSEMBLE:
        solutions = list(inputs["solutions"])
        if len(solutions) == 1:
            # Singleton groups need no self-consistency vote.
            return OperatorOutput(
                payload=solutions[0],
                usage=ZERO_USAGE,
                duration_s=time.monotonic() - start,
                ports={node.primary_output.name: solutions[0]},
            )
        bindings["solutions"] = _render_solutions(solutions)

    if llm is None:
        raise PortError(f"node {node.id!r}: kind {node.kind.value} requires a model client")

    template = str(node.params["prompt"])
    prompt = instantiate_prompt(template, bindings)
    if node.kind is NodeKind.FORMAT_GENERATE and node.params.get("format"):
        prompt = f"{prompt}\n\nRespond in format: {node.params['format']}"

    text, usage = _call_llm(node, prompt, llm, tag, seed)

    if node.kind is NodeKind.ENSEMBLE:
        payload: Any = select_from_ensemble_reply(text, solutions)
    else:
        payload = text
    return OperatorOutput(
        payload=payload,
        usage=usage,
        duration_s=time.monotonic() - start,
        ports={node.primary_output.name: payload},
    )
