"""Workflow DSL: typed operator DAGs, their textual form, validation,
complexity scoring, and pairwise similarity.

A workflow document is a YAML mapping with exactly the top-level keys
``id``, ``entry``, ``exit``, ``nodes``, ``edges``. Each node is
``{id, kind, params{...}, inputs[], outputs[]}``; each edge is
``{from, from_port, to, to_port}``. Ports are written ``"name:Type"``.
Unknown keys anywhere are a :class:`SchemaError`.
"""

from __future__ import annotations

import graphlib
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

import yaml

from .errors import DslSyntaxError, InvalidWorkflow, SchemaError


class PortType(str, Enum):
    TEXT = "Text"
    CODE = "Code"
    TEST_REPORT = "TestReport"
    SOLUTION_LIST = "SolutionList"


class NodeKind(str, Enum):
    CODE_GENERATE = "CodeGenerate"
    FORMAT_GENERATE = "FormatGenerate"
    ENSEMBLE = "Ensemble"
    REVIEW = "Review"
    REVISE = "Revise"
    CODE_TEST = "CodeTest"
    CUSTOM = "Custom"


#: Parameter keys a node may carry. `prompt` is the template, `format` the
#: output-format tag, `max_retries` the retry budget (transport retries for
#: LLM nodes; regenerate-on-failing-test attempts for producers of CodeTest
#: inputs).
ALLOWED_PARAMS = ("model", "prompt", "temperature", "format", "max_retries")

#: Kinds whose execution is one LLM call (all but CodeTest).
LLM_KINDS = frozenset(NodeKind) - {NodeKind.CODE_TEST}


@dataclass(frozen=True)
class Port:
    name: str
    type: PortType

    def spec(self) -> str:
        return f"{self.name}:{self.type.value}"

    @classmethod
    def from_spec(cls, text: str) -> "Port":
        name, sep, type_name = str(text).partition(":")
        if not sep or not name:
            raise SchemaError(f"port spec {text!r} must be 'name:Type'")
        try:
            return cls(name, PortType(type_name))
        except ValueError:
            raise SchemaError(f"unknown port type {type_name!r} in {text!r}") from None


# Required (inputs, outputs) per kind. `problem` ports not fed by an edge
# are bound to the user query at execution time. CodeTest passes the tested
# solution through so downstream nodes stay co-reachable to the exit.
PORT_CONTRACTS: dict[NodeKind, tuple[tuple[Port, ...], tuple[Port, ...]]] = {
    NodeKind.CODE_GENERATE: (
        (Port("problem", PortType.TEXT),),
        (Port("solution", PortType.CODE),),
    ),
    NodeKind.FORMAT_GENERATE: (
        (Port("problem", PortType.TEXT),),
        (Port("answer", PortType.TEXT),),
    ),
    NodeKind.ENSEMBLE: (
        (Port("problem", PortType.TEXT), Port("solutions", PortType.SOLUTION_LIST)),
        (Port("solution", PortType.CODE),),
    ),
    NodeKind.REVIEW: (
        (Port("problem", PortType.TEXT), Port("solution", PortType.CODE)),
        (Port("critique", PortType.TEXT),),
    ),
    NodeKind.REVISE: (
        (
            Port("problem", PortType.TEXT),
            Port("solution", PortType.CODE),
            Port("critique", PortType.TEXT),
        ),
        (Port("solution", PortType.CODE),),
    ),
    NodeKind.CODE_TEST: (
        (Port("solution", PortType.CODE),),
        (Port("report", PortType.TEST_REPORT), Port("solution", PortType.CODE)),
    ),
}

_CUSTOM_DEFAULT = ((Port("problem", PortType.TEXT),), (Port("answer", PortType.TEXT),))


def contract_ports(kind: NodeKind) -> tuple[tuple[Port, ...], tuple[Port, ...]]:
    return PORT_CONTRACTS.get(kind, _CUSTOM_DEFAULT)


@dataclass(frozen=True)
class OperatorNode:
    id: str
    kind: NodeKind
    params: Mapping[str, Any] = field(default_factory=dict)
    inputs: tuple[Port, ...] = ()
    outputs: tuple[Port, ...] = ()

    def input_port(self, name: str) -> Port | None:
        return next((p for p in self.inputs if p.name == name), None)

    def output_port(self, name: str) -> Port | None:
        return next((p for p in self.outputs if p.name == name), None)

    @property
    def primary_output(self) -> Port:
        return self.outputs[0]


@dataclass(frozen=True)
class Edge:
    from_node: str
    from_port: str
    to_node: str
    to_port: str


@dataclass(frozen=True)
class Workflow:
    id: str
    nodes: tuple[OperatorNode, ...]
    edges: tuple[Edge, ...]
    entry: str
    exit: str

    def node(self, node_id: str) -> OperatorNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def in_edges(self, node_id: str) -> list[Edge]:
        return [e for e in self.edges if e.to_node == node_id]

    def out_edges(self, node_id: str) -> list[Edge]:
        return [e for e in self.edges if e.from_node == node_id]


@dataclass(frozen=True)
class Violation:
    kind: str  # cycle | dangling | port | schema | reachability | entry_exit | params
    message: str

    def __str__(self) -> str:
        return f"{self.kind}: {self.message}"


ValidationReport = list


@dataclass(frozen=True)
class ComplexityScore:
    node_count: int
    edge_count: int
    parameter_count: int

    @property
    def scalar(self) -> int:
        return self.node_count + self.edge_count + self.parameter_count


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_TOP_KEYS = ("id", "entry", "exit", "nodes", "edges")
_NODE_KEYS = ("id", "kind", "params", "inputs", "outputs")
_EDGE_KEYS = ("from", "from_port", "to", "to_port")


def _require_mapping(obj: Any, what: str) -> dict:
    if not isinstance(obj, dict):
        raise SchemaError(f"{what} must be a mapping, got {type(obj).__name__}")
    return obj


def _reject_unknown(obj: dict, allowed: Iterable[str], what: str) -> None:
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise SchemaError(f"unknown keys {unknown} in {what}")


def _parse_node(raw: Any) -> OperatorNode:
    raw = _require_mapping(raw, "node")
    _reject_unknown(raw, _NODE_KEYS, f"node {raw.get('id', '?')!r}")
    node_id = raw.get("id")
    if not isinstance(node_id, str) or not node_id:
        raise SchemaError("node id must be a nonempty string")
    try:
        kind = NodeKind(raw.get("kind"))
    except ValueError:
        raise SchemaError(f"unknown operator kind {raw.get('kind')!r}") from None

    params = raw.get("params") or {}
    params = dict(_require_mapping(params, f"params of node {node_id!r}"))
    bad = sorted(set(params) - set(ALLOWED_PARAMS))
    if bad:
        raise SchemaError(f"unknown params {bad} on node {node_id!r}")

    default_in, default_out = contract_ports(kind)
    inputs = tuple(Port.from_spec(p) for p in raw["inputs"]) if "inputs" in raw else default_in
    outputs = tuple(Port.from_spec(p) for p in raw["outputs"]) if "outputs" in raw else default_out
    if kind is not NodeKind.CUSTOM:
        if tuple(inputs) != default_in or tuple(outputs) != default_out:
            raise SchemaError(
                f"node {node_id!r}: ports of kind {kind.value} are fixed to "
                f"inputs={[p.spec() for p in default_in]} outputs={[p.spec() for p in default_out]}"
            )
    if not outputs:
        raise SchemaError(f"node {node_id!r} declares no output port")
    return OperatorNode(node_id, kind, params, tuple(inputs), tuple(outputs))


def _parse_edge(raw: Any) -> Edge:
    raw = _require_mapping(raw, "edge")
    _reject_unknown(raw, _EDGE_KEYS, "edge")
    for key in _EDGE_KEYS:
        if not isinstance(raw.get(key), str) or not raw[key]:
            raise SchemaError(f"edge key {key!r} must be a nonempty string")
    return Edge(raw["from"], raw["from_port"], raw["to"], raw["to_port"])


def parse_workflow(text: str, check: bool = True) -> Workflow:
    """Parse a workflow document. With ``check`` (default), graph-level
    invariant violations are raised as :class:`SchemaError`."""
    try:
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise DslSyntaxError(
            str(exc.problem or exc),
            None if mark is None else mark.line + 1,
            None if mark is None else mark.column + 1,
        ) from exc
    except yaml.YAMLError as exc:
        raise DslSyntaxError(str(exc)) from exc

    doc = _require_mapping(doc, "workflow document")
    _reject_unknown(doc, _TOP_KEYS, "workflow document")
    for key in ("id", "entry", "exit"):
        if not isinstance(doc.get(key), str) or not doc[key]:
            raise SchemaError(f"top-level key {key!r} must be a nonempty string")
    if not isinstance(doc.get("nodes"), list) or not doc["nodes"]:
        raise SchemaError("'nodes' must be a nonempty list")
    if not isinstance(doc.get("edges", []), list):
        raise SchemaError("'edges' must be a list")

    nodes = tuple(_parse_node(n) for n in doc["nodes"])
    edges = tuple(_parse_edge(e) for e in doc.get("edges") or [])
    w = Workflow(doc["id"], nodes, edges, doc["entry"], doc["exit"])
    if check:
        violations = validate(w)
        if violations:
            raise SchemaError("; ".join(str(v) for v in violations))
    return w


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _check_params(node: OperatorNode, out: list[Violation]) -> None:
    p = node.params
    bad = sorted(set(p) - set(ALLOWED_PARAMS))
    if bad:
        out.append(Violation("params", f"node {node.id!r}: unknown params {bad}"))
    if "temperature" in p:
        t = p["temperature"]
        if not isinstance(t, (int, float)) or not 0 <= t <= 2:
            out.append(Violation("params", f"node {node.id!r}: temperature {t!r} outside [0, 2]"))
    if "max_retries" in p:
        r = p["max_retries"]
        if not isinstance(r, int) or isinstance(r, bool) or r < 0:
            out.append(Violation("params", f"node {node.id!r}: max_retries {r!r} not a nonnegative integer"))
    if node.kind in LLM_KINDS and not str(p.get("prompt", "")):
        out.append(Violation("params", f"node {node.id!r}: prompt template required for kind {node.kind.value}"))


def validate(w: Workflow) -> ValidationReport:
    """Return all invariant violations; an empty list means valid."""
    out: list[Violation] = []

    ids = w.node_ids()
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        out.append(Violation("schema", f"duplicate node ids {dupes}"))
    id_set = set(ids)

    for node in w.nodes:
        _check_params(node, out)

    for key, name in (("entry", w.entry), ("exit", w.exit)):
        if name not in id_set:
            out.append(Violation("entry_exit", f"{key} {name!r} is not a node"))

    dangling = False
    for e in w.edges:
        for endpoint in (e.from_node, e.to_node):
            if endpoint not in id_set:
                out.append(Violation("dangling", f"edge references undeclared node {endpoint!r}"))
                dangling = True
    if not dangling:
        for e in w.edges:
            src = w.node(e.from_node).output_port(e.from_port)
            dst = w.node(e.to_node).input_port(e.to_port)
            if src is None:
                out.append(Violation("port", f"node {e.from_node!r} has no output port {e.from_port!r}"))
            if dst is None:
                out.append(Violation("port", f"node {e.to_node!r} has no input port {e.to_port!r}"))
            if src and dst and src.type is not dst.type:
                if dst.type is not PortType.SOLUTION_LIST or src.type not in (
                    PortType.CODE,
                    PortType.TEXT,
                    PortType.SOLUTION_LIST,
                ):
                    out.append(
                        Violation(
                            "port",
                            f"edge {e.from_node}.{e.from_port} -> {e.to_node}.{e.to_port} "
                            f"mismatches types {src.type.value} -> {dst.type.value}",
                        )
                    )
        # One producer per input port; SolutionList ports aggregate.
        fanin = Counter((e.to_node, e.to_port) for e in w.edges)
        for (node_id, port_name), count in sorted(fanin.items()):
            if count > 1 and node_id in id_set:
                port = w.node(node_id).input_port(port_name)
                if port is not None and port.type is not PortType.SOLUTION_LIST:
                    out.append(Violation("port", f"input port {node_id}.{port_name} has {count} producers"))

        if w.entry in id_set:
            entry_node = w.node(w.entry)
            fed = {(e.to_node, e.to_port) for e in w.edges}
            query_port = next(
                (
                    p
                    for p in entry_node.inputs
                    if p.type is PortType.TEXT and (w.entry, p.name) not in fed
                ),
                None,
            )
            if query_port is None:
                out.append(Violation("entry_exit", f"entry {w.entry!r} has no free Text input port for the query"))

        sorter = graphlib.TopologicalSorter({n.id: [e.from_node for e in w.in_edges(n.id)] for n in w.nodes})
        try:
            sorter.prepare()
        except graphlib.CycleError as exc:
            cycle = exc.args[1]
            out.append(Violation("cycle", "cycle through nodes " + " -> ".join(cycle)))
        else:
            if w.entry in id_set and w.exit in id_set:
                reachable = _closure(w.entry, lambda n: [e.to_node for e in w.out_edges(n)])
                coreachable = _closure(w.exit, lambda n: [e.from_node for e in w.in_edges(n)])
                for n in ids:
                    if n not in reachable:
                        out.append(Violation("reachability", f"node {n!r} unreachable from entry"))
                    elif n not in coreachable:
                        out.append(Violation("reachability", f"node {n!r} cannot reach exit"))
    return out


def _closure(start: str, neighbors) -> set[str]:
    seen = {start}
    stack = [start]
    while stack:
        for nxt in neighbors(stack.pop()):
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def ensure_valid(w: Workflow) -> Workflow:
    violations = validate(w)
    if violations:
        raise InvalidWorkflow(violations)
    return w


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def workflow_to_doc(w: Workflow) -> dict:
    return {
        "id": w.id,
        "entry": w.entry,
        "exit": w.exit,
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind.value,
                "params": {k: n.params[k] for k in sorted(n.params)},
                "inputs": [p.spec() for p in n.inputs],
                "outputs": [p.spec() for p in n.outputs],
            }
            for n in w.nodes
        ],
        "edges": [
            {"from": e.from_node, "from_port": e.from_port, "to": e.to_node, "to_port": e.to_port}
            for e in w.edges
        ],
    }


def serialize(w: Workflow) -> str:
    """Render a valid workflow as a document; round-trips through
    :func:`parse_workflow` to a structurally equal value."""
    ensure_valid(w)
    return yaml.safe_dump(workflow_to_doc(w), sort_keys=False, default_flow_style=False)


# ---------------------------------------------------------------------------
# Complexity and similarity
# ---------------------------------------------------------------------------

def ast_complexity(w: Workflow) -> ComplexityScore:
    """Size of the workflow graph: node + edge + parameter count."""
    ensure_valid(w)
    return ComplexityScore(
        node_count=len(w.nodes),
        edge_count=len(w.edges),
        parameter_count=sum(len(n.params) for n in w.nodes),
    )


def _feature_multiset(w: Workflow) -> Counter:
    kinds = {n.id: n.kind.value for n in w.nodes}
    features = Counter(("node", n.kind.value) for n in w.nodes)
    # Edge kind-pairs enter as a set (deduplicated).
    features.update(Counter({("edge", kinds[e.from_node], kinds[e.to_node]): 1
                             for e in w.edges}))
    return features


def workflow_similarity(a: Workflow, b: Workflow) -> float:
    """Jaccard index over node-kind multisets united with edge kind-pair sets."""
    ensure_valid(a)
    ensure_valid(b)
    fa, fb = _feature_multiset(a), _feature_multiset(b)
    keys = set(fa) | set(fb)
    union = sum(max(fa[k], fb[k]) for k in keys)
    if union == 0:
        return 1.0
    inter = sum(min(fa[k], fb[k]) for k in keys)
    return inter / union
