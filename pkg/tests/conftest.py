import random
from pathlib import Path

import pytest
import yaml

from flowforge.dsl import (
    Edge,
    NodeKind,
    OperatorNode,
    Port,
    PortType,
    Workflow,
    parse_workflow,
    validate,
)
from flowforge.executor import QueryInstance
from flowforge.llm import MockModelClient, ScriptedResponse
from flowforge.sandbox import StubSandbox

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def review_revise_text() -> str:
    return (FIXTURES / "review_revise.workflow.yaml").read_text()


@pytest.fixture
def review_revise(review_revise_text) -> Workflow:
    return parse_workflow(review_revise_text)


@pytest.fixture
def test_retry_text() -> str:
    return (FIXTURES / "test_retry.workflow.yaml").read_text()


@pytest.fixture
def test_retry(test_retry_text) -> Workflow:
    return parse_workflow(test_retry_text)


@pytest.fixture
def query() -> QueryInstance:
    doc = yaml.safe_load((FIXTURES / "query.yaml").read_text())
    return QueryInstance(
        id=doc["id"],
        problem=doc["problem"],
        entry_point=doc["entry_point"],
        test_cases=tuple(doc["test_cases"]),
    )


@pytest.fixture
def meta_mock() -> MockModelClient:
    return MockModelClient.from_file(str(FIXTURES / "mock_script.yaml"))


@pytest.fixture
def stub_sandbox() -> StubSandbox:
    doc = yaml.safe_load((FIXTURES / "stub_sandbox.yaml").read_text())
    return StubSandbox(script={k: list(v) for k, v in doc["solutions"].items()},
                       default=doc["default"])


@pytest.fixture
def engine_config_path(tmp_path) -> str:
    """Config file for offline CLI runs, with absolute fixture paths."""
    stub = yaml.safe_load((FIXTURES / "stub_sandbox.yaml").read_text())
    doc = {
        "mock_script": str(FIXTURES / "mock_script.yaml"),
        "rounds": 10,
        "repetitions": 3,
        "early_stop": True,
        "seed": 7,
        "rates": {
            "meta": {"prompt": 1.0, "completion": 2.0},
            "worker": {"prompt": 0.5, "completion": 0.5},
        },
        "sandbox": {"stub": {"solutions": stub["solutions"], "default": stub["default"]}},
        "output_dir": str(tmp_path / "out"),
    }
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def scripted_client(script: dict) -> MockModelClient:
    """Mock client from a plain {tag: content} or {tag: (content, pt, ct)} map."""
    responses = {}
    for key, value in script.items():
        if isinstance(value, str):
            responses[key] = ScriptedResponse(value)
        else:
            responses[key] = ScriptedResponse(*value)
    return MockModelClient(responses)


# ---------------------------------------------------------------------------
# Random valid workflows for round-trip / scheduling properties
# ---------------------------------------------------------------------------

_PROMPTS = [
    "Solve: {problem}",
    "Think then answer.\n{problem}",
    "Carefully solve the problem.\n{problem}\n{feedback}",
]


def random_workflow(rng: random.Random, workflow_id: str = "rand") -> Workflow:
    nodes = [
        OperatorNode(
            "gen0",
            NodeKind.CODE_GENERATE,
            _random_params(rng),
            (Port("problem", PortType.TEXT),),
            (Port("solution", PortType.CODE),),
        )
    ]
    edges: list[Edge] = []
    current = ("gen0", "solution")  # current Code producer

    for i in range(rng.randint(0, 4)):
        op = rng.choice(["review_revise", "test", "ensemble"])
        if op == "review_revise":
            review = OperatorNode(
                f"review{i}", NodeKind.REVIEW, _random_params(rng),
                (Port("problem", PortType.TEXT), Port("solution", PortType.CODE)),
                (Port("critique", PortType.TEXT),),
            )
            revise = OperatorNode(
                f"revise{i}", NodeKind.REVISE, _random_params(rng),
                (Port("problem", PortType.TEXT), Port("solution", PortType.CODE),
                 Port("critique", PortType.TEXT)),
                (Port("solution", PortType.CODE),),
            )
            nodes += [review, revise]
            edges += [
                Edge(current[0], current[1], review.id, "solution"),
                Edge(current[0], current[1], revise.id, "solution"),
                Edge(review.id, "critique", revise.id, "critique"),
            ]
            current = (revise.id, "solution")
        elif op == "test":
            test = OperatorNode(
                f"test{i}", NodeKind.CODE_TEST, {},
                (Port("solution", PortType.CODE),),
                (Port("report", PortType.TEST_REPORT), Port("solution", PortType.CODE)),
            )
            nodes.append(test)
            edges.append(Edge(current[0], current[1], test.id, "solution"))
            current = (test.id, "solution")
        else:
            ens = OperatorNode(
                f"ens{i}", NodeKind.ENSEMBLE, _random_params(rng),
                (Port("problem", PortType.TEXT), Port("solutions", PortType.SOLUTION_LIST)),
                (Port("solution", PortType.CODE),),
            )
            nodes.append(ens)
            edges.append(Edge(current[0], current[1], ens.id, "solutions"))
            current = (ens.id, "solution")

    w = Workflow(workflow_id, tuple(nodes), tuple(edges), "gen0", current[0])
    assert validate(w) == []
    return w


def _random_params(rng: random.Random) -> dict:
    params = {"prompt": rng.choice(_PROMPTS)}
    if rng.random() < 0.5:
        params["model"] = rng.choice(["worker", "alt-model"])
    if rng.random() < 0.5:
        params["temperature"] = rng.choice([0, 0.3, 1.0, 2])
    if rng.random() < 0.3:
        params["max_retries"] = rng.randint(0, 3)
    if rng.random() < 0.2:
        params["format"] = "markdown"
    return params
