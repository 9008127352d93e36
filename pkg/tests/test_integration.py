"""Primary engine driving the real out-of-process shim instead of the stub."""

import sys

import pytest

pytest.importorskip("sandbox_runner")

from flowforge.executor import QueryInstance, execute_workflow
from flowforge.sandbox import SandboxJob, SubprocessSandbox

from conftest import scripted_client

COMMAND = (sys.executable, "-m", "sandbox_runner")

GOOD = "def add(a, b):\n    return a + b\n"
BAD = "def add(a, b):\n    return a - b\n"


@pytest.fixture
def query():
    return QueryInstance(
        "q-int", "Write add(a, b) returning the sum.", entry_point="add",
        test_cases=("assert add(1, 2) == 3", "assert add(-1, 1) == 0",
                    "assert add(0, 0) == 0", "assert add(-5, -7) == -12"),
    )


def test_direct_job_round_trip(query):
    sandbox = SubprocessSandbox(COMMAND)
    report = sandbox.run(SandboxJob(GOOD, query.test_cases, "add", timeout_s=10))
    assert report.all_passed
    report = sandbox.run(SandboxJob(BAD, query.test_cases, "add", timeout_s=10))
    assert [c.passed for c in report.cases] == [False, False, True, False]


def test_workflow_retry_through_real_shim(test_retry, query):
    llm = scripted_client({"gen": BAD, "gen~retry1": GOOD})
    sandbox = SubprocessSandbox(COMMAND)
    result = execute_workflow(test_retry, query, llm, sandbox)
    assert result.ok
    assert result.answer == GOOD
    reports = [e.output.payload for e in result.node_log if e.node_id == "test"]
    assert [r.all_passed for r in reports] == [False, True]
