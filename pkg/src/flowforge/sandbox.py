"""Client side of the code-test sandbox protocol.

The shim is a separate process speaking JSON on stdin/stdout:
request ``{solution, entry_point, test_cases, timeout_s}``, reply
``{cases: [{index, passed, detail}], timed_out, duration_s}``.
"""

from __future__ import annotations

import json
import subprocess
import time
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

from .errors import SandboxError


@dataclass(frozen=True)
class SandboxJob:
    solution: str
    test_cases: tuple[str, ...]
    entry_point: str | None = None
    timeout_s: float = 60.0

    def __post_init__(self):
        if self.timeout_s <= 0:
            raise ValueError("timeout must be positive")
        if not self.test_cases:
            raise ValueError("test case list must be nonempty")


@dataclass(frozen=True)
class CaseVerdict:
    index: int
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class TestReport:
    """Per-case verdicts of one sandbox run. Doubles as the secondary
    shim's verdict on the primary side."""

    __test__ = False  # name starts with Test; keep pytest from collecting it

    cases: tuple[CaseVerdict, ...]
    timed_out: bool = False
    duration_s: float = 0.0

    def __post_init__(self):
        if self.timed_out and all(c.passed for c in self.cases):
            raise ValueError("timed out reports must contain an unpassed case")

    @property
    def pass_fraction(self) -> float:
        return sum(c.passed for c in self.cases) / len(self.cases) if self.cases else 0.0

    @property
    def all_passed(self) -> bool:
        return bool(self.cases) and all(c.passed for c in self.cases)

    def failing_details(self) -> list[str]:
        return [f"case {c.index}: {c.detail or 'failed'}" for c in self.cases if not c.passed]


SandboxVerdict = TestReport


class SandboxClient(Protocol):
    def run(self, job: SandboxJob) -> TestReport: ...


def _report_from_protocol(payload: dict, case_count: int) -> TestReport:
    try:
        cases = tuple(
            CaseVerdict(int(c["index"]), bool(c["passed"]), str(c.get("detail", "")))
            for c in payload["cases"]
        )
        report = TestReport(cases, bool(payload["timed_out"]), float(payload["duration_s"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise SandboxError(f"malformed sandbox reply: {exc}") from exc
    if len(report.cases) != case_count:
        raise SandboxError(
            f"sandbox returned {len(report.cases)} verdicts for {case_count} cases"
        )
    return report


class SubprocessSandbox:
    """Spawns the shim command once per job and exchanges the JSON protocol."""

    def __init__(self, command: Sequence[str], grace_s: float = 5.0):
        if not command:
            raise SandboxError("sandbox command must be nonempty")
        self.command = list(command)
        self.grace_s = grace_s

    def run(self, job: SandboxJob) -> TestReport:
        request = json.dumps(
            {
                "solution": job.solution,
                "entry_point": job.entry_point,
                "test_cases": list(job.test_cases),
                "timeout_s": job.timeout_s,
            }
        )
        try:
            proc = subprocess.run(
                self.command,
                input=request,
                capture_output=True,
                text=True,
                timeout=job.timeout_s + self.grace_s,
            )
        except FileNotFoundError as exc:
            raise SandboxError(f"sandbox command not found: {self.command[0]!r}") from exc
        except subprocess.TimeoutExpired as exc:
            raise SandboxError(f"sandbox shim did not reply within grace period: {exc}") from exc
        if proc.returncode != 0:
            raise SandboxError(
                f"sandbox shim exited {proc.returncode}: {proc.stderr.strip()[:500]}"
            )
        try:
            payload = json.loads(proc.stdout)
        except json.JSONDecodeError as exc:
            raise SandboxError(f"sandbox wrote non-JSON verdict: {exc}") from exc
        return _report_from_protocol(payload, len(job.test_cases))


@dataclass
class StubSandbox:
    """In-process scripted sandbox for offline runs and tests.

    ``script`` maps a marker to per-case pass booleans; a job matches the
    first marker equal to, or contained in, its solution text. Unmatched
    jobs use ``default`` (all-fail when absent). ``delay_s`` simulates a
    slow runner.
    """

    script: Mapping[str, Sequence[bool]] = field(default_factory=dict)
    default: Sequence[bool] | None = None
    delay_s: float = 0.0

    def _verdicts(self, solution: str) -> Sequence[bool] | None:
        stripped = solution.strip()
        if stripped in self.script:
            return self.script[stripped]
        for marker, verdicts in self.script.items():
            if marker in solution:
                return verdicts
        return self.default

    def run(self, job: SandboxJob) -> TestReport:
        if self.delay_s:
            time.sleep(self.delay_s)
        verdicts = self._verdicts(job.solution)
        cases = []
        for i in range(len(job.test_cases)):
            passed = bool(verdicts[i]) if verdicts is not None and i < len(verdicts) else False
            cases.append(CaseVerdict(i, passed, "" if passed else "stubbed failure"))
        return TestReport(tuple(cases), timed_out=False, duration_s=self.delay_s)
