"""Out-of-process code-test shim.

Reads one JSON job from stdin::

    {"solution": str, "entry_point": str|null, "test_cases": [str], "timeout_s": num}

loads the solution in a separate worker process, executes each test case
expression in isolation, and writes one JSON verdict to stdout::

    {"cases": [{"index", "passed", "detail"}], "timed_out": bool, "duration_s": num}

The process exits 0 even when every case fails — failures are data. A
nonzero exit means the job itself was malformed. The worker process is NOT
a security boundary against hostile code; run the shim inside a container
for untrusted inputs.
"""

from __future__ import annotations

import io
import json
import math
import multiprocessing
import sys
import time
from contextlib import redirect_stdout
from dataclasses import dataclass


@dataclass(frozen=True)
class Job:
    solution: str
    test_cases: tuple[str, ...]
    entry_point: str | None
    timeout_s: float


class MalformedJob(Exception):
    pass


def parse_job(raw: str) -> Job:
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MalformedJob(f"job is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedJob("job must be a JSON object")
    unknown = set(doc) - {"solution", "entry_point", "test_cases", "timeout_s"}
    if unknown:
        raise MalformedJob(f"unknown job fields: {sorted(unknown)}")
    solution = doc.get("solution")
    if not isinstance(solution, str):
        raise MalformedJob("'solution' must be a string")
    cases = doc.get("test_cases")
    if not isinstance(cases, list) or not cases or not all(isinstance(c, str) for c in cases):
        raise MalformedJob("'test_cases' must be a nonempty list of strings")
    entry_point = doc.get("entry_point")
    if entry_point is not None and not isinstance(entry_point, str):
        raise MalformedJob("'entry_point' must be a string or null")
    timeout_s = doc.get("timeout_s", 60.0)
    if not isinstance(timeout_s, (int, float)) or not math.isfinite(timeout_s) or timeout_s <= 0:
        raise MalformedJob("'timeout_s' must be a positive number")
    return Job(solution, tuple(cases), entry_point, float(timeout_s))


def _limit_resources(timeout_s: float) -> None:
    try:
        import resource

        cpu = int(math.ceil(timeout_s)) + 1
        resource.setrlimit(resource.RLIMIT_CPU, (cpu, cpu))
    except (ImportError, ValueError, OSError):
        pass  # best effort; the parent deadline still applies


def _capture_detail(error: BaseException | None, printed: str) -> str:
    parts = []
    if error is not None:
        parts.append(f"{type(error).__name__}: {error}")
    printed = printed.strip()
    if printed:
        parts.append(f"stdout: {printed}")
    return " | ".join(parts)


def _worker(conn, job: Job) -> None:
    """Child process: load the solution once, then run each check
    expression against a fresh copy of the loaded namespace."""
    _limit_resources(job.timeout_s)
    namespace: dict = {"__name__": "__solution__"}
    buffer = io.StringIO()
    load_error: BaseException | None = None
    try:
        with redirect_stdout(buffer):
            exec(compile(job.solution, "<solution>", "exec"), namespace)
        if job.entry_point and job.entry_point not in namespace:
            load_error = NameError(f"entry point {job.entry_point!r} is not defined")
    except BaseException as exc:  # noqa: BLE001 - verdicts must survive anything
        load_error = exc

    for index, case in enumerate(job.test_cases):
        if load_error is not None:
            conn.send({"index": index, "passed": False,
                       "detail": _capture_detail(load_error, buffer.getvalue())})
            continue
        case_out = io.StringIO()
        try:
            with redirect_stdout(case_out):
                exec(compile(case, f"<case {index}>", "exec"), dict(namespace))
        except BaseException as exc:  # noqa: BLE001
            conn.send({"index": index, "passed": False,
                       "detail": _capture_detail(exc, case_out.getvalue())})
        else:
            conn.send({"index": index, "passed": True, "detail": ""})
    conn.close()


def run_job(job: Job) -> dict:
    start = time.monotonic()
    ctx = multiprocessing.get_context("fork" if sys.platform != "win32" else "spawn")
    parent_conn, child_conn = ctx.Pipe(duplex=False)
    proc = ctx.Process(target=_worker, args=(child_conn, job), daemon=True)
    proc.start()
    child_conn.close()

    received: dict[int, dict] = {}
    deadline = start + job.timeout_s
    timed_out = False
    while len(received) < len(job.test_cases):
        remaining = deadline - time.monotonic()
        if remaining <= 0 or not parent_conn.poll(remaining):
            timed_out = len(received) < len(job.test_cases)
            break
        try:
            verdict = parent_conn.recv()
        except EOFError:
            break  # worker died mid-run; missing cases become failures
        received[verdict["index"]] = verdict

    if proc.is_alive():
        proc.terminate()
        proc.join(1.0)
        if proc.is_alive():
            proc.kill()
            proc.join()
    parent_conn.close()

    duration = time.monotonic() - start
    if timed_out:
        duration = max(duration, job.timeout_s)
    cases = []
    for index in range(len(job.test_cases)):
        if index in received:
            cases.append(received[index])
        elif timed_out:
            cases.append({"index": index, "passed": False, "detail": "timed out"})
        else:
            cases.append({"index": index, "passed": False,
                          "detail": "worker exited before running this case"})
    return {"cases": cases, "timed_out": timed_out, "duration_s": duration}


def main() -> int:
    try:
        job = parse_job(sys.stdin.read())
    except MalformedJob as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    verdict = run_job(job)
    print(json.dumps(verdict))
    return 0


if __name__ == "__main__":
    sys.exit(main())
