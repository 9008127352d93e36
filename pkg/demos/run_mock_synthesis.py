"""Offline walkthrough of the whole engine on scripted models.

Runs the per-query optimization loop against the shipped mock script and
stub sandbox (no network, no API key), prints the per-round story, then
rolls out a small group and pushes its reward matrix through the
process-reward math.

Usage: python3 demos/run_mock_synthesis.py
"""

from pathlib import Path

import yaml

from flowforge import (
    GrpoConfig,
    MetaLoopConfig,
    MockModelClient,
    ModelRates,
    QueryInstance,
    StubSandbox,
    advantages,
    normalize_rewards,
    select_best,
    serialize,
)
from flowforge.metaloop import build_sft_sample, optimize, rollout_group

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def main() -> None:
    doc = yaml.safe_load((FIXTURES / "query.yaml").read_text())
    query = QueryInstance(
        id=doc["id"],
        problem=doc["problem"],
        entry_point=doc["entry_point"],
        test_cases=tuple(doc["test_cases"]),
    )
    client = MockModelClient.from_file(
        str(FIXTURES / "mock_script.yaml"),
        rates={"meta": ModelRates(1.0, 2.0), "worker": ModelRates(0.5, 0.5)},
    )
    stub = yaml.safe_load((FIXTURES / "stub_sandbox.yaml").read_text())
    sandbox = StubSandbox(
        script={k: list(v) for k, v in stub["solutions"].items()},
        default=stub["default"],
    )

    print(f"query {query.id}: {query.problem.strip().splitlines()[0]}")
    print(f"checked against {len(query.test_cases)} test cases\n")

    cfg = MetaLoopConfig(rounds=10, seed=7)
    trace = optimize(query, client, client, sandbox, cfg)

    for record in trace.rounds:
        workflow_id = record.workflow.id if record.workflow else "(invalid)"
        print(
            f"round {record.index}: workflow={workflow_id} "
            f"pass_rate={record.pass_rate:g} reward={record.reward.combined:g}"
        )
        if record.failing:
            print(f"  fed back: {record.failing[0]}")
    best = select_best(trace)
    print(f"\nselected round {trace.selected} -> workflow {best.id!r}:\n")
    print(serialize(best))

    sample = build_sft_sample(trace)
    rounds_in_sample = sample.reasoning.count("=== round ")
    print(f"SFT sample: {rounds_in_sample} reasoning segments, "
          f"{len(sample.system.splitlines())} workflow lines\n")

    print("rolling out a group of 3 (early stop disabled inside the group)...")
    group_cfg = MetaLoopConfig(rounds=3, group_size=3, seed=7)
    scores, _ = rollout_group(query, client, client, sandbox, group_cfg)
    print(f"reward matrix (G x l):\n{scores}")
    grpo = GrpoConfig(T=1)
    normalized = normalize_rewards(scores, grpo.k)
    table = advantages(normalized, grpo.T)
    print(f"normalized (k={grpo.k:g}):\n{normalized.round(4)}")
    print(f"advantages (rounds after T={grpo.T}): {table.per_candidate.round(4)}")
    print("\n(the scripted models are seed-independent, so the rows tie and "
          "every z-score is zero — plug in live endpoints for real spread)")


if __name__ == "__main__":
    main()
