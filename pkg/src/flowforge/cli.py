"""Command-line entry point: synthesize, eval, score, advantages,
export-sft."""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import yaml

from . import grpo as grpo_mod
from .config import load_config
from .dsl import ast_complexity, parse_workflow, serialize
from .errors import FlowForgeError
from .executor import QueryInstance, evaluate
from .metaloop import (
    append_trace,
    export_sft,
    load_traces,
    optimize,
    select_best,
)
from .reward import breakdown, complexity_penalty, distinctness

logger = logging.getLogger(__name__)


def _fmt(value: float) -> str:
    return f"{value:g}"


def load_query(path: str) -> QueryInstance:
    with open(path, encoding="utf-8") as handle:
        doc = yaml.safe_load(handle)
    if not isinstance(doc, dict):
        raise FlowForgeError(f"query file {path!r} must be a mapping")
    return _query_from_doc(doc, path)


def _query_from_doc(doc: dict, path: str) -> QueryInstance:
    try:
        return QueryInstance(
            id=str(doc["id"]),
            problem=str(doc["problem"]),
            entry_point=doc.get("entry_point"),
            test_cases=tuple(str(t) for t in doc.get("test_cases") or ()),
        )
    except (KeyError, ValueError) as exc:
        raise FlowForgeError(f"bad query record in {path!r}: {exc}") from exc


def load_queries(path: str) -> list[QueryInstance]:
    with open(path, encoding="utf-8") as handle:
        doc = yaml.safe_load(handle)
    if isinstance(doc, dict):
        doc = [doc]
    if not isinstance(doc, list) or not doc:
        raise FlowForgeError(f"queries file {path!r} must hold a nonempty list")
    return [_query_from_doc(d, path) for d in doc]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synthesize(args) -> int:
    cfg = load_config(
        args.config,
        overrides={
            "mock_script": args.mock,
            "rounds": args.rounds,
            "early_stop": args.early_stop,
            "output_dir": args.out_dir,
        },
    )
    q = load_query(args.query)
    meta, worker = cfg.build_clients()
    sandbox = cfg.build_sandbox()
    trace = optimize(q, meta, worker, sandbox, cfg.metaloop_config())

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    append_trace(trace, str(out_dir / f"{q.id}.trace.jsonl"))
    best = select_best(trace)
    (out_dir / f"{q.id}.workflow.yaml").write_text(serialize(best), encoding="utf-8")

    lines = [f"query: {q.id}", f"rounds: {len(trace.rounds)}", f"selected: {trace.selected}"]
    for r in trace.rounds:
        lines.append(
            f"round {r.index}: pass_rate={_fmt(r.pass_rate)} "
            f"reward={_fmt(r.reward.combined)} cost={_fmt(r.cost)}"
            + (" [invalid]" if r.invalid else "")
        )
    report = "\n".join(lines) + "\n"
    (out_dir / f"{q.id}.report.txt").write_text(report, encoding="utf-8")
    if args.plot_data:
        rows = ["round\tpass_rate\treward\tcost"]
        rows += [
            f"{r.index}\t{_fmt(r.pass_rate)}\t{_fmt(r.reward.combined)}\t{_fmt(r.cost)}"
            for r in trace.rounds
        ]
        (out_dir / f"{q.id}.rounds.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(report, end="")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, overrides={"mock_script": args.mock})
    with open(args.workflow, encoding="utf-8") as handle:
        workflow = parse_workflow(handle.read())
    queries = load_queries(args.queries)
    _, worker = cfg.build_clients()
    sandbox = cfg.build_sandbox()

    def run(q: QueryInstance):
        outcome = evaluate(
            workflow, q, worker, sandbox,
            repetitions=cfg.repetitions, limits=cfg.limits,
            tag_prefix=f"{q.id}/round1/", seed=cfg.seed,
        )
        first = outcome.runs[0]
        solved = first.report is not None and first.report.all_passed
        return q.id, outcome.pass_rate, solved

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run, queries))
    else:
        results = [run(q) for q in queries]

    lines = [f"{qid}: pass_rate={_fmt(rate)} pass@1={'yes' if solved else 'no'}"
             for qid, rate, solved in results]
    pass_at_1 = sum(solved for _, _, solved in results) / len(results)
    lines.append(f"pass@1: {_fmt(pass_at_1)}")
    print("\n".join(lines))
    return 0


def cmd_score(args) -> int:
    cfg = load_config(args.config)
    mismatches = 0
    checked = 0
    for trace in load_traces(args.trace):
        cap = int((trace.config or {}).get("complexity_cap", cfg.complexity_cap))
        history = []
        for r in trace.rounds:
            if r.workflow is None:
                continue
            recomputed = breakdown(
                r.pass_rate,
                complexity_penalty(ast_complexity(r.workflow), cap),
                distinctness(r.workflow, history),
                r.reward.weights,
            )
            checked += 1
            if abs(recomputed.combined - r.reward.combined) > 1e-12:
                mismatches += 1
                print(
                    f"MISMATCH {trace.query.id} round {r.index}: "
                    f"stored={r.reward.combined!r} recomputed={recomputed.combined!r}"
                )
            history.append(r.workflow)
    print(f"checked {checked} rounds, {mismatches} mismatches")
    return 0 if mismatches == 0 else 1


def cmd_advantages(args) -> int:
    cfg = load_config(args.config)
    trace = grpo_mod.load_group_trace(args.trace)
    normalized = grpo_mod.normalize_rewards(trace.scores, cfg.grpo.k)
    table = grpo_mod.advantages(
        normalized, cfg.grpo.T,
        token_rounds=[c.rounds for c in trace.candidates],
        per_round_credit=cfg.grpo.per_round_credit,
    )
    lines = [f"group: G={trace.group_size} l={trace.rounds} "
             f"k={_fmt(cfg.grpo.k)} T={cfg.grpo.T}"]
    for i, adv in enumerate(table.per_candidate):
        lines.append(
            f"candidate {i}: advantage={adv!r} "
            f"normalized={[round(v, 9) for v in normalized[i]]}"
        )
    if all(len(c) > 0 for c in trace.candidates):
        objective, diags = grpo_mod.grpo_objective(trace, cfg.grpo)
        lines.append(f"objective: {objective!r}")
        for i, d in enumerate(diags):
            lines.append(
                f"candidate {i}: surrogate={d.surrogate_mean!r} kl={d.kl_mean!r} "
                f"objective={d.objective!r}"
            )
    else:
        lines.append("objective: unavailable (trace has candidates without token log-probs)")
    print("\n".join(lines))
    return 0


def cmd_export_sft(args) -> int:
    count = 0
    for path in args.traces:
        for trace in load_traces(path):
            export_sft(trace, args.out)
            count += 1
    print(f"exported {count} samples to {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowforge",
        description="Per-query multi-agent workflow synthesis engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="optimize a workflow for one query")
    p.add_argument("--query", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--mock", default=None, help="mock script file (offline run)")
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--early-stop", dest="early_stop", action="store_true", default=None)
    p.add_argument("--no-early-stop", dest="early_stop", action="store_false")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--plot-data", action="store_true")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("eval", help="pass@1 of a fixed workflow over queries")
    p.add_argument("--workflow", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--mock", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="recompute and audit rewards of a trace file")
    p.add_argument("--trace", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("advantages", help="normalized rewards, advantages, objective")
    p.add_argument("--trace", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_advantages)

    p = sub.add_parser("export-sft", help="export SFT samples from trace files")
    p.add_argument("--traces", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_sft)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FlowForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
