"""Multi-purpose reward: pass rate minus a complexity penalty plus a
distinctness bonus, with configurable weights."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .dsl import ComplexityScore, Workflow, workflow_similarity
from .errors import OutOfRange


@dataclass(frozen=True)
class RewardWeights:
    w_perf: float = 1.0
    w_cplx: float = 0.1
    w_dist: float = 0.1

    def __post_init__(self):
        if min(self.w_perf, self.w_cplx, self.w_dist) < 0:
            raise OutOfRange("reward weights must be nonnegative")


@dataclass(frozen=True)
class RewardBreakdown:
    pass_rate: float
    complexity_penalty: float
    distinctness: float
    combined: float
    weights: RewardWeights


def complexity_penalty(score: ComplexityScore, cap: int = 100) -> float:
    """Saturating size penalty: min(scalar, cap) / cap."""
    if cap < 1:
        raise OutOfRange(f"cap must be >= 1, got {cap}")
    return min(score.scalar, cap) / cap


def distinctness(w: Workflow, history: Sequence[Workflow]) -> float:
    """1 minus the maximum similarity to any prior-round workflow; 1.0 on an
    empty history."""
    if not history:
        return 1.0
    return 1.0 - max(workflow_similarity(w, h) for h in history)


def combine(pass_rate: float, complexity: float, distinct: float,
            weights: RewardWeights = RewardWeights()) -> float:
    for name, value in (("pass rate", pass_rate), ("complexity penalty", complexity),
                        ("distinctness", distinct)):
        if not 0.0 <= value <= 1.0:
            raise OutOfRange(f"{name} {value} outside [0, 1]")
    return weights.w_perf * pass_rate - weights.w_cplx * complexity + weights.w_dist * distinct


def breakdown(pass_rate: float, complexity: float, distinct: float,
              weights: RewardWeights = RewardWeights()) -> RewardBreakdown:
    return RewardBreakdown(
        pass_rate=pass_rate,
        complexity_penalty=complexity,
        distinctness=distinct,
        combined=combine(pass_rate, complexity, distinct, weights),
        weights=weights,
    )


def penalty_breakdown(weights: RewardWeights = RewardWeights()) -> RewardBreakdown:
    """Reward recorded for rounds whose meta output was unparsable or whose
    workflow was invalid: worst case on every component."""
    return breakdown(0.0, 1.0, 0.0, weights)
