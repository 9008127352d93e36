"""Group-relative policy optimization value kernel.

Given a group of G candidate trajectories with per-round scores and aligned
per-token log-probabilities under the new, old, and reference policies, this
module computes round-wise normalized rewards, process-supervised
advantages, and the clipped, KL-regularized objective value. It computes
values only; no gradients or parameter updates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, IoError, ShapeError


@dataclass(frozen=True)
class GrpoConfig:
    k: float = 1.1
    T: int = 3
    eps: float = 0.2
    beta: float = 0.01
    #: Non-canonical variant: credit tokens of round j with the normalized
    #: rewards of rounds >= max(j, T+1) instead of a per-candidate constant.
    per_round_credit: bool = False

    def __post_init__(self):
        if self.k <= 0:
            raise ConfigError("k", "must be positive")
        if self.T < 0:
            raise ConfigError("T", "must be nonnegative")
        if not 0 < self.eps < 1:
            raise ConfigError("eps", "must lie in (0, 1)")
        if self.beta < 0:
            raise ConfigError("beta", "must be nonnegative")


@dataclass(frozen=True)
class TokenLogProbs:
    """Aligned per-token data for one candidate. ``rounds`` holds the
    1-based round index each token belongs to, nondecreasing."""

    rounds: np.ndarray
    logp_new: np.ndarray
    logp_old: np.ndarray
    logp_ref: np.ndarray

    def __post_init__(self):
        n = len(self.rounds)
        for name in ("logp_new", "logp_old", "logp_ref"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"{name} length {len(getattr(self, name))} != rounds length {n}")
        if n and np.any(np.diff(self.rounds) < 0):
            raise ShapeError("token round indices must be nondecreasing")

    def __len__(self) -> int:
        return len(self.rounds)


@dataclass(frozen=True)
class GroupTrace:
    scores: np.ndarray  # shape (G, l)
    candidates: tuple[TokenLogProbs, ...]

    def __post_init__(self):
        if self.scores.ndim != 2:
            raise ShapeError(f"scores must be a G x l matrix, got shape {self.scores.shape}")
        if len(self.candidates) != self.scores.shape[0]:
            raise ShapeError(
                f"{len(self.candidates)} candidates for {self.scores.shape[0]} score rows"
            )
        l = self.scores.shape[1]
        for i, cand in enumerate(self.candidates):
            if len(cand) and (cand.rounds.min() < 1 or cand.rounds.max() > l):
                raise ShapeError(f"candidate {i}: token round index outside 1..{l}")

    @property
    def group_size(self) -> int:
        return self.scores.shape[0]

    @property
    def rounds(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True)
class AdvantageTable:
    normalized: np.ndarray          # (G, l) scaled z-scores
    per_candidate: np.ndarray       # (G,)
    per_token: tuple[np.ndarray, ...] = ()


def as_score_matrix(scores: Sequence[Sequence[float]]) -> np.ndarray:
    rows = [list(r) for r in scores]
    if not rows:
        raise ShapeError("empty score matrix")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ShapeError("ragged score matrix")
    return np.asarray(rows, dtype=float)


def normalize_rewards(scores: np.ndarray | Sequence[Sequence[float]], k: float) -> np.ndarray:
    """Per-round z-scores across candidates (population std), scaled by k^j
    with rounds 1-indexed. Rounds with zero spread normalize to 0."""
    scores = as_score_matrix(scores) if not isinstance(scores, np.ndarray) else scores
    if scores.ndim != 2:
        raise ShapeError(f"expected G x l matrix, got shape {scores.shape}")
    if scores.shape[0] < 2:
        raise ShapeError("need at least 2 candidates per group")
    mean = scores.mean(axis=0)
    std = scores.std(axis=0)  # population std
    # Rounding can leave a ~1e-17 std on a constant column; such spread is
    # noise, not signal, so anything below a relative floor counts as zero.
    spread = std > 1e-12 * np.maximum(1.0, np.abs(mean))
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.where(spread, (scores - mean) / np.where(spread, std, 1.0), 0.0)
    scales = k ** np.arange(1, scores.shape[1] + 1, dtype=float)
    return z * scales


def advantages(
    normalized: np.ndarray,
    T: int,
    token_rounds: Sequence[np.ndarray] | None = None,
    per_round_credit: bool = False,
) -> AdvantageTable:
    """Per-candidate advantage: sum of normalized rewards over rounds after
    the first T (1-indexed rounds j >= T+1). Every token of a candidate
    receives that constant; with ``per_round_credit`` a token of round j
    receives the tail sum from max(j, T+1)."""
    normalized = np.asarray(normalized, dtype=float)
    l = normalized.shape[1]
    if T >= l:
        raise ConfigError("T", f"threshold {T} must be below the round count {l}")
    per_candidate = normalized[:, T:].sum(axis=1)

    per_token: list[np.ndarray] = []
    if token_rounds is not None:
        if len(token_rounds) != normalized.shape[0]:
            raise ShapeError("token round map count differs from candidate count")
        # tail[j] = sum of normalized rewards over rounds j..l (1-indexed)
        tails = np.concatenate(
            [np.cumsum(normalized[:, ::-1], axis=1)[:, ::-1], np.zeros((normalized.shape[0], 1))],
            axis=1,
        )
        for i, rounds in enumerate(token_rounds):
            rounds = np.asarray(rounds, dtype=int)
            if per_round_credit:
                start = np.maximum(rounds, T + 1)
                per_token.append(tails[i, start - 1])
            else:
                per_token.append(np.full(len(rounds), per_candidate[i]))
    return AdvantageTable(normalized, per_candidate, tuple(per_token))


def _aligned(*arrays) -> tuple[np.ndarray, ...]:
    arrays = tuple(np.asarray(a, dtype=float) for a in arrays)
    if len({a.shape for a in arrays}) != 1:
        raise ShapeError(f"misaligned arrays with shapes {[a.shape for a in arrays]}")
    return arrays


def surrogate_term(logp_new, logp_old, adv, eps: float) -> tuple[np.ndarray, float]:
    """Clipped importance-weighted advantage, per token and mean:
    min(r * adv, clip(r, 1-eps, 1+eps) * adv) with r = exp(new - old)."""
    logp_new, logp_old, adv = _aligned(logp_new, logp_old, adv)
    ratio = np.exp(logp_new - logp_old)
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    term = np.minimum(ratio * adv, clipped * adv)
    return term, float(term.mean())


def kl_term(logp_new, logp_ref) -> tuple[np.ndarray, float]:
    """Nonnegative per-token KL estimate rho - ln(rho) - 1 with
    rho = exp(ref - new); zero iff the policies agree on the token."""
    logp_new, logp_ref = _aligned(logp_new, logp_ref)
    delta = logp_ref - logp_new
    value = np.exp(delta) - delta - 1.0
    return value, float(value.mean())


@dataclass(frozen=True)
class CandidateDiagnostics:
    advantage: float
    surrogate_mean: float
    kl_mean: float
    objective: float


def grpo_objective(trace: GroupTrace, cfg: GrpoConfig = GrpoConfig()) -> tuple[float, list[CandidateDiagnostics]]:
    """Group objective: mean over candidates of the token-mean of
    (clipped surrogate - beta * KL), with advantages from the normalized
    per-round scores."""
    table = advantages(
        normalize_rewards(trace.scores, cfg.k),
        cfg.T,
        token_rounds=[c.rounds for c in trace.candidates],
        per_round_credit=cfg.per_round_credit,
    )
    diagnostics = []
    for cand, adv in zip(trace.candidates, table.per_token):
        if len(cand) == 0:
            raise ShapeError("candidate with no tokens")
        surr, surr_mean = surrogate_term(cand.logp_new, cand.logp_old, adv, cfg.eps)
        kl, kl_mean = kl_term(cand.logp_new, cand.logp_ref)
        objective = float((surr - cfg.beta * kl).mean())
        diagnostics.append(
            CandidateDiagnostics(float(adv.mean()), surr_mean, kl_mean, objective)
        )
    return sum(d.objective for d in diagnostics) / trace.group_size, diagnostics


# ---------------------------------------------------------------------------
# Trace file format: one JSON record per line, one record per candidate:
# {"scores": [...l floats...], "tokens": [{"round", "logp_new", "logp_old",
# "logp_ref"}, ...]}
# ---------------------------------------------------------------------------

def load_group_trace(path: str) -> GroupTrace:
    rows: list[list[float]] = []
    candidates: list[TokenLogProbs] = []
    try:
        with open(path, encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                    rows.append([float(s) for s in record["scores"]])
                    tokens = record.get("tokens") or []
                    candidates.append(
                        TokenLogProbs(
                            rounds=np.array([int(t["round"]) for t in tokens]),
                            logp_new=np.array([float(t["logp_new"]) for t in tokens]),
                            logp_old=np.array([float(t["logp_old"]) for t in tokens]),
                            logp_ref=np.array([float(t["logp_ref"]) for t in tokens]),
                        )
                    )
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise IoError(f"{path}:{line_no}: malformed trace record: {exc}") from exc
    except OSError as exc:
        raise IoError(f"cannot read trace {path!r}: {exc}") from exc
    return GroupTrace(as_score_matrix(rows), tuple(candidates))


def dump_group_scores(scores: np.ndarray, path: str) -> None:
    """Write a logprob-free trace skeleton (scores only) for an external
    trainer to complete."""
    try:
        with open(path, "w", encoding="utf-8") as handle:
            for row in np.asarray(scores, dtype=float):
                handle.write(json.dumps({"scores": [float(s) for s in row], "tokens": []}) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write trace {path!r}: {exc}") from exc
