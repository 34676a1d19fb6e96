"""Deterministic structured rankers and score fusion.

Ties are always broken by window-local roster order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .aligner import AlignParams, AlignmentStats, align, extract_certificate
from .records import PolicyOutput, WindowContext
from .reward import RewardModel, candidate_scores


@dataclass(frozen=True)
class RankedList:
    window_id: str
    ranked: tuple[tuple[str, float], ...]
    output: PolicyOutput | None = None

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(c for c, _ in self.ranked)


@dataclass(frozen=True)
class LPWeights:
    w_hit: float = 1.0
    w_miss: float = 1.5
    w_inv: float = 1.0
    role_bonus: float = 0.4


@dataclass(frozen=True)
class LandmarkPenalties:
    missing: float = 2.0
    ordering: float = 1.0


def lp_score(stats: AlignmentStats, weights: LPWeights = LPWeights()) -> float:
    return (weights.w_hit * stats.hits - weights.w_miss * stats.misses
            - weights.w_inv * stats.precedence_violations
            + weights.role_bonus * stats.role_sat_mean)


def landmark_score(stats: AlignmentStats, penalties: LandmarkPenalties = LandmarkPenalties()) -> float:
    m = stats.hits + stats.misses
    miss_frac = stats.misses / m if m else 0.0
    return stats.coverage - penalties.missing * miss_frac - penalties.ordering * stats.precedence_violations


def _order(roster: Sequence[str], scores: Mapping[str, float]) -> list[str]:
    pos = {c: i for i, c in enumerate(roster)}
    return sorted(roster, key=lambda c: (-scores[c], pos[c]))


def attach_certificates(ctx: WindowContext, ids: Sequence[str],
                        params: AlignParams = AlignParams()) -> PolicyOutput:
    """Policy output whose certificates are the DP-alignment chains of each id."""
    certs = []
    for cid in ids:
        traj = ctx.trajectories[cid]
        res = align(ctx.skeleton, traj, cid, params)
        certs.append(extract_certificate(ctx.skeleton, traj, res, cid))
    return PolicyOutput(ctx.window_id, tuple(ids), tuple(certs))


def rank_by_scores(ctx: WindowContext, scores: Mapping[str, float], k: int,
                   params: AlignParams = AlignParams()) -> RankedList:
    if set(scores) != set(ctx.roster):
        raise ValueError(f"{ctx.window_id}: scores must cover exactly the roster")
    ids = _order(ctx.roster, scores)[:ctx.k_window(k)]
    return RankedList(ctx.window_id, tuple((c, float(scores[c])) for c in ids),
                      attach_certificates(ctx, ids, params))


def rm_only_rank(ctx: WindowContext, model: RewardModel, k: int = 10,
                 params: AlignParams = AlignParams()) -> RankedList:
    return rank_by_scores(ctx, candidate_scores(model, ctx, params), k, params)


def _stats(ctx: WindowContext, params: AlignParams) -> dict[str, AlignmentStats]:
    return {c: align(ctx.skeleton, ctx.trajectories[c], c, params).stats for c in ctx.roster}


def lp_rank(ctx: WindowContext, k: int = 10, weights: LPWeights = LPWeights(),
            params: AlignParams = AlignParams()) -> RankedList:
    scores = {c: lp_score(s, weights) for c, s in _stats(ctx, params).items()}
    return rank_by_scores(ctx, scores, k, params)


def landmark_rank(ctx: WindowContext, k: int = 10,
                  penalties: LandmarkPenalties = LandmarkPenalties(),
                  params: AlignParams = AlignParams()) -> RankedList:
    scores = {c: landmark_score(s, penalties) for c, s in _stats(ctx, params).items()}
    return rank_by_scores(ctx, scores, k, params)


def zscore(values: Sequence[float]) -> np.ndarray:
    x = np.asarray(values, dtype=float)
    sd = x.std()
    if sd <= 1e-12:
        return np.zeros_like(x)
    return (x - x.mean()) / sd


def inclusion_scores(samples: Sequence[Sequence[str]], roster: Sequence[str],
                     gamma: float = 0.9) -> dict[str, float]:
    """Mean over sampled rankings of Σ_k γ^(k-1)·[a_k = c] for each candidate."""
    out = {c: 0.0 for c in roster}
    if not samples:
        return out
    for ranking in samples:
        for i, c in enumerate(ranking):
            if c in out:
                out[c] += gamma ** i
    return {c: v / len(samples) for c, v in out.items()}


def fuse_scores(rm_scores: Mapping[str, float], inclusion: Mapping[str, float], alpha: float,
                roster: Sequence[str] | None = None) -> list[tuple[str, float]]:
    """α·z(rm) + (1-α)·z(inclusion), sorted descending with roster-order ties."""
    if set(rm_scores) != set(inclusion):
        raise ValueError("rm and inclusion scores must cover the same roster")
    roster = list(roster) if roster is not None else list(rm_scores)
    if set(roster) != set(rm_scores):
        raise ValueError("roster does not match the score keys")
    fused_vals = alpha * zscore([rm_scores[c] for c in roster]) + \
        (1 - alpha) * zscore([inclusion[c] for c in roster])
    fused = {c: float(v) for c, v in zip(roster, fused_vals)}
    return [(c, fused[c]) for c in _order(roster, fused)]


def fusion_rank(ctx: WindowContext, model: RewardModel, samples: Sequence[Sequence[str]],
                alpha: float = 0.5, k: int = 10, gamma: float = 0.9,
                params: AlignParams = AlignParams()) -> RankedList:
    rm = candidate_scores(model, ctx, params)
    fused = dict(fuse_scores(rm, inclusion_scores(samples, ctx.roster, gamma), alpha, ctx.roster))
    return rank_by_scores(ctx, fused, k, params)
