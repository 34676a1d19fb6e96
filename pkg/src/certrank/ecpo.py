"""Reward shaping, group advantages, KL control and best-of-N selection.

These are the numeric services an external policy-optimization loop calls.
Nothing here samples from or updates a policy; per-sample KL estimates come in
as plain numbers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from .aligner import AlignParams
from .feasibility import step_coverage, valid_prefix, validate_output
from .records import ParseFailure, PolicyOutput, WindowContext, decode_policy_output
from .reward import RewardModel, candidate_scores
from .verifier import VerifierConfig, cycle_scores, reconstruct, strip_bundles

BETA_MIN = 1e-6
BETA_MAX = 10.0


@dataclass(frozen=True)
class EcpoWeights:
    gamma: float = 0.90
    lambda_cert: float = 0.5
    lambda_cycle: float = 1.0
    xi_inv: float = 2.0
    xi_miss: float = 2.0
    beta_kl: float = 0.05
    eps_rank: float = 1e-6
    eps_adv: float = 1e-6
    target_kl: float = 0.05
    kappa: float = 0.1

    def __post_init__(self) -> None:
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        for name in ("lambda_cert", "lambda_cycle", "xi_inv", "xi_miss", "beta_kl",
                     "eps_rank", "eps_adv"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class RankStats:
    mean: float
    std: float
    source: str  # "group" or "pool"


@dataclass(frozen=True)
class ShapedReward:
    r_rank_raw: float
    r_rank_norm: float
    r_cert: float
    r_cycle: float
    invalid: bool
    missing: int
    penalties: float
    kl_term: float
    total: float

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def _as_output(sample: PolicyOutput | ParseFailure | str) -> PolicyOutput | ParseFailure:
    return decode_policy_output(sample) if isinstance(sample, str) else sample


def rank_reward_raw(output: PolicyOutput | ParseFailure, ctx: WindowContext, model: RewardModel,
                    k: int, gamma: float, params: AlignParams = AlignParams(),
                    scores: Mapping[str, float] | None = None) -> float | None:
    """Σ γ^(k-1) R_θ over the valid prefix; None when there is no valid prefix."""
    if isinstance(output, ParseFailure):
        return None
    prefix = valid_prefix(output, ctx, k)
    if not prefix:
        return None
    scores = scores if scores is not None else candidate_scores(model, ctx, params)
    return float(sum(gamma ** i * scores[c] for i, c in enumerate(prefix)))


def pool_rank_stats(ctx: WindowContext, model: RewardModel, k: int, gamma: float,
                    params: AlignParams = AlignParams(),
                    scores: Mapping[str, float] | None = None) -> RankStats:
    """Fallback statistics from the window's candidate pool for singleton groups."""
    scores = scores if scores is not None else candidate_scores(model, ctx, params)
    values = np.array([scores[c] for c in ctx.roster])
    discount = sum(gamma ** i for i in range(ctx.k_window(k)))
    return RankStats(discount * float(values.mean()), discount * float(values.std()), "pool")


def group_rank_stats(raw: Sequence[float | None]) -> RankStats:
    """Mean and population std of the defined raw rank rewards in a group."""
    values = np.array([r for r in raw if r is not None], dtype=float)
    if len(values) == 0:
        return RankStats(0.0, 0.0, "group")
    return RankStats(float(values.mean()), float(values.std()), "group")


def certificate_utility(output: PolicyOutput, ctx: WindowContext, k: int) -> float:
    """(1/K_w) Σ over the valid prefix of per-rank validity times step coverage."""
    k_w = ctx.k_window(k)
    report = validate_output(output, ctx, k)
    prefix = valid_prefix(output, ctx, k)
    total = 0.0
    for j, cid in enumerate(prefix):
        if report.certificate_valid(j):
            total += step_coverage(output.certificates[j], cid, ctx)
    return total / k_w


def cycle_utility(output: PolicyOutput, ctx: WindowContext, k: int,
                  vcfg: VerifierConfig = VerifierConfig()) -> float:
    prefix = valid_prefix(output, ctx, k)
    trimmed = PolicyOutput(output.window_id, prefix, output.certificates)
    rec = reconstruct(strip_bundles(output), ctx, vcfg)
    return cycle_scores(trimmed, rec, ctx.k_window(k)).slot_wise


def shaped_reward(output: PolicyOutput | ParseFailure | str, ctx: WindowContext,
                  model: RewardModel, vcfg: VerifierConfig = VerifierConfig(),
                  weights: EcpoWeights = EcpoWeights(), kl_tok: float = 0.0,
                  group_rank_stats: RankStats | None = None, k: int = 10,
                  params: AlignParams = AlignParams(),
                  scores: Mapping[str, float] | None = None) -> ShapedReward:
    output = _as_output(output)
    k_w = ctx.k_window(k)
    kl_term = weights.beta_kl * kl_tok
    raw = rank_reward_raw(output, ctx, model, k, weights.gamma, params, scores)
    if raw is None:
        penalties = weights.xi_inv + weights.xi_miss * k_w
        return ShapedReward(0.0, 0.0, 0.0, 0.0, True, k_w, penalties, kl_term,
                            -penalties - kl_term)
    stats = group_rank_stats or RankStats(raw, 0.0, "group")
    norm = (raw - stats.mean) / (stats.std + weights.eps_rank)
    report = validate_output(output, ctx, k)
    l_y = len(valid_prefix(output, ctx, k))
    r_cert = certificate_utility(output, ctx, k)
    r_cycle = cycle_utility(output, ctx, k, vcfg)
    invalid = not report.feasible
    missing = max(0, k_w - l_y)
    penalties = weights.xi_inv * invalid + weights.xi_miss * missing
    total = (norm + weights.lambda_cert * r_cert + weights.lambda_cycle * r_cycle
             - penalties - kl_term)
    return ShapedReward(raw, norm, r_cert, r_cycle, invalid, missing, penalties, kl_term, total)


def group_advantages(rewards: Sequence[float], eps_adv: float = 1e-6) -> list[float]:
    r = np.asarray(rewards, dtype=float)
    if len(r) == 0:
        return []
    return list((r - r.mean()) / (r.std() + eps_adv))


def kl_controller_step(beta: float, observed_kl: float, target_kl: float = 0.05,
                       kappa: float = 0.1) -> float:
    if not beta > 0:
        raise ValueError("beta must be > 0")
    new = beta * math.exp(kappa * (observed_kl - target_kl))
    return min(max(new, BETA_MIN), BETA_MAX)


def score_group(samples: Sequence[PolicyOutput | ParseFailure | str], ctx: WindowContext,
                model: RewardModel, vcfg: VerifierConfig = VerifierConfig(),
                weights: EcpoWeights = EcpoWeights(), kls: Sequence[float] | None = None,
                k: int = 10, params: AlignParams = AlignParams()
                ) -> tuple[list[ShapedReward], list[float]]:
    """Two passes: group rank statistics first, then per-sample shaped rewards."""
    outputs = [_as_output(s) for s in samples]
    kls = list(kls) if kls is not None else [0.0] * len(outputs)
    if len(kls) != len(outputs):
        raise ValueError("one KL value per sample is required")
    scores = candidate_scores(model, ctx, params)
    raw = [rank_reward_raw(o, ctx, model, k, weights.gamma, params, scores) for o in outputs]
    if len(outputs) == 1:
        stats = pool_rank_stats(ctx, model, k, weights.gamma, params, scores)
    else:
        stats = group_rank_stats(raw)
    shaped = [shaped_reward(o, ctx, model, vcfg, weights, kl, stats, k, params, scores)
              for o, kl in zip(outputs, kls)]
    return shaped, group_advantages([s.total for s in shaped], weights.eps_adv)


BY_REWARD_MODEL = "by_reward_model"
BY_VERIFIER = "by_verifier"


def best_of_n_select(candidates: Sequence[PolicyOutput | ParseFailure | str], ctx: WindowContext,
                     selector: str, model: RewardModel | None = None,
                     vcfg: VerifierConfig = VerifierConfig(),
                     weights: EcpoWeights = EcpoWeights(), k: int = 10,
                     params: AlignParams = AlignParams()) -> int:
    if not candidates:
        raise ValueError("best-of-N needs at least one candidate")
    outputs = [_as_output(c) for c in candidates]
    if selector == BY_REWARD_MODEL:
        if model is None:
            raise ValueError("reward-model selection needs a model")
        scores = candidate_scores(model, ctx, params)
        values = []
        for o in outputs:
            raw = rank_reward_raw(o, ctx, model, k, weights.gamma, params, scores)
            values.append(-math.inf if raw is None else raw)
        feasible = [validate_output(o, ctx, k).feasible for o in outputs]
        pool = [i for i, f in enumerate(feasible) if f] or list(range(len(outputs)))
    elif selector == BY_VERIFIER:
        values = []
        for o in outputs:
            if isinstance(o, ParseFailure) or not valid_prefix(o, ctx, k):
                values.append(-math.inf)
                continue
            values.append(weights.lambda_cert * certificate_utility(o, ctx, k)
                          + weights.lambda_cycle * cycle_utility(o, ctx, k, vcfg))
        pool = list(range(len(outputs)))
    else:
        raise ValueError(f"unknown selector {selector!r}")
    return max(pool, key=lambda i: (values[i], -i))


def reward_batch(records: Sequence[Mapping[str, Any]], contexts: Mapping[str, WindowContext],
                 model: RewardModel, vcfg: VerifierConfig = VerifierConfig(),
                 weights: EcpoWeights = EcpoWeights(), k: int = 10,
                 params: AlignParams = AlignParams()) -> list[dict[str, Any]]:
    """Batch callback: {window_id, sample_outputs, kl} in, {totals, advantages} out."""
    out = []
    for rec in records:
        wid = rec["window_id"]
        if wid not in contexts:
            raise KeyError(f"unknown window {wid!r}")
        samples = rec["sample_outputs"]
        if not isinstance(samples, list) or not all(isinstance(s, str) for s in samples):
            raise ValueError(f"{wid}: sample_outputs must be a list of strings")
        shaped, adv = score_group(samples, contexts[wid], model, vcfg, weights,
                                  rec.get("kl"), k, params)
        out.append({"window_id": wid, "totals": [s.total for s in shaped],
                    "advantages": adv})
    return out
