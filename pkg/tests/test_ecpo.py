from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from certrank.aligner import compute_features, feature_layout
from certrank.baselines import attach_certificates
from certrank.ecpo import (
    BETA_MAX,
    BETA_MIN,
    BY_REWARD_MODEL,
    BY_VERIFIER,
    EcpoWeights,
    RankStats,
    best_of_n_select,
    group_advantages,
    kl_controller_step,
    reward_batch,
    score_group,
    shaped_reward,
)
from certrank.records import (
    CertStep,
    DocMeta,
    ParseFailure,
    Skeleton,
    SkeletonStep,
    Trajectory,
    WindowInput,
    build_context,
    encode_policy_output,
)
from certrank.reward import RewardModel

from builders import ev, listing_context, listing_output, random_context
from mutants import MUTATED_RULES, mutate

DIM = len(feature_layout())
ZERO = RewardModel(theta=np.zeros(DIM), layout=feature_layout())


def one_step_context():
    sk = Skeleton("sk", "in", (SkeletonStep("s1", "PREP"),))
    t = Trajectory("w", "c0", "w::c0", (ev("e1", ["PREP"], 0, (0, 5), doc="d"),))
    win = WindowInput("w", "in", "sk", ("d",), ("c0",))
    return build_context(win, {"sk": sk}, {"d": DocMeta("d", 50)}, {"c0": t})


def test_defaults():
    w = EcpoWeights()
    assert (w.gamma, w.lambda_cert, w.lambda_cycle, w.xi_inv, w.xi_miss, w.beta_kl) == (
        0.9, 0.5, 1.0, 2.0, 2.0, 0.05)
    with pytest.raises(ValueError):
        EcpoWeights(gamma=0.0)
    with pytest.raises(ValueError):
        EcpoWeights(xi_inv=-1.0)


@pytest.mark.parametrize("sample", ["{not json", ParseFailure("not-parseable")])
def test_unparseable_penalty_path(sample):
    ctx = random_context(np.random.default_rng(0), n_cand=5)
    r = shaped_reward(sample, ctx, ZERO, kl_tok=0.4)
    assert r.total == -2.0 - 5 * 2.0 - 0.05 * 0.4
    assert (r.r_rank_norm, r.r_cert, r.r_cycle) == (0.0, 0.0, 0.0)


def test_prefixless_output_gets_penalty_path():
    ctx = listing_context()
    blank = listing_output(topk=("nobody",))
    r = shaped_reward(blank, ctx, ZERO, k=1)
    assert r.total == -2.0 - 2.0


def test_identical_group_scores_one_and_a_half():
    ctx = one_step_context()
    out = attach_certificates(ctx, ["c0"])
    shaped, adv = score_group([out, out], ctx, ZERO, kls=[0.2, 0.2], k=1)
    for s in shaped:
        assert s.r_rank_norm == 0.0 and s.r_cert == 1.0 and s.r_cycle == 1.0
        assert s.total == pytest.approx(1.5 - 0.05 * 0.2, abs=1e-12)
    assert adv == [0.0, 0.0]


@given(st.integers(0, 10 ** 6), st.sampled_from(MUTATED_RULES + ("none",)),
       st.floats(0, 3))
@settings(max_examples=60, deadline=None)
def test_total_decomposes(seed, rule, kl):
    rng = np.random.default_rng(seed)
    ctx = random_context(rng, n_cand=4)
    k = int(rng.integers(1, 5))
    out = attach_certificates(ctx, list(rng.permutation(ctx.roster))[:ctx.k_window(k)])
    if rule != "none" and any(s.matched for c in out.certificates for s in c):
        out = mutate(out, ctx, rule, rng)
    theta = rng.normal(size=DIM)
    model = RewardModel(theta=theta, layout=feature_layout())
    w = EcpoWeights(lambda_cert=float(rng.uniform(0, 2)), lambda_cycle=float(rng.uniform(0, 2)))
    stats = RankStats(float(rng.normal()), float(rng.uniform(0, 2)), "group")
    r = shaped_reward(out, ctx, model, weights=w, kl_tok=kl, group_rank_stats=stats, k=k)
    if r.invalid and r.r_rank_raw == 0.0 and r.r_cycle == 0.0 and r.penalties == (
            w.xi_inv + w.xi_miss * ctx.k_window(k)):
        assert r.total == -r.penalties - w.beta_kl * kl
        return
    want = (r.r_rank_norm + w.lambda_cert * r.r_cert + w.lambda_cycle * r.r_cycle
            - (w.xi_inv * r.invalid + w.xi_miss * r.missing) - w.beta_kl * kl)
    assert r.total == want
    assert r.r_rank_norm == (r.r_rank_raw - stats.mean) / (stats.std + w.eps_rank)
    assert 0.0 <= r.r_cert <= 1.0 and 0.0 <= r.r_cycle <= 1.0


def test_rank_reward_discounts():
    ctx = listing_context()
    f1 = compute_features(ctx.skeleton, ctx.trajectories["P_001"], "P_001").values
    model = RewardModel(theta=np.asarray(f1, dtype=float), layout=feature_layout())
    out = attach_certificates(ctx, ["P_001", "P_002"])
    r = shaped_reward(out, ctx, model, k=2)
    f2 = compute_features(ctx.skeleton, ctx.trajectories["P_002"], "P_002").values
    want = float(np.dot(f1, f1)) + 0.9 * float(np.dot(f1, f2))
    assert r.r_rank_raw == pytest.approx(want)


def test_group_advantages_examples():
    assert group_advantages([2.0, 2.0, 2.0]) == [0.0, 0.0, 0.0]
    a = group_advantages([1.0, 3.0])
    assert a == pytest.approx([-1 / (1 + 1e-6), 1 / (1 + 1e-6)], abs=1e-15)
    assert group_advantages([4.2]) == [0.0]
    assert group_advantages([]) == []


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12))
def test_advantages_mean_zero(rewards):
    assert abs(np.mean(group_advantages(rewards))) < 1e-9


def test_kl_controller():
    assert kl_controller_step(0.05, 0.05) == 0.05
    assert kl_controller_step(0.05, 0.55, 0.05, 0.1) == pytest.approx(0.05 * math.exp(0.05))
    assert round(kl_controller_step(0.05, 0.55, 0.05, 0.1), 5) == 0.05256
    assert kl_controller_step(5.0, 1e3) == BETA_MAX
    assert kl_controller_step(1e-6, -1e3) == BETA_MIN
    with pytest.raises(ValueError):
        kl_controller_step(0.0, 0.1)


def test_best_of_n_single():
    ctx = listing_context()
    assert best_of_n_select([listing_output()], ctx, BY_VERIFIER, k=1) == 0
    assert best_of_n_select([listing_output()], ctx, BY_REWARD_MODEL, ZERO, k=1) == 0
    with pytest.raises(ValueError):
        best_of_n_select([], ctx, BY_VERIFIER)


def test_best_of_n_by_verifier_prefers_recovered():
    ctx = listing_context()
    good = attach_certificates(ctx, ["P_001"])
    blank = replace(good, certificates=(tuple(CertStep(s.step_id, s.stage, False)
                                               for s in ctx.skeleton.steps),))
    assert best_of_n_select([blank, good], ctx, BY_VERIFIER, k=1) == 1
    assert best_of_n_select([good, good], ctx, BY_VERIFIER, k=1) == 0


def test_best_of_n_by_reward_model_prefers_feasible():
    ctx = listing_context()
    f1 = np.asarray(compute_features(ctx.skeleton, ctx.trajectories["P_001"], "P_001").values)
    f2 = np.asarray(compute_features(ctx.skeleton, ctx.trajectories["P_002"], "P_002").values)
    model = RewardModel(theta=f2 - f1, layout=feature_layout())  # prefers P_002
    infeasible = listing_output(topk=("P_002",))
    feasible = listing_output()
    assert best_of_n_select([infeasible, feasible], ctx, BY_REWARD_MODEL, model, k=1) == 1
    both_bad = [infeasible, listing_output(span=(300, 310))]
    assert best_of_n_select(both_bad, ctx, BY_REWARD_MODEL, model, k=1) == 0


def test_reward_batch_round_trip():
    ctx = listing_context()
    rows = reward_batch([{"window_id": "w_0001",
                          "sample_outputs": [encode_policy_output(listing_output()), "garbage"],
                          "kl": [0.0, 0.2]}], {"w_0001": ctx}, ZERO, k=1)
    (row,) = rows
    assert row["totals"][1] == pytest.approx(-2.0 - 2.0 - 0.05 * 0.2)
    assert abs(sum(row["advantages"])) < 1e-12
    with pytest.raises(KeyError):
        reward_batch([{"window_id": "nope", "sample_outputs": []}], {"w_0001": ctx}, ZERO)
    with pytest.raises(ValueError):
        reward_batch([{"window_id": "w_0001", "sample_outputs": ["x"], "kl": [1, 2]}],
                     {"w_0001": ctx}, ZERO)
