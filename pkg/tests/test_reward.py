from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from certrank.reward import (
    PairData,
    RewardModel,
    RewardTrainConfig,
    RewardTrainingError,
    WindowData,
    build_training_data,
    candidate_scores,
    fit,
    normalized_objective_and_gradient,
    objective_and_gradient,
    score,
)
from certrank.aligner import feature_layout

from builders import random_problem, rel_err, synth
from oracles import central_difference


def test_score_examples():
    m = RewardModel(theta=np.array([1.0, -1.0, 0.5]))
    assert score(m, [2.0, 1.0, 4.0]) == pytest.approx(3.0)
    assert score(RewardModel(theta=np.zeros(3)), [5.0, 1.0, 2.0]) == 0.0
    assert score(RewardModel(theta=np.array([0.0, 1.0, 0.0])), [5.0, 7.0, 2.0]) == 7.0
    with pytest.raises(ValueError):
        score(m, [1.0, 2.0])


def test_singleton_window():
    w = WindowData(np.array([[1.0, 2.0]]), (0,))
    f, g = objective_and_gradient(np.array([0.3, -0.2]), [w], [],
                                  RewardTrainConfig(lambda_l2=0.0))
    assert f == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(g, 0.0)


def test_identical_features_give_log_half():
    w = WindowData(np.array([[1.0, 2.0], [1.0, 2.0]]), (0,))
    f, _ = objective_and_gradient(np.array([0.7, 0.1]), [w], [],
                                  RewardTrainConfig(lambda_l2=0.0))
    assert f == pytest.approx(np.log(0.5), abs=1e-12)


def test_zero_positive_window_skipped_and_empty_set_rejected():
    theta = np.array([0.5])
    cfg = RewardTrainConfig(lambda_l2=0.0)
    empty_pos = WindowData(np.array([[3.0], [1.0]]), ())
    assert objective_and_gradient(theta, [empty_pos], [], cfg)[0] == 0.0
    with pytest.raises(ValueError):
        objective_and_gradient(theta, [WindowData(np.zeros((0, 1)), (0,))], [], cfg)


def test_pair_term_value():
    cfg = RewardTrainConfig(alpha_pair=2.0, lambda_l2=0.0)
    p = PairData(np.array([1.0]), np.array([0.0]))
    f, g = objective_and_gradient(np.array([0.0]), [], [p], cfg)
    assert f == pytest.approx(2 * np.log(0.5))
    assert g[0] == pytest.approx(2 * 0.5)


@given(st.integers(0, 10 ** 6))
@settings(max_examples=100, deadline=None)
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    windows, pairs, cfg, theta = random_problem(rng)
    _, g = objective_and_gradient(theta, windows, pairs, cfg)
    fd = central_difference(lambda t: objective_and_gradient(t, windows, pairs, cfg)[0], theta)
    assert rel_err(g, fd) < 1e-5
    _, gn = normalized_objective_and_gradient(theta, windows, pairs, cfg)
    fdn = central_difference(
        lambda t: normalized_objective_and_gradient(t, windows, pairs, cfg)[0], theta)
    assert rel_err(gn, fdn) < 1e-5


def separable(rng, n_windows=6, n=5, dim=3):
    windows = []
    for _ in range(n_windows):
        x = rng.normal(size=(n, dim))
        pos = int(rng.integers(0, n))
        x[:, 1] = rng.uniform(-1, 0, size=n)
        x[pos, 1] = rng.uniform(0.5, 1.5)
        windows.append(WindowData(x, (pos,)))
    return windows


def test_fit_orders_separable_data():
    windows = separable(np.random.default_rng(0))
    model = fit(windows)
    for w in windows:
        s = score(model, w.features)
        pos = w.positives[0]
        assert all(s[pos] > s[i] for i in range(len(s)) if i != pos)


def test_l2_shrinks_theta_monotonically():
    windows = separable(np.random.default_rng(1))
    norms = [np.linalg.norm(fit(windows, config=RewardTrainConfig(lambda_l2=lam)).theta)
             for lam in (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)]
    assert all(a > b for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 0.05


def test_duplicated_dataset_same_theta():
    rng = np.random.default_rng(2)
    windows, pairs, _, _ = random_problem(rng, dim=3)
    windows = [w for w in windows] + separable(rng, 2, 4, 3)
    one = fit(windows, pairs)
    two = fit(windows * 2, pairs * 2)
    assert np.allclose(one.theta, two.theta, atol=1e-5)


def test_fit_is_deterministic_and_seed_free():
    windows = separable(np.random.default_rng(3))
    a, b = fit(windows, seed=0), fit(windows, seed=99)
    assert a.dumps() == b.dumps()


def test_objective_nondecreasing_along_fit_line():
    rng = np.random.default_rng(4)
    windows = separable(rng)
    cfg = RewardTrainConfig()
    model = fit(windows, config=cfg)
    z = [WindowData(model.standardize(w.features), w.positives) for w in windows]
    vals = [normalized_objective_and_gradient(t * model.theta, z, [], cfg)[0]
            for t in np.linspace(0, 1, 10)]
    assert all(b >= a - 1e-9 for a, b in zip(vals, vals[1:]))


@given(st.integers(0, 10 ** 6), st.floats(0.01, 100))
@settings(max_examples=50, deadline=None)
def test_scale_keeps_argsort(seed, c):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 3))
    m = RewardModel(theta=rng.normal(size=3))
    base = np.argsort(-score(m, x), kind="stable")
    scaled = RewardModel(theta=c * m.theta)
    assert np.array_equal(np.argsort(-score(scaled, x), kind="stable"), base)


def test_no_data_is_training_error():
    with pytest.raises(RewardTrainingError):
        fit([WindowData(np.ones((2, 2)), ())])


def test_nonfinite_objective_is_training_error():
    w = WindowData(np.array([[1e308, 0.0], [-1e308, 1.0]]), (1,))
    with np.errstate(all="ignore"), pytest.raises(RewardTrainingError):
        fit([w], standardize=False, config=RewardTrainConfig(learning_rate=1e10))


def test_model_round_trip():
    model = fit(separable(np.random.default_rng(5)), layout=("a", "b", "c"))
    text = model.dumps()
    again = RewardModel.loads(text)
    assert again.dumps() == text
    x = np.random.default_rng(6).normal(size=(4, 3))
    assert np.array_equal(score(again, x), score(model, x))


def test_training_on_synthetic_windows_ranks_positives_first():
    _, contexts, labels = synth(seed=5, n_windows=20)
    windows, _ = build_training_data(contexts, labels)
    model = fit(windows, layout=feature_layout(0))
    for wid, ctx in contexts.items():
        s = candidate_scores(model, ctx)
        top = max(ctx.roster, key=lambda c: s[c])
        assert top in labels[wid].positive_ids
