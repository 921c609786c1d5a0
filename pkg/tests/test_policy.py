"""Feature construction and policy checks.

The finite-difference oracle for the score function differentiates
log pi directly; the analytic forms s*pi(1) and -s*pi(0) must match it
to tight relative error everywhere, including saturated regions.
"""

import numpy as np
import pytest

from etmpc.features import RunningStats, augment_raw, build_features, feature_dim
from etmpc.policy import (
    AlwaysRecompute,
    LogisticRecompute,
    NeverRecompute,
    PeriodicRecompute,
    PolicyParams,
    init_policy_params,
    load_policy_params,
    log_prob_grad,
    make_policy,
    prob_no_recompute,
    sample_action,
    save_policy_params,
    sigmoid,
)


# ---------------------------------------------------------------------------
# Features


def test_feature_identity_normalization():
    raw = np.array([2.0, -3.0])
    mean = np.zeros(4)
    std = np.ones(4)
    np.testing.assert_array_equal(
        build_features(raw, mean, std), [2.0, -3.0, 4.0, 9.0, 1.0]
    )


def test_feature_component_wise_stats():
    # Raw stat (2, 2) and square stat (4, 1): both center to zero, the
    # bias passes through untouched.
    raw = np.array([2.0])
    mean = np.array([2.0, 4.0])
    std = np.array([2.0, 1.0])
    np.testing.assert_array_equal(build_features(raw, mean, std), [0.0, 0.0, 1.0])


def test_feature_dim_and_augment():
    assert feature_dim(9) == 19
    np.testing.assert_array_equal(augment_raw([1.0, -2.0]), [1.0, -2.0, 1.0, 4.0])


def test_running_stats_match_numpy():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(500, 3)) * np.array([1.0, 5.0, 0.1]) + 2.0
    stats = RunningStats(3)
    for row in data:
        stats.update(row)
    mean, std = stats.frozen()
    np.testing.assert_allclose(mean, data.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(std, data.std(axis=0, ddof=1), atol=1e-12)


def test_running_stats_floors_degenerate_components():
    stats = RunningStats(2)
    for _ in range(100):
        stats.update(np.array([3.0, np.random.default_rng(0).normal()]))
    mean, std = stats.frozen()
    assert std[0] == 1.0
    assert mean[0] == 3.0


def test_running_stats_unseeded_snapshot():
    stats = RunningStats(2)
    mean, std = stats.frozen()
    np.testing.assert_array_equal(mean, [0.0, 0.0])
    np.testing.assert_array_equal(std, [1.0, 1.0])


# ---------------------------------------------------------------------------
# Sigmoid and the score function


def test_sigmoid_values():
    assert sigmoid(0.0) == 0.5
    assert abs(sigmoid(-4.0) - 0.01798620996209156) < 1e-15
    assert abs((1.0 - sigmoid(-4.0)) - 0.982) < 5e-4
    # saturation without overflow
    assert sigmoid(800.0) == 1.0
    assert sigmoid(-800.0) == 0.0


def test_prob_no_recompute_initialized_policy():
    params = init_policy_params(4)
    feats = build_features(
        np.zeros(4), params.feature_mean, params.feature_std
    )
    p0 = prob_no_recompute(params.theta, feats)
    assert abs(p0 - sigmoid(-4.0)) < 1e-15


def test_log_prob_grad_hand_values():
    theta = np.zeros(1)
    s = np.array([1.0])
    np.testing.assert_allclose(log_prob_grad(theta, s, 0), [0.5], atol=1e-15)
    np.testing.assert_allclose(log_prob_grad(theta, s, 1), [-0.5], atol=1e-15)


def test_score_function_identity_exact():
    rng = np.random.default_rng(4)
    for _ in range(50):
        n = int(rng.integers(1, 10))
        theta = rng.normal(size=n)
        s = rng.normal(size=n)
        p0 = prob_no_recompute(theta, s)
        mix = p0 * log_prob_grad(theta, s, 0) + (1 - p0) * log_prob_grad(
            theta, s, 1
        )
        np.testing.assert_allclose(mix, np.zeros(n), atol=1e-15)


def log_prob(theta, s, action):
    p0 = prob_no_recompute(theta, s)
    return np.log(p0) if action == 0 else np.log1p(-p0)


def test_log_prob_grad_matches_finite_differences():
    rng = np.random.default_rng(8)
    h = 1e-6
    for _ in range(200):
        n = int(rng.integers(1, 8))
        theta = rng.normal(size=n)
        s = rng.normal(size=n)
        action = int(rng.integers(0, 2))
        grad = log_prob_grad(theta, s, action)
        fd = np.empty(n)
        for j in range(n):
            dt = np.zeros(n)
            dt[j] = h
            fd[j] = (
                log_prob(theta + dt, s, action) - log_prob(theta - dt, s, action)
            ) / (2 * h)
        denom = max(1e-12, float(np.abs(grad).max()))
        assert float(np.abs(fd - grad).max()) / denom < 1e-6


def test_log_prob_grad_rejects_bad_action():
    with pytest.raises(ValueError):
        log_prob_grad(np.zeros(2), np.ones(2), 2)


# ---------------------------------------------------------------------------
# Policies


def test_always_and_never_are_rng_independent():
    feats = np.ones(3)
    for step in range(5):
        assert AlwaysRecompute().action(feats, step, None) == 1
        assert NeverRecompute().action(feats, step, None) == 0


def test_periodic_schedule():
    pol = PeriodicRecompute(20)
    assert pol.action(None, 0, None) == 1
    assert pol.action(None, 40, None) == 1
    assert pol.action(None, 41, None) == 0
    with pytest.raises(ValueError):
        PeriodicRecompute(0)


def test_logistic_empirical_rate_at_theta_zero():
    params = PolicyParams(
        theta=np.zeros(3), feature_mean=np.zeros(2), feature_std=np.ones(2)
    )
    pol = LogisticRecompute(params)
    rng = np.random.default_rng(123)
    feats = build_features(np.array([0.3]), params.feature_mean, params.feature_std)
    draws = [pol.action(feats, i, rng) for i in range(10_000)]
    assert abs(np.mean(draws) - 0.5) < 0.02


def test_logistic_deterministic_mode():
    params = init_policy_params(1)  # bias -4: p0 small, action 1
    pol = LogisticRecompute(params, deterministic=True)
    feats = build_features(np.zeros(1), params.feature_mean, params.feature_std)
    assert pol.action(feats, 3, None) == 1
    assert pol.score(feats, 1) is None

    params2 = PolicyParams(
        theta=np.array([0.0, 0.0, 4.0]),
        feature_mean=np.zeros(2),
        feature_std=np.ones(2),
    )
    pol2 = LogisticRecompute(params2, deterministic=True)
    assert pol2.action(feats, 3, None) == 0


def test_logistic_score_matches_free_function():
    params = PolicyParams(
        theta=np.array([0.5, -1.0, 0.2]),
        feature_mean=np.zeros(2),
        feature_std=np.ones(2),
    )
    pol = LogisticRecompute(params)
    feats = np.array([1.0, 2.0, 1.0])
    np.testing.assert_array_equal(
        pol.score(feats, 0), log_prob_grad(params.theta, feats, 0)
    )


def test_sample_action_dispatch():
    assert sample_action(AlwaysRecompute(), None, 7, None) == 1
    assert sample_action(PeriodicRecompute(2), None, 7, None) == 0


# ---------------------------------------------------------------------------
# Parameter container


def test_init_policy_params_shape_and_bias():
    params = init_policy_params(9)
    assert params.theta.shape == (19,)
    assert params.theta[-1] == -4.0
    assert np.all(params.theta[:-1] == 0.0)


def test_policy_params_validation():
    with pytest.raises(ValueError):
        PolicyParams(
            theta=np.zeros(4), feature_mean=np.zeros(2), feature_std=np.ones(2)
        )
    with pytest.raises(ValueError):
        PolicyParams(
            theta=np.zeros(3),
            feature_mean=np.zeros(2),
            feature_std=np.array([1.0, 0.0]),
        )
    with pytest.raises(ValueError):
        PolicyParams(
            theta=np.array([np.nan, 0.0, 0.0]),
            feature_mean=np.zeros(2),
            feature_std=np.ones(2),
        )


def test_policy_params_json_round_trip(tmp_path):
    params = PolicyParams(
        theta=np.array([0.1, -2.5, 3.75]),
        feature_mean=np.array([1.0, 2.0]),
        feature_std=np.array([0.5, 4.0]),
        feature_names=("a", "a_sq"),
    )
    path = tmp_path / "params.json"
    save_policy_params(params, path)
    loaded = load_policy_params(path)
    np.testing.assert_array_equal(loaded.theta, params.theta)
    np.testing.assert_array_equal(loaded.feature_mean, params.feature_mean)
    np.testing.assert_array_equal(loaded.feature_std, params.feature_std)
    assert loaded.feature_names == params.feature_names

    bad = path.read_text().replace('"schema_version": 1', '"schema_version": 99')
    path.write_text(bad)
    with pytest.raises(ValueError):
        load_policy_params(path)


def test_make_policy_parser():
    assert make_policy("always").kind == "always"
    assert make_policy("never").kind == "never"
    assert make_policy("periodic:20").period == 20
    params = init_policy_params(2)
    assert make_policy("logistic", params).kind == "logistic"
    with pytest.raises(ValueError):
        make_policy("periodic")
    with pytest.raises(ValueError):
        make_policy("logistic")
    with pytest.raises(ValueError):
        make_policy("sometimes")
