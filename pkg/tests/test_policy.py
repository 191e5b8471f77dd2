import math

import numpy as np
import pytest

from glimpse_cli.env import EnvConfig, gen_episode, strip_oracle
from glimpse_cli.errors import ConfigurationError, DomainError, StateError
from glimpse_cli.policy import (
    DecisionPoint,
    FeatureLayout,
    action_distribution,
    action_features,
    decision_point,
    greedy_action,
    init_params,
    layout_for,
    load_params,
    log_prob_and_grad,
    parameter_count,
    point_log_prob_and_grad,
    point_log_probs,
    sample_trajectory,
    save_params,
    trajectory_log_prob,
)
from glimpse_cli.seeding import make_rng
from glimpse_cli.state import Answer, RolloutLimits, Select, Trajectory, initial_state, legal_actions, transition

GRADIENT_ENV = EnvConfig(
    num_frames=4,
    min_objects=1,
    max_objects=3,
    feature_dim=5,
    chain_length=2,
    num_distractors=1,
    num_classes=3,
    max_frame_gap=1,
)


def _random_params(layout, hidden_units=0, temperature=1.0, seed=0, scale=0.5):
    params = init_params(layout, hidden_units=hidden_units, temperature=temperature)
    weights = make_rng(seed).normal(scale=scale, size=params.weights.shape)
    return params.with_weights(weights)


def _finite_difference(params, point, index, eps=1e-6):
    grad = np.zeros_like(params.weights)
    for i in range(params.weights.size):
        up = params.weights.copy()
        down = params.weights.copy()
        up[i] += eps
        down[i] -= eps
        f_up, _ = point_log_prob_and_grad(params.with_weights(up), point, index)
        f_down, _ = point_log_prob_and_grad(params.with_weights(down), point, index)
        grad[i] = (f_up - f_down) / (2 * eps)
    return grad


def test_feature_layout_size():
    layout = FeatureLayout(feature_dim=4, num_classes=2)
    assert layout.size == 3 * 4 + 2 + 6
    assert layout.bias_index == layout.size - 1
    assert parameter_count(layout, 0) == layout.size
    assert parameter_count(layout, 3) == 3 * layout.size + 6


def test_zero_weights_give_a_uniform_distribution():
    episode = gen_episode(1, EnvConfig())
    params = init_params(layout_for(episode))
    probs = action_distribution(params, initial_state(episode), episode)
    assert len(probs) > 1
    for p in probs.values():
        assert p == pytest.approx(1.0 / len(probs), abs=1e-12)


def test_answer_logits_of_ln3_and_zero_give_three_to_one(degenerate_episode):
    limits = RolloutLimits(max_steps=1)
    params = init_params(layout_for(degenerate_episode))
    weights = params.weights.copy()
    weights[params.layout.answer_offset] = math.log(3.0)
    params = params.with_weights(weights)
    state = transition(initial_state(degenerate_episode), Select(0, 0), degenerate_episode, limits.gamma)

    probs = action_distribution(params, state, degenerate_episode, limits)
    assert probs[Answer(0)] == pytest.approx(0.75, abs=1e-12)
    assert probs[Answer(1)] == pytest.approx(0.25, abs=1e-12)


def test_single_legal_action_has_zero_log_prob_and_gradient(degenerate_episode):
    params = _random_params(layout_for(degenerate_episode))
    lp, grad = log_prob_and_grad(params, initial_state(degenerate_episode), Select(0, 0), degenerate_episode)
    assert lp == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(grad, 0.0, atol=1e-12)


def test_feature_rows_fill_their_own_blocks(hand_episode):
    layout = layout_for(hand_episode)
    state = transition(initial_state(hand_episode), Select(0, 0), hand_episode, 0.5)

    select_row = action_features(state, Select(0, 0), hand_episode)
    assert select_row[3 * 4 + 2] == 1.0
    assert np.all(select_row[layout.answer_offset : layout.bias_index] == 0.0)

    answer_row = action_features(state, Answer(1), hand_episode)
    assert answer_row[layout.answer_offset + 1] == 1.0
    assert answer_row[layout.step_index] == 1.0
    assert np.all(answer_row[4 : 3 * 4 + 3] == 0.0)
    assert answer_row[layout.bias_index] == 1.0


def test_phase_feature_peaks_at_the_summed_label(hand_episode):
    layout = layout_for(hand_episode)
    state = initial_state(hand_episode)
    for ref in [(0, 0), (1, 1)]:
        state = transition(state, Select(*ref), hand_episode, 0.5)
    rows = {c: action_features(state, Answer(c), hand_episode)[layout.phase_index] for c in range(2)}
    assert rows[hand_episode.answer_truth] == pytest.approx(1.0)
    assert rows[1 - hand_episode.answer_truth] == pytest.approx(-1.0)


def _random_point(seed, limits=RolloutLimits(max_steps=4, window=1)):
    """Decision point after a random number of random legal selections."""
    rng = make_rng(seed)
    episode = gen_episode(seed, GRADIENT_ENV)
    state = initial_state(episode)
    for _ in range(int(rng.integers(0, limits.max_steps + 1))):
        selects = [a for a in legal_actions(state, episode, limits) if isinstance(a, Select)]
        state = transition(state, selects[int(rng.integers(len(selects)))], episode, limits.gamma)
    return decision_point(state, episode, limits), rng


def test_log_prob_gradient_matches_finite_differences():
    layout = FeatureLayout(feature_dim=GRADIENT_ENV.feature_dim, num_classes=GRADIENT_ENV.num_classes)
    for seed in range(100):
        point, rng = _random_point(seed)
        params = _random_params(layout, temperature=float(rng.uniform(0.5, 2.0)), seed=1000 + seed)
        index = int(rng.integers(len(point.actions)))

        _, analytic = point_log_prob_and_grad(params, point, index)
        numeric = _finite_difference(params, point, index)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7, err_msg=f"instance {seed}")


def test_hidden_layer_gradient_matches_finite_differences():
    layout = FeatureLayout(feature_dim=GRADIENT_ENV.feature_dim, num_classes=GRADIENT_ENV.num_classes)
    for seed in range(20):
        point, rng = _random_point(seed)
        params = _random_params(layout, hidden_units=3, seed=2000 + seed)
        index = int(rng.integers(len(point.actions)))

        _, analytic = point_log_prob_and_grad(params, point, index)
        numeric = _finite_difference(params, point, index)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7, err_msg=f"instance {seed}")


def test_distributions_are_normalised():
    layout = FeatureLayout(feature_dim=GRADIENT_ENV.feature_dim, num_classes=GRADIENT_ENV.num_classes)
    for seed in range(100):
        point, _ = _random_point(seed)
        params = _random_params(layout, seed=seed, scale=3.0)
        total = math.fsum(np.exp(point_log_probs(params, point)))
        assert total == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("factor", [0.1, 3.0, 17.0])
def test_scaling_features_against_the_temperature_keeps_the_argmax(factor):
    layout = FeatureLayout(feature_dim=GRADIENT_ENV.feature_dim, num_classes=GRADIENT_ENV.num_classes)
    for seed in range(200):
        point, rng = _random_point(seed)
        params = _random_params(layout, temperature=float(rng.uniform(0.5, 2.0)), seed=3000 + seed)
        scaled_point = DecisionPoint(state=point.state, actions=point.actions, features=point.features * factor)
        scaled = params.with_temperature(params.temperature / factor)

        assert int(np.argmax(point_log_probs(scaled, scaled_point))) == int(np.argmax(point_log_probs(params, point)))


def test_illegal_action_is_rejected(hand_episode):
    params = init_params(layout_for(hand_episode))
    with pytest.raises(DomainError):
        log_prob_and_grad(params, initial_state(hand_episode), Select(2, 0), hand_episode, RolloutLimits(window=1))


def test_greedy_ties_go_to_the_first_legal_action(hand_episode):
    params = init_params(layout_for(hand_episode))
    assert greedy_action(params, initial_state(hand_episode), hand_episode) == Select(0, 0)


def test_sampling_is_deterministic_per_seed_and_uses_only_public_fields(small_env):
    episode = gen_episode(5, small_env)
    params = _random_params(layout_for(episode), seed=3)
    first = sample_trajectory(params, strip_oracle(episode), 42)
    second = sample_trajectory(params, strip_oracle(episode), 42)
    assert first.actions == second.actions
    assert first.step_log_probs == second.step_log_probs
    assert first.terminated


def test_trajectory_log_prob_matches_the_sampled_steps(small_env):
    episode = gen_episode(6, small_env)
    params = _random_params(layout_for(episode), seed=4)
    for seed in range(10):
        traj = sample_trajectory(params, episode, seed)
        assert trajectory_log_prob(params, traj, episode) == pytest.approx(traj.log_prob, abs=1e-12)
        assert traj.log_prob <= 0.0


def test_trajectory_without_selections_is_rejected(hand_episode):
    params = init_params(layout_for(hand_episode))
    state = initial_state(hand_episode)
    empty = Trajectory(episode_id=0, actions=(), states=(), final_state=state)
    with pytest.raises(StateError):
        trajectory_log_prob(params, empty, hand_episode)


def test_hidden_layer_init_is_seeded():
    layout = FeatureLayout(feature_dim=5, num_classes=3)
    first = init_params(layout, hidden_units=4, seed=9)
    second = init_params(layout, hidden_units=4, seed=9)
    assert np.array_equal(first.weights, second.weights)
    assert first.weights.shape == (parameter_count(layout, 4),)


def test_checkpoint_round_trip(tmp_path):
    layout = FeatureLayout(feature_dim=5, num_classes=3)
    params = _random_params(layout, hidden_units=2, temperature=0.5, seed=7)
    path = tmp_path / "policy.json"
    save_params(path, params)

    loaded = load_params(path, layout)
    assert np.array_equal(loaded.weights, params.weights)
    assert loaded.temperature == 0.5 and loaded.hidden_units == 2


def test_checkpoint_with_another_layout_is_rejected(tmp_path):
    path = tmp_path / "policy.json"
    save_params(path, init_params(FeatureLayout(feature_dim=5, num_classes=3)))
    with pytest.raises(ConfigurationError):
        load_params(path, FeatureLayout(feature_dim=5, num_classes=4))


def test_non_finite_weights_are_rejected():
    params = init_params(FeatureLayout(feature_dim=4, num_classes=2))
    weights = params.weights.copy()
    weights[0] = np.nan
    with pytest.raises(ConfigurationError):
        params.with_weights(weights)
