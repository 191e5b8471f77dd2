import logging
import math

import numpy as np
import pytest

from glimpse_cli import train
from glimpse_cli.env import RewardConfig, Scorer, gen_episode, strip_oracle
from glimpse_cli.errors import ConfigurationError, TrainingError
from glimpse_cli.pipeline import StatePair, flatten_record, propose_trajectory
from glimpse_cli.policy import (
    action_distribution,
    decision_point,
    init_params,
    layout_for,
    sample_trajectory,
    trajectory_log_prob,
)
from glimpse_cli.seeding import make_rng
from glimpse_cli.state import Select, initial_state, legal_actions, replay, transition
from glimpse_cli.train import (
    RATIO_CAP,
    GrpoConfig,
    SftConfig,
    as_episode_map,
    group_advantages,
    grpo_loss_and_grad,
    mean_state_kl,
    sft_loss_and_grad,
    state_kl,
    train_grpo,
    train_sft,
)

CFG = RewardConfig(alpha=0.5)


def _random_params(layout, seed, scale=0.5, hidden_units=0):
    params = init_params(layout, hidden_units=hidden_units)
    return params.with_weights(make_rng(seed).normal(scale=scale, size=params.weights.shape))


def _oracle_pairs(episodes, limits):
    pairs = []
    for episode in episodes:
        record = propose_trajectory(episode, "oracle", CFG, limits)
        pairs.extend(flatten_record(record, episode, limits))
    return pairs


def _numeric_grad(loss_fn, weights, eps=1e-6):
    grad = np.zeros_like(weights)
    for i in range(weights.size):
        up = weights.copy()
        down = weights.copy()
        up[i] += eps
        down[i] -= eps
        grad[i] = (loss_fn(up) - loss_fn(down)) / (2 * eps)
    return grad


def test_sft_loss_at_zero_weights_is_the_mean_log_action_count(small_episodes, small_limits):
    public = [strip_oracle(ep) for ep in small_episodes]
    pairs = _oracle_pairs(small_episodes, small_limits)
    params = init_params(layout_for(public[0]))
    loss, _ = sft_loss_and_grad(params, pairs, as_episode_map(public), small_limits)

    episodes = as_episode_map(public)
    counts = []
    for pair in pairs:
        state = replay(pair.prefix, episodes[pair.episode_id], small_limits).final_state
        counts.append(len(legal_actions(state, episodes[pair.episode_id], small_limits)))
    assert loss == pytest.approx(float(np.mean(np.log(counts))), abs=1e-12)


def test_single_choice_pair_has_zero_loss_and_gradient(degenerate_episode):
    pair = StatePair(episode_id=0, prefix=(), action=Select(0, 0), digest="")
    params = _random_params(layout_for(degenerate_episode), 0)
    loss, grad = sft_loss_and_grad(params, [pair], {0: degenerate_episode})
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(grad, 0.0, atol=1e-12)


def _sampled_pairs(params, episode, seed, limits):
    traj = sample_trajectory(params, episode, seed, limits)
    return [
        StatePair(episode_id=episode.episode_id, prefix=traj.actions[:i], action=action, digest="")
        for i, action in enumerate(traj.actions)
    ]


def test_sft_gradient_matches_finite_differences(small_env, small_limits):
    for seed in range(100):
        episodes = [gen_episode(seed * 2 + j, small_env, episode_id=j) for j in range(2)]
        public = as_episode_map([strip_oracle(ep) for ep in episodes])
        params = _random_params(layout_for(episodes[0]), 500 + seed)
        pairs = [pair for j, ep in enumerate(episodes) for pair in _sampled_pairs(params, ep, seed * 2 + j, small_limits)]

        _, analytic = sft_loss_and_grad(params, pairs, public, small_limits)
        numeric = _numeric_grad(
            lambda w: sft_loss_and_grad(params.with_weights(w), pairs, public, small_limits)[0], params.weights
        )
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7, err_msg=f"instance {seed}")


def test_hidden_layer_sft_gradient_matches_finite_differences(small_episodes, small_limits):
    public = as_episode_map([strip_oracle(ep) for ep in small_episodes[:2]])
    pairs = _oracle_pairs(small_episodes[:2], small_limits)
    params = _random_params(layout_for(small_episodes[0]), 3, hidden_units=2)

    _, analytic = sft_loss_and_grad(params, pairs, public, small_limits)
    numeric = _numeric_grad(
        lambda w: sft_loss_and_grad(params.with_weights(w), pairs, public, small_limits)[0], params.weights
    )
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


def test_train_sft_lowers_the_loss_and_freezes_a_reference(small_episodes, small_limits):
    public = as_episode_map([strip_oracle(ep) for ep in small_episodes])
    pairs = _oracle_pairs(small_episodes, small_limits)
    start = init_params(layout_for(small_episodes[0]))
    result = train_sft(start, pairs, public, SftConfig(learning_rate=0.1, epochs=10, batch_size=4), 0, small_limits)

    assert result.history[-1]["loss"] < result.history[0]["loss"]
    assert [row["epoch"] for row in result.history] == list(range(11))
    assert np.array_equal(result.reference.weights, result.policy.weights)
    assert result.reference.weights is not result.policy.weights


def test_train_sft_is_deterministic(small_episodes, small_limits):
    public = as_episode_map([strip_oracle(ep) for ep in small_episodes])
    pairs = _oracle_pairs(small_episodes, small_limits)
    start = init_params(layout_for(small_episodes[0]))
    cfg = SftConfig(learning_rate=0.1, epochs=3, batch_size=3)
    first = train_sft(start, pairs, public, cfg, 5, small_limits)
    second = train_sft(start, pairs, public, cfg, 5, small_limits)
    assert np.array_equal(first.policy.weights, second.policy.weights)


def test_train_sft_needs_pairs(small_episodes):
    with pytest.raises(ConfigurationError):
        train_sft(init_params(layout_for(small_episodes[0])), [], {}, SftConfig(), 0)


def test_diverging_sft_raises_with_the_last_good_policy(small_episodes, small_limits, monkeypatch):
    public = as_episode_map([strip_oracle(ep) for ep in small_episodes])
    pairs = _oracle_pairs(small_episodes, small_limits)
    start = init_params(layout_for(small_episodes[0]))
    monkeypatch.setattr(train, "_nll", lambda params, scored: (math.nan, np.zeros_like(params.weights)))

    with pytest.raises(TrainingError) as excinfo:
        train_sft(start, pairs, public, SftConfig(epochs=2), 0, small_limits)
    assert excinfo.value.last_good is start


def test_group_advantages_on_small_groups():
    np.testing.assert_allclose(group_advantages([0.0, 2.0]), [-1.0, 1.0], atol=1e-7)
    np.testing.assert_allclose(group_advantages([1.0, 2.0, 3.0]), [-1.2247449, 0.0, 1.2247449], atol=1e-6)
    np.testing.assert_allclose(group_advantages([1.0, 2.0, 3.0], population_std=False), [-1.0, 0.0, 1.0], atol=1e-7)


def test_constant_group_has_zero_advantages():
    assert np.array_equal(group_advantages([0.7] * 5), np.zeros(5))


def test_group_advantages_need_two_rewards():
    with pytest.raises(ConfigurationError):
        group_advantages([1.0])


def test_group_advantages_are_scale_invariant():
    rewards = np.array([0.1, 0.5, 1.5, 0.2])
    np.testing.assert_allclose(group_advantages(rewards * 10.0), group_advantages(rewards), rtol=1e-6)


def test_group_advantages_are_standardised():
    rng = make_rng(17)
    epsilon = 1e-8
    for i in range(10_000):
        size = (2, 4, 8, 16)[i % 4]
        if i % 2:
            rewards = rng.uniform(0.0, 1.5, size=size)
        else:
            # composite rewards: a 0/1 answer term plus alpha times an evidence share
            rewards = rng.integers(0, 2, size=size) + 0.5 * rng.integers(0, 4, size=size) / 3.0
        advantages = group_advantages(rewards, epsilon)
        sigma = float(np.std(rewards))

        assert abs(float(advantages.mean())) < 1e-9
        if np.all(rewards == rewards[0]):
            assert not advantages.any()
        elif sigma > 10 * epsilon:
            # std(A) = sigma / (sigma + epsilon) exactly
            assert abs(float(advantages.std()) - 1.0) <= 1e-6 + epsilon / sigma


def test_state_kl_is_zero_at_the_reference_and_never_negative(small_episodes):
    episode = small_episodes[0]
    layout = layout_for(episode)
    point = decision_point(transition(initial_state(episode), Select(0, 0), episode, 0.5), episode)
    reference = _random_params(layout, 1)
    assert state_kl(reference, reference, point) == pytest.approx(0.0, abs=1e-12)
    for seed in range(50):
        assert state_kl(reference, _random_params(layout, 100 + seed, scale=1.0), point) >= -1e-12


def _group(params, episode, size=4):
    trajectories = [sample_trajectory(params, episode, j) for j in range(size)]
    scorer = Scorer([episode], CFG)
    return trajectories, [scorer.score(traj) for traj in trajectories]


def test_grpo_at_the_reference_has_unit_ratios_and_no_kl(small_episodes):
    episode = small_episodes[1]
    reference = _random_params(layout_for(episode), 2)
    trajectories, rewards = _group(reference, episode)
    objective = grpo_loss_and_grad(reference, reference, trajectories, rewards, GrpoConfig(), {episode.episode_id: episode})

    np.testing.assert_allclose(objective.ratios, 1.0)
    assert objective.mean_kl == pytest.approx(0.0, abs=1e-12)
    assert objective.loss == pytest.approx(-float(np.mean(objective.advantages)), abs=1e-12)


def test_unclipped_grpo_loss_matches_the_direct_formula(small_episodes):
    episode = small_episodes[2]
    layout = layout_for(episode)
    reference = _random_params(layout, 4)
    params = reference.with_weights(reference.weights + make_rng(5).normal(scale=0.1, size=layout.size))
    trajectories, rewards = _group(params, episode, size=6)
    cfg = GrpoConfig(clip_range=math.inf, beta=0.3)

    objective = grpo_loss_and_grad(params, reference, trajectories, rewards, cfg, {episode.episode_id: episode})

    R = np.array(rewards)
    A = (R - R.mean()) / (R.std() + cfg.epsilon) if np.ptp(R) > 0 else np.zeros_like(R)
    ratios = [
        math.exp(trajectory_log_prob(params, traj, episode) - trajectory_log_prob(reference, traj, episode))
        for traj in trajectories
    ]
    kls = []
    for traj in trajectories:
        for state in traj.states:
            p_ref = action_distribution(reference, state, episode)
            p = action_distribution(params, state, episode)
            kls.append(sum(q * (math.log(q) - math.log(p[a])) for a, q in p_ref.items()))
    expected = -float(np.mean(A * np.array(ratios))) + cfg.beta * float(np.mean(kls))
    assert objective.loss == pytest.approx(expected, abs=1e-9)


def test_grpo_gradient_matches_finite_differences(small_env):
    for seed in range(20):
        rng = make_rng(700 + seed)
        episode = gen_episode(seed, small_env, episode_id=seed)
        layout = layout_for(episode)
        reference = _random_params(layout, 800 + seed)
        params = reference.with_weights(reference.weights + rng.normal(scale=0.1, size=layout.size))
        trajectories, rewards = _group(params, episode, size=int(rng.integers(2, 7)))
        cfg = GrpoConfig(clip_range=math.inf, beta=float(rng.uniform(0.0, 1.0)))
        episodes = {episode.episode_id: episode}

        objective = grpo_loss_and_grad(params, reference, trajectories, rewards, cfg, episodes)
        numeric = _numeric_grad(
            lambda w: grpo_loss_and_grad(params.with_weights(w), reference, trajectories, rewards, cfg, episodes).loss,
            params.weights,
        )
        np.testing.assert_allclose(objective.grad, numeric, rtol=1e-4, atol=1e-7, err_msg=f"instance {seed}")


def test_clipped_grpo_gradient_matches_finite_differences(small_episodes):
    episode = small_episodes[3]
    layout = layout_for(episode)
    reference = _random_params(layout, 6)
    params = reference.with_weights(reference.weights + make_rng(7).normal(scale=0.01, size=layout.size))
    trajectories, rewards = _group(params, episode, size=5)
    cfg = GrpoConfig(clip_range=0.2, beta=0.5)
    episodes = {episode.episode_id: episode}

    objective = grpo_loss_and_grad(params, reference, trajectories, rewards, cfg, episodes)
    # keep every ratio away from the clip boundary so the loss is smooth here
    assert np.all(np.abs(objective.ratios - 1.0) < 0.15)
    numeric = _numeric_grad(
        lambda w: grpo_loss_and_grad(params.with_weights(w), reference, trajectories, rewards, cfg, episodes).loss,
        params.weights,
    )
    np.testing.assert_allclose(objective.grad, numeric, rtol=1e-4, atol=1e-7)


def test_saturated_ratios_are_capped_and_counted(small_episodes):
    episode = small_episodes[4]
    layout = layout_for(episode)
    params = _random_params(layout, 8, scale=100.0)
    reference = params.with_weights(-params.weights)
    trajectories, rewards = _group(params, episode)
    rewards[0] += 1.0

    objective = grpo_loss_and_grad(params, reference, trajectories, rewards, GrpoConfig(), {episode.episode_id: episode})
    assert objective.saturated >= 1
    assert float(objective.ratios.max()) == RATIO_CAP
    assert math.isfinite(objective.loss)
    assert np.all(np.isfinite(objective.grad))


def test_grpo_needs_one_reward_per_trajectory(small_episodes):
    episode = small_episodes[0]
    params = init_params(layout_for(episode))
    trajectories, rewards = _group(params, episode)
    with pytest.raises(ConfigurationError):
        grpo_loss_and_grad(params, params, trajectories, rewards[:-1], GrpoConfig(), {episode.episode_id: episode})


def test_grpo_with_an_empty_split_keeps_the_policy(small_episodes, caplog):
    params = init_params(layout_for(small_episodes[0]))
    scorer = Scorer(small_episodes, CFG)
    with caplog.at_level(logging.WARNING):
        result = train_grpo(params, params, [], as_episode_map(small_episodes), scorer, GrpoConfig(steps=3), 0)
    assert result.policy is params
    assert result.history == []
    assert "empty" in caplog.text


def test_strong_kl_penalty_keeps_the_policy_near_the_reference(small_episodes, small_limits):
    public = [strip_oracle(ep) for ep in small_episodes]
    scorer = Scorer(small_episodes, CFG)
    reference = _random_params(layout_for(public[0]), 9)
    cfg = GrpoConfig(beta=100.0, learning_rate=1e-3, steps=30, group_size=4, episodes_per_step=2)
    result = train_grpo(reference, reference.copy(), [ep.episode_id for ep in public], as_episode_map(public), scorer, cfg, 1, small_limits)

    assert len(result.history) == 30
    assert mean_state_kl(reference, result.policy, public, 0, limits=small_limits) < 0.01


def test_train_grpo_is_deterministic(small_episodes, small_limits):
    public = [strip_oracle(ep) for ep in small_episodes]
    scorer = Scorer(small_episodes, CFG)
    start = _random_params(layout_for(public[0]), 10)
    cfg = GrpoConfig(steps=4, group_size=3)
    ids = [ep.episode_id for ep in public]
    first = train_grpo(start, start.copy(), ids, as_episode_map(public), scorer, cfg, 2, small_limits)
    second = train_grpo(start, start.copy(), ids, as_episode_map(public), scorer, cfg, 2, small_limits)
    assert np.array_equal(first.policy.weights, second.policy.weights)
    assert first.history == second.history


def test_grpo_config_is_validated():
    with pytest.raises(ConfigurationError):
        GrpoConfig(group_size=1)
    with pytest.raises(ConfigurationError):
        GrpoConfig(clip_range=0.0)
    with pytest.raises(ConfigurationError):
        GrpoConfig(beta=-1.0)
