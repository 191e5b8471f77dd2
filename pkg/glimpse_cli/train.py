"""Supervised distillation of searched trajectories and group-relative policy optimisation.

SFT minimises the mean negative log-likelihood of the searched actions.
GRPO minimises

    L = -(1/G) sum_j min(A_j r_j, A_j clip(r_j, 1 - c, 1 + c)) + beta * KL[pi_ref || pi_theta]

with r_j = exp(log pi_theta(tau_j) - log pi_ref(tau_j)) over whole trajectories,
A_j = (R_j - mean R) / (std R + eps), and the KL taken exactly at every
visited state and averaged. clip_range = inf drops the clip and the min.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .env import Scorer, VideoEpisode
from .errors import ConfigurationError, DataIntegrityError, DomainError, StateError, TrainingError
from .pipeline import StatePair
from .policy import (
    DecisionPoint,
    PolicyParams,
    decision_point,
    point_expected_jacobian,
    point_log_prob_and_grad,
    point_log_probs,
    sample_trajectory,
    trajectory_points,
)
from .seeding import derive_seed, make_rng
from .state import DEFAULT_LIMITS, RolloutLimits, Trajectory, replay

logger = logging.getLogger(__name__)

RATIO_CAP = 1e6
_LOG_RATIO_CAP = math.log(RATIO_CAP)

Scored = Tuple[DecisionPoint, int]


@dataclass(frozen=True)
class SftConfig:
    learning_rate: float = 0.1
    epochs: int = 100
    batch_size: int = 8

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigurationError("sft.learning_rate must be > 0")
        if self.epochs < 0:
            raise ConfigurationError("sft.epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("sft.batch_size must be >= 1")


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    beta: float = 0.04
    epsilon: float = 1e-8
    clip_range: float = 0.2
    learning_rate: float = 1e-2
    steps: int = 500
    episodes_per_step: int = 1
    population_std: bool = True

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ConfigurationError("grpo.group_size must be >= 2")
        if self.beta < 0 or not math.isfinite(self.beta):
            raise ConfigurationError("grpo.beta must be a finite value >= 0")
        if not self.epsilon > 0 or not math.isfinite(self.epsilon):
            raise ConfigurationError("grpo.epsilon must be a finite value > 0")
        if not self.clip_range > 0:
            raise ConfigurationError("grpo.clip_range must be > 0 (inf disables clipping)")
        if not self.learning_rate > 0 or not math.isfinite(self.learning_rate):
            raise ConfigurationError("grpo.learning_rate must be a finite value > 0")
        if self.steps < 0:
            raise ConfigurationError("grpo.steps must be >= 0")
        if self.episodes_per_step < 1:
            raise ConfigurationError("grpo.episodes_per_step must be >= 1")


def prepare_pairs(
    pairs: Sequence[StatePair], episodes: Mapping[int, VideoEpisode], limits: RolloutLimits = DEFAULT_LIMITS
) -> List[Scored]:
    """Replay every pair's prefix once; the decision points do not depend on the weights."""
    prepared = []
    for pair in pairs:
        try:
            episode = episodes[pair.episode_id]
            state = replay(pair.prefix, episode, limits).final_state
            point = decision_point(state, episode, limits)
            prepared.append((point, point.index(pair.action)))
        except (KeyError, DomainError, StateError) as exc:
            raise DataIntegrityError(f"pair for episode {pair.episode_id} at step {len(pair.prefix)} cannot be replayed: {exc}") from exc
    return prepared


def _nll(params: PolicyParams, scored: Sequence[Scored]) -> Tuple[float, np.ndarray]:
    loss = 0.0
    grad = np.zeros_like(params.weights)
    for point, index in scored:
        lp, g = point_log_prob_and_grad(params, point, index)
        loss -= lp
        grad -= g
    return loss / len(scored), grad / len(scored)


def sft_loss_and_grad(
    params: PolicyParams,
    pairs: Sequence[StatePair],
    episodes: Mapping[int, VideoEpisode],
    limits: RolloutLimits = DEFAULT_LIMITS,
) -> Tuple[float, np.ndarray]:
    """Mean negative log-likelihood of the paired actions and its gradient."""
    if not pairs:
        raise ConfigurationError("SFT needs at least one state-action pair")
    return _nll(params, prepare_pairs(pairs, episodes, limits))


def action_agreement(params: PolicyParams, scored: Sequence[Scored]) -> float:
    """Share of pairs whose action is the policy's top-1 choice."""
    hits = sum(1 for point, index in scored if int(np.argmax(point_log_probs(params, point))) == index)
    return hits / len(scored)


@dataclass
class SftResult:
    policy: PolicyParams
    reference: PolicyParams
    history: List[Dict[str, float]]


def train_sft(
    params: PolicyParams,
    pairs: Sequence[StatePair],
    episodes: Mapping[int, VideoEpisode],
    cfg: SftConfig,
    seed: int,
    limits: RolloutLimits = DEFAULT_LIMITS,
) -> SftResult:
    """Minibatch gradient descent on the SFT loss; the result is frozen as the reference policy."""
    if not pairs:
        raise ConfigurationError("SFT needs a non-empty dataset")
    scored = prepare_pairs(pairs, episodes, limits)
    loss, _ = _nll(params, scored)
    history = [{"epoch": 0, "loss": loss, "agreement": action_agreement(params, scored)}]

    for epoch in range(1, cfg.epochs + 1):
        order = make_rng(derive_seed(seed, "sft", epoch)).permutation(len(scored))
        for start in range(0, len(order), cfg.batch_size):
            batch = [scored[int(i)] for i in order[start : start + cfg.batch_size]]
            batch_loss, grad = _nll(params, batch)
            if not math.isfinite(batch_loss) or not np.all(np.isfinite(grad)):
                raise TrainingError(f"SFT loss diverged in epoch {epoch}", last_good=params)
            weights = params.weights - cfg.learning_rate * grad
            if not np.all(np.isfinite(weights)):
                raise TrainingError(f"SFT weights diverged in epoch {epoch}", last_good=params)
            params = params.with_weights(weights)
        loss, _ = _nll(params, scored)
        if not math.isfinite(loss):
            raise TrainingError(f"SFT loss diverged after epoch {epoch}", last_good=params)
        history.append({"epoch": epoch, "loss": loss, "agreement": action_agreement(params, scored)})
        logger.debug("SFT epoch %s: loss=%.6f", epoch, loss)

    logger.info("SFT finished: loss %.4f -> %.4f over %s pairs", history[0]["loss"], history[-1]["loss"], len(scored))
    return SftResult(policy=params, reference=params.copy(), history=history)


def group_advantages(rewards: Sequence[float], epsilon: float = 1e-8, population_std: bool = True) -> np.ndarray:
    """A_j = (R_j - mean R) / (std R + epsilon); a constant group gives zeros."""
    values = np.asarray(rewards, dtype=float)
    if values.size < 2:
        raise ConfigurationError(f"group advantages need at least 2 rewards, got {values.size}")
    if np.all(values == values[0]):
        return np.zeros_like(values)
    centred = values - values.mean()
    sigma = float(values.std(ddof=0 if population_std else 1))
    return centred / (sigma + epsilon)


def state_kl(reference: PolicyParams, params: PolicyParams, point: DecisionPoint) -> float:
    """Exact KL[pi_ref || pi_theta] over the legal actions of one state."""
    ref_lp = point_log_probs(reference, point)
    lp = point_log_probs(params, point)
    return float(np.exp(ref_lp) @ (ref_lp - lp))


@dataclass
class GroupObjective:
    loss: float
    grad: np.ndarray
    advantages: np.ndarray
    ratios: np.ndarray
    mean_kl: float
    saturated: int


def _group_points(
    trajectories: Sequence[Trajectory], episodes: Mapping[int, VideoEpisode], limits: RolloutLimits
) -> List[List[Scored]]:
    group = []
    for traj in trajectories:
        try:
            group.append(trajectory_points(traj, episodes[traj.episode_id], limits))
        except (KeyError, DomainError) as exc:
            raise DataIntegrityError(f"trajectory for episode {traj.episode_id} cannot be replayed: {exc}") from exc
    return group


def grpo_loss_and_grad(
    params: PolicyParams,
    reference: PolicyParams,
    trajectories: Sequence[Trajectory],
    rewards: Sequence[float],
    cfg: GrpoConfig,
    episodes: Mapping[int, VideoEpisode],
    limits: RolloutLimits = DEFAULT_LIMITS,
) -> GroupObjective:
    """Clipped group-relative surrogate plus the exact KL penalty, with its analytic gradient."""
    if len(trajectories) != len(rewards):
        raise ConfigurationError("every trajectory in a group needs one reward")
    advantages = group_advantages(rewards, cfg.epsilon, cfg.population_std)
    group = _group_points(trajectories, episodes, limits)
    G = len(group)

    surrogate = 0.0
    grad = np.zeros_like(params.weights)
    ratios = np.ones(G)
    saturated = 0
    kl_total = 0.0
    kl_grad = np.zeros_like(params.weights)
    n_states = 0

    for j, points in enumerate(group):
        log_prob = 0.0
        ref_log_prob = 0.0
        log_prob_grad = np.zeros_like(params.weights)
        for point, index in points:
            lp, g = point_log_prob_and_grad(params, point, index)
            log_prob += lp
            log_prob_grad += g

            ref_lp = point_log_probs(reference, point)
            ref_log_prob += float(ref_lp[index])
            cur_lp = point_log_probs(params, point)
            ref_probs = np.exp(ref_lp)
            kl_total += float(ref_probs @ (ref_lp - cur_lp))
            expected = point_expected_jacobian(params, point, np.exp(cur_lp) - ref_probs)
            kl_grad += expected / params.temperature
            n_states += 1

        log_ratio = log_prob - ref_log_prob
        if log_ratio > _LOG_RATIO_CAP:
            ratio, ratio_grad = RATIO_CAP, np.zeros_like(params.weights)
            saturated += 1
        else:
            ratio = math.exp(log_ratio)
            ratio_grad = ratio * log_prob_grad
        ratios[j] = ratio

        A = float(advantages[j])
        unclipped = A * ratio
        if math.isinf(cfg.clip_range):
            surrogate += unclipped
            grad -= A * ratio_grad
        else:
            clipped = A * min(max(ratio, 1.0 - cfg.clip_range), 1.0 + cfg.clip_range)
            if unclipped <= clipped:
                surrogate += unclipped
                grad -= A * ratio_grad
            else:
                surrogate += clipped

    mean_kl = kl_total / n_states
    loss = -surrogate / G + cfg.beta * mean_kl
    grad = grad / G + cfg.beta * kl_grad / n_states
    return GroupObjective(loss=loss, grad=grad, advantages=advantages, ratios=ratios, mean_kl=mean_kl, saturated=saturated)


@dataclass
class GrpoResult:
    policy: PolicyParams
    history: List[Dict[str, float]] = field(default_factory=list)
    saturated: int = 0


def train_grpo(
    params: PolicyParams,
    reference: PolicyParams,
    episode_ids: Sequence[int],
    episodes: Mapping[int, VideoEpisode],
    scorer: Scorer,
    cfg: GrpoConfig,
    seed: int,
    limits: RolloutLimits = DEFAULT_LIMITS,
) -> GrpoResult:
    """On-policy GRPO: sample G trajectories per episode from the current weights each step."""
    ids = sorted(episode_ids)
    if not ids:
        logger.warning("GRPO split is empty; keeping the SFT policy unchanged")
        return GrpoResult(policy=params)

    result = GrpoResult(policy=params)
    for step in range(1, cfg.steps + 1):
        rng = make_rng(derive_seed(seed, "grpo", step))
        count = min(cfg.episodes_per_step, len(ids))
        batch = sorted(ids[int(i)] for i in rng.choice(len(ids), size=count, replace=False))

        grad = np.zeros_like(params.weights)
        loss = kl = 0.0
        rewards: List[float] = []
        correct = 0
        saturated = 0
        for episode_id in batch:
            episode = episodes[episode_id]
            group = [
                sample_trajectory(params, episode, derive_seed(seed, "grpo", step, episode_id, j), limits)
                for j in range(cfg.group_size)
            ]
            group_rewards = [scorer.score(traj) for traj in group]
            objective = grpo_loss_and_grad(params, reference, group, group_rewards, cfg, episodes, limits)
            grad += objective.grad / count
            loss += objective.loss / count
            kl += objective.mean_kl / count
            saturated += objective.saturated
            rewards.extend(group_rewards)
            correct += sum(1 for traj in group if scorer.is_correct(episode_id, traj.answer))

        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingError(f"GRPO objective diverged at step {step}", last_good=params)
        weights = params.weights - cfg.learning_rate * grad
        if not np.all(np.isfinite(weights)):
            raise TrainingError(f"GRPO weights diverged at step {step}", last_good=params)
        params = params.with_weights(weights)

        if saturated:
            logger.warning("GRPO step %s: %s importance ratios saturated at %.0e", step, saturated, RATIO_CAP)
        result.saturated += saturated
        result.history.append(
            {
                "step": step,
                "mean_reward": math.fsum(rewards) / len(rewards),
                "accuracy": correct / len(rewards),
                "mean_kl": kl,
                "loss": loss,
            }
        )
        if step % 50 == 0:
            logger.info("GRPO step %s: mean_reward=%.4f kl=%.5f", step, result.history[-1]["mean_reward"], kl)

    result.policy = params
    return result


def mean_state_kl(
    reference: PolicyParams,
    params: PolicyParams,
    episodes: Sequence[VideoEpisode],
    seed: int,
    samples: int = 4,
    limits: RolloutLimits = DEFAULT_LIMITS,
) -> float:
    """Mean exact KL over states visited by reference-policy samples."""
    total = 0.0
    count = 0
    for episode in episodes:
        for j in range(samples):
            traj = sample_trajectory(reference, episode, derive_seed(seed, "kl", episode.episode_id, j), limits)
            for point, _ in trajectory_points(traj, episode, limits):
                total += state_kl(reference, params, point)
                count += 1
    return total / count if count else 0.0


def as_episode_map(episodes: Sequence[VideoEpisode]) -> Dict[int, VideoEpisode]:
    return {episode.episode_id: episode for episode in episodes}
