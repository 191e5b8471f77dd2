"""Multi-trajectory inference, the exhaustive oracle and corpus evaluation."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

from .env import ObjectRef, RewardConfig, Scorer, VideoEpisode, answer_reward
from .errors import ConfigurationError, FeasibilityError, StateError
from .mcts import SearchConfig, best_path, search
from .policy import PolicyParams, complete_from, point_log_probs, sample_trajectory, trajectory_log_prob, trajectory_points
from .seeding import derive_seed
from .state import (
    DEFAULT_LIMITS,
    Action,
    Answer,
    ReasoningState,
    RolloutLimits,
    Select,
    Trajectory,
    actions_of_state,
    replay,
)

logger = logging.getLogger(__name__)

SELECTIONS = ("log_prob", "vote")
STRATEGIES = ("sample", "search")
DEFAULT_TRAJECTORY_CAP = 10**6


@dataclass(frozen=True)
class InferenceConfig:
    n_samples: int = 4
    temperature: float = 1.0
    selection: str = "log_prob"
    strategy: str = "sample"
    search_rollouts: int = 32

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ConfigurationError("inference.n_samples must be >= 1")
        if self.temperature <= 0:
            raise ConfigurationError("inference.temperature must be > 0")
        if self.selection not in SELECTIONS:
            raise ConfigurationError(f"inference.selection must be one of {', '.join(SELECTIONS)}")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"inference.strategy must be one of {', '.join(STRATEGIES)}")
        if self.search_rollouts < 1:
            raise ConfigurationError("inference.search_rollouts must be >= 1")


@dataclass
class InferenceResult:
    answer: int
    chosen: Trajectory
    candidates: List[Trajectory]


def normalized_log_prob(traj: Trajectory) -> float:
    """Sum of step log-probabilities over K + 1 decisions."""
    return traj.log_prob / len(traj.actions)


def _rank_key(traj: Trajectory, index: int) -> Tuple[float, float, int]:
    return (normalized_log_prob(traj), traj.log_prob, -index)


def select_best(candidates: Sequence[Trajectory], selection: str = "log_prob") -> int:
    """Index of the chosen candidate; earlier samples win exact ties."""
    if not candidates:
        raise StateError("no candidate trajectories to select from")
    order = sorted(range(len(candidates)), key=lambda i: _rank_key(candidates[i], i), reverse=True)
    if selection == "log_prob":
        return order[0]
    if selection == "vote":
        votes = Counter(traj.answer for traj in candidates)
        top = max(votes.values())
        # the best-ranked candidate among the most voted answers
        for i in order:
            if votes[candidates[i].answer] == top:
                return i
    raise ConfigurationError(f"unknown selection rule {selection!r}")


def _with_log_probs(params: PolicyParams, traj: Trajectory, episode: VideoEpisode, limits: RolloutLimits) -> Trajectory:
    step_log_probs = []
    for point, index in trajectory_points(traj, episode, limits):
        step_log_probs.append(float(point_log_probs(params, point)[index]))
    traj.step_log_probs = tuple(step_log_probs)
    return traj


def confidence_evaluator(params: PolicyParams, episode: VideoEpisode, limits: RolloutLimits = DEFAULT_LIMITS):
    """Leaf value exp(mean step log-probability); reads no hidden field."""

    def evaluate(final: ReasoningState) -> float:
        traj = replay(actions_of_state(final), episode, limits, check_legal=False)
        return math.exp(trajectory_log_prob(params, traj, episode, limits) / len(traj.actions))

    return evaluate


def _searched_candidate(
    params: PolicyParams, episode: VideoEpisode, seed: int, rollouts: int, limits: RolloutLimits
) -> Trajectory:
    tree = search(
        episode,
        params,
        SearchConfig(n_rollouts=rollouts),
        RewardConfig(),
        seed,
        limits,
        evaluator=confidence_evaluator(params, episode, limits),
    )
    actions = best_path(tree)
    traj = replay(actions, episode, limits)
    if not traj.terminated:
        tail = complete_from(params, episode, traj.final_state, limits)
        traj = replay(tuple(actions) + tail.actions, episode, limits)
    return _with_log_probs(params, traj, episode, limits)


def infer(
    policy: PolicyParams,
    episode: VideoEpisode,
    n_samples: int,
    temperature: float,
    seed: int,
    limits: RolloutLimits = DEFAULT_LIMITS,
    selection: str = "log_prob",
    strategy: str = "sample",
    search_rollouts: int = 32,
) -> InferenceResult:
    """Generate n_samples trajectories and answer with the best one."""
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    params = policy if temperature == policy.temperature else policy.with_temperature(temperature)
    candidates: List[Trajectory] = []
    for i in range(n_samples):
        if strategy == "sample":
            candidates.append(sample_trajectory(params, episode, derive_seed(seed, "sample", i), limits))
        elif strategy == "search":
            candidates.append(_searched_candidate(params, episode, derive_seed(seed, "search", i), search_rollouts, limits))
        else:
            raise ConfigurationError(f"unknown inference strategy {strategy!r}")
    chosen = candidates[select_best(candidates, selection)]
    assert chosen.answer is not None
    return InferenceResult(answer=chosen.answer, chosen=chosen, candidates=candidates)


@dataclass
class BruteForceResult:
    best_reward: float
    optimal: List[Tuple[Action, ...]]
    count: int


def count_trajectories(episode: VideoEpisode, limits: RolloutLimits = DEFAULT_LIMITS) -> int:
    """Number of legal terminated trajectories (selection sequences times answers)."""
    T = episode.num_frames
    counts = [episode.objects_in_frame(t) for t in range(T)]
    ending = [0] * T
    for t in range(min(limits.window, T - 1) + 1):
        ending[t] = counts[t]
    total = sum(ending)
    for _ in range(limits.max_steps - 1):
        following = [0] * T
        for t, ways in enumerate(ending):
            if ways == 0:
                continue
            for nxt in range(t, min(t + limits.window, T - 1) + 1):
                following[nxt] += ways * counts[nxt]
        ending = following
        total += sum(ending)
    return total * episode.num_classes


def brute_force_best(
    episode: VideoEpisode,
    cfg: RewardConfig,
    limits: RolloutLimits = DEFAULT_LIMITS,
    cap: int = DEFAULT_TRAJECTORY_CAP,
) -> BruteForceResult:
    """Exact maximum of the composite reward over every legal trajectory."""
    count = count_trajectories(episode, limits)
    if count > cap:
        raise FeasibilityError(f"episode {episode.episode_id} has {count} trajectories, above the cap of {cap}", count)

    chain = episode.evidence_set()
    answers = [answer_reward(c, episode, cfg) for c in range(episode.num_classes)]
    best = -math.inf
    optimal: List[Tuple[Action, ...]] = []

    def visit(selected: List[ObjectRef], hits: int, cursor: int) -> None:
        nonlocal best, optimal
        if selected:
            evidence = cfg.alpha * (hits / len(selected))
            for c, r_ans in enumerate(answers):
                value = r_ans + evidence
                if value > best + 1e-12:
                    best, optimal = value, []
                if abs(value - best) <= 1e-12:
                    optimal.append(tuple(Select(t, m) for t, m in selected) + (Answer(c),))
        if len(selected) >= limits.max_steps:
            return
        for t in range(cursor, min(cursor + limits.window, episode.num_frames - 1) + 1):
            for m in range(episode.objects_in_frame(t)):
                ref = (t, m)
                gain = 1 if ref in chain and ref not in selected else 0
                selected.append(ref)
                visit(selected, hits + gain, t)
                selected.pop()

    visit([], 0, 0)
    return BruteForceResult(best_reward=best, optimal=optimal, count=count)


class Agent(Protocol):
    def act(self, episode: VideoEpisode, seed: int) -> Trajectory:
        ...


@dataclass
class PolicyAgent:
    policy: PolicyParams
    cfg: InferenceConfig = field(default_factory=InferenceConfig)
    limits: RolloutLimits = DEFAULT_LIMITS

    def act(self, episode: VideoEpisode, seed: int) -> Trajectory:
        return infer(
            self.policy,
            episode,
            self.cfg.n_samples,
            self.cfg.temperature,
            seed,
            self.limits,
            self.cfg.selection,
            self.cfg.strategy,
            self.cfg.search_rollouts,
        ).chosen


@dataclass
class OracleReplayAgent:
    """Walks the hidden evidence chain and answers with the hidden truth."""

    scorer: Scorer
    limits: RolloutLimits = DEFAULT_LIMITS

    def act(self, episode: VideoEpisode, seed: int) -> Trajectory:
        hidden = self.scorer.episode(episode.episode_id)
        assert hidden.evidence_chain is not None and hidden.answer_truth is not None
        actions = tuple(Select(t, m) for t, m in hidden.evidence_chain) + (Answer(hidden.answer_truth),)
        return replay(actions, episode, self.limits)


@dataclass
class EvaluationRow:
    episode_id: int
    predicted: int
    truth: int
    correct: bool
    reward: float
    evidence_hit_rate: float
    length: int
    chain: List[List[int]]


@dataclass
class EvaluationReport:
    metrics: Dict[str, float]
    rows: List[EvaluationRow]

    def to_dict(self) -> Dict[str, Any]:
        return {"metrics": dict(self.metrics), "rows": [asdict(row) for row in self.rows]}


def evaluate(agent: Agent, episodes: Sequence[VideoEpisode], scorer: Scorer, seed: int) -> EvaluationReport:
    """Answer every episode and aggregate accuracy, reward, evidence hit rate and length."""
    if not episodes:
        raise ConfigurationError("evaluation needs at least one episode")
    rows = []
    for episode in sorted(episodes, key=lambda ep: ep.episode_id):
        traj = agent.act(episode, derive_seed(seed, "eval", episode.episode_id))
        reward = scorer.score(traj)
        hidden = scorer.episode(episode.episode_id)
        assert traj.answer is not None and hidden.answer_truth is not None
        rows.append(
            EvaluationRow(
                episode_id=episode.episode_id,
                predicted=traj.answer,
                truth=hidden.answer_truth,
                correct=traj.answer == hidden.answer_truth,
                reward=reward,
                evidence_hit_rate=math.fsum(traj.evidence_rewards) / len(traj.evidence_rewards),
                length=traj.num_selections,
                chain=[list(ref) for ref in traj.selections],
            )
        )
    n = len(rows)
    metrics = {
        "episodes": float(n),
        "accuracy": sum(1 for row in rows if row.correct) / n,
        "mean_reward": math.fsum(row.reward for row in rows) / n,
        "mean_evidence_hit_rate": math.fsum(row.evidence_hit_rate for row in rows) / n,
        "mean_length": math.fsum(row.length for row in rows) / n,
    }
    logger.info("Evaluated %s episodes: accuracy=%.4f mean_reward=%.4f", n, metrics["accuracy"], metrics["mean_reward"])
    return EvaluationReport(metrics=metrics, rows=rows)


def evaluate_policy(
    policy: PolicyParams,
    episodes: Sequence[VideoEpisode],
    scorer: Scorer,
    seed: int,
    cfg: Optional[InferenceConfig] = None,
    limits: RolloutLimits = DEFAULT_LIMITS,
) -> EvaluationReport:
    return evaluate(PolicyAgent(policy, cfg or InferenceConfig(), limits), episodes, scorer, seed)
