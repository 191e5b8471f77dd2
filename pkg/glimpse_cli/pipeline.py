"""Training-data construction.

Propose a speculative path, search around it, keep the top-scoring
trajectories that survive the filters, normalise them into records and
flatten them into (state, action) pairs. The GRPO split is the set of
training episodes the distilled policy still gets wrong.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from .env import RewardConfig, Scorer, VideoEpisode, composite_reward
from .errors import ConfigurationError, DataIntegrityError, DomainError, StateError
from .mcts import SearchConfig, dump_tree, extract_top_trajectories, search
from .policy import PolicyParams, greedy_trajectory
from .seeding import derive_seed, make_rng
from .state import (
    DEFAULT_LIMITS,
    Action,
    Answer,
    RolloutLimits,
    Select,
    Trajectory,
    action_from_dict,
    action_to_dict,
    replay,
)

logger = logging.getLogger(__name__)

TAG_EVIDENCE = "evidence-hit"
TAG_DISTRACTOR = "distractor"
TAG_REPEAT = "repeat"

SOURCE_SPECULATED = "speculated"
SOURCE_SEARCHED = "searched"
SOURCES = (SOURCE_SPECULATED, SOURCE_SEARCHED)

PROPOSAL_MODES = ("oracle", "greedy")

REWARD_TOLERANCE = 1e-9


@dataclass(frozen=True)
class RecordStep:
    k: int
    action: Select
    tag: str
    # digest of h^(k), the summary after this selection
    digest: str


@dataclass(frozen=True)
class TrajectoryRecord:
    episode_id: int
    steps: Tuple[RecordStep, ...]
    final_answer: int
    total_reward: float
    source: str

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def actions(self) -> Tuple[Action, ...]:
        return tuple(step.action for step in self.steps) + (Answer(self.final_answer),)

    @property
    def selections(self) -> Tuple[Tuple[int, int], ...]:
        return tuple((step.action.t, step.action.m) for step in self.steps)


@dataclass(frozen=True)
class StatePair:
    """One supervised decision: the action taken after `prefix` from the episode start."""

    episode_id: int
    prefix: Tuple[Action, ...]
    action: Action
    digest: str


@dataclass
class DatasetSplit:
    sft_records: List[TrajectoryRecord]
    mtdp_episode_ids: List[int]
    mtdp_fraction: float
    challenge_pool_size: int = 0


@dataclass
class SftDataset:
    records: List[TrajectoryRecord]
    pairs: List[StatePair]
    stats: List[Dict[str, Any]] = field(default_factory=list)
    trees: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def episode_ids(self) -> List[int]:
        return sorted({record.episode_id for record in self.records})


def _relaxed(limits: RolloutLimits, length: int) -> RolloutLimits:
    if length <= limits.max_steps:
        return limits
    return replace(limits, max_steps=length)


def _record_from_actions(
    actions: Sequence[Action],
    episode: VideoEpisode,
    cfg: RewardConfig,
    source: str,
    limits: RolloutLimits,
) -> TrajectoryRecord:
    if source not in SOURCES:
        raise DomainError(f"unknown record source {source!r}")
    traj = replay(actions, episode, _relaxed(limits, len(actions)))
    if not traj.terminated or traj.answer is None:
        raise StateError(f"trajectory for episode {episode.episode_id} does not end with an answer")
    if len(traj.actions) != traj.num_selections + 1:
        raise StateError(f"trajectory for episode {episode.episode_id} continues after its answer")
    chain = episode.evidence_set()
    seen = set()
    steps = []
    for k, (action, after) in enumerate(zip(traj.actions, traj.states[1:] + (traj.final_state,)), start=1):
        if not isinstance(action, Select):
            break
        ref = (action.t, action.m)
        if ref in seen:
            tag = TAG_REPEAT
        elif ref in chain:
            tag = TAG_EVIDENCE
        else:
            tag = TAG_DISTRACTOR
        seen.add(ref)
        steps.append(RecordStep(k=k, action=action, tag=tag, digest=after.digest()))
    return TrajectoryRecord(
        episode_id=episode.episode_id,
        steps=tuple(steps),
        final_answer=traj.answer,
        total_reward=composite_reward(traj.answer, traj.selections, episode, cfg),
        source=source,
    )


def record_from_trajectory(
    traj: Trajectory,
    episode: VideoEpisode,
    cfg: RewardConfig,
    source: str = SOURCE_SEARCHED,
    limits: RolloutLimits = DEFAULT_LIMITS,
) -> TrajectoryRecord:
    return _record_from_actions(traj.actions, episode, cfg, source, limits)


def normalize_record(
    record: TrajectoryRecord,
    episode: VideoEpisode,
    cfg: RewardConfig,
    limits: RolloutLimits = DEFAULT_LIMITS,
) -> TrajectoryRecord:
    """Unified multi-turn form: contiguous k from 1, tags, digests and reward re-derived by replay."""
    return _record_from_actions(record.actions, episode, cfg, record.source, limits)


def propose_trajectory(
    episode: VideoEpisode,
    mode: str,
    cfg: RewardConfig,
    limits: RolloutLimits = DEFAULT_LIMITS,
    policy: Optional[PolicyParams] = None,
) -> TrajectoryRecord:
    """Speculative path: the hidden chain then the true answer, or the policy's greedy path."""
    if mode == "oracle":
        if episode.evidence_chain is None or episode.answer_truth is None:
            raise DomainError(f"episode {episode.episode_id} carries no hidden chain to propose from")
        actions: Tuple[Action, ...] = tuple(Select(t, m) for t, m in episode.evidence_chain) + (
            Answer(episode.answer_truth),
        )
    elif mode == "greedy":
        if policy is None:
            raise ConfigurationError("greedy proposals need a policy")
        actions = greedy_trajectory(policy, episode, limits).actions
    else:
        raise ConfigurationError(f"proposal mode must be one of {', '.join(PROPOSAL_MODES)}")
    return _record_from_actions(actions, episode, cfg, SOURCE_SPECULATED, limits)


def record_violations(
    record: TrajectoryRecord,
    scorer: Scorer,
    k_max: int,
    limits: RolloutLimits = DEFAULT_LIMITS,
    verify_coverage: bool = True,
) -> List[str]:
    """Names of the filter criteria a record fails; empty when it is admissible."""
    try:
        episode = scorer.episode(record.episode_id)
        expected = normalize_record(record, episode, scorer.cfg, limits)
    except (DomainError, StateError) as exc:
        raise DataIntegrityError(f"record for episode {record.episode_id} cannot be replayed: {exc}") from exc
    if not math.isclose(expected.total_reward, record.total_reward, rel_tol=0.0, abs_tol=REWARD_TOLERANCE):
        raise DataIntegrityError(
            f"record for episode {record.episode_id} stores reward {record.total_reward}, "
            f"replay gives {expected.total_reward}"
        )

    failures = []
    if not scorer.is_correct(record.episode_id, record.final_answer):
        failures.append("wrong-answer")
    elif verify_coverage and not scorer.covers_chain(record.episode_id, record.selections):
        failures.append("unverifiable")
    tags = [step.tag for step in expected.steps]
    if TAG_REPEAT in tags:
        failures.append("repeat")
    if TAG_EVIDENCE not in tags:
        failures.append("irrelevant")
    if record.length > k_max:
        failures.append("over-length")
    return failures


def filter_trajectories(
    records: Sequence[TrajectoryRecord],
    k_max: int,
    scorer: Scorer,
    limits: RolloutLimits = DEFAULT_LIMITS,
    verify_coverage: bool = True,
) -> List[TrajectoryRecord]:
    """Keep correct, repeat-free, evidence-bearing records no longer than k_max, in order."""
    return [record for record in records if not record_violations(record, scorer, k_max, limits, verify_coverage)]


def flatten_record(record: TrajectoryRecord, episode: VideoEpisode, limits: RolloutLimits = DEFAULT_LIMITS) -> List[StatePair]:
    traj = replay(record.actions, episode, _relaxed(limits, record.length))
    pairs = []
    for i, (state, action) in enumerate(traj.pairs()):
        pairs.append(StatePair(episode_id=record.episode_id, prefix=traj.actions[:i], action=action, digest=state.digest()))
    return pairs


@dataclass(frozen=True)
class SearchJob:
    episode: VideoEpisode
    policy: PolicyParams
    search_cfg: SearchConfig
    reward_cfg: RewardConfig
    limits: RolloutLimits
    seed: int
    k_max: int
    verify_coverage: bool
    speculate: bool
    keep_tree: bool = False


SearchOutcome = Tuple[List[TrajectoryRecord], Dict[str, Any], Optional[Dict[str, Any]]]


def search_episode(job: SearchJob) -> SearchOutcome:
    """Search one episode and return its admissible records with per-episode stats."""
    episode = job.episode
    seed_actions = None
    if job.speculate:
        seed_actions = propose_trajectory(episode, "oracle", job.reward_cfg, job.limits).actions
    tree = search(
        episode,
        job.policy,
        job.search_cfg,
        job.reward_cfg,
        derive_seed(job.seed, "search", episode.episode_id),
        job.limits,
        seed_actions=seed_actions,
    )
    trajectories = extract_top_trajectories(tree, job.search_cfg.top_k, episode, job.reward_cfg, job.limits)
    records = [record_from_trajectory(traj, episode, job.reward_cfg, SOURCE_SEARCHED, job.limits) for traj in trajectories]
    kept = filter_trajectories(records, job.k_max, Scorer([episode], job.reward_cfg), job.limits, job.verify_coverage)
    stats = {
        "episode_id": episode.episode_id,
        "rollouts": tree.rollouts,
        "candidates": len(records),
        "kept": len(kept),
        "top_reward": records[0].total_reward if records else 0.0,
        "top_correct": int(bool(records) and records[0].final_answer == episode.answer_truth),
    }
    return kept, stats, dump_tree(tree) if job.keep_tree else None


def build_sft_dataset(
    episodes: Sequence[VideoEpisode],
    policy: PolicyParams,
    scorer: Scorer,
    search_cfg: SearchConfig,
    seed: int,
    limits: RolloutLimits = DEFAULT_LIMITS,
    k_max: Optional[int] = None,
    verify_coverage: bool = True,
    speculate: bool = True,
    workers: int = 1,
    keep_trees: bool = False,
) -> SftDataset:
    """Search every episode, keep the filtered top trajectories and flatten them into pairs.

    Results are merged in episode-id order whatever the worker count.
    """
    k_max = limits.max_steps if k_max is None else k_max
    jobs = [
        SearchJob(
            episode=scorer.episode(episode.episode_id),
            policy=policy,
            search_cfg=search_cfg,
            reward_cfg=scorer.cfg,
            limits=limits,
            seed=seed,
            k_max=k_max,
            verify_coverage=verify_coverage,
            speculate=speculate,
            keep_tree=keep_trees,
        )
        for episode in sorted(episodes, key=lambda ep: ep.episode_id)
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(search_episode, jobs))
    else:
        results = [search_episode(job) for job in jobs]

    dataset = SftDataset(records=[], pairs=[])
    for job, (kept, stats, tree) in zip(jobs, results):
        dataset.stats.append(stats)
        if tree is not None:
            dataset.trees.append(tree)
        if not kept:
            logger.warning("All trajectories filtered for episode %s; skipping it", job.episode.episode_id)
            continue
        for record in kept:
            dataset.records.append(record)
            dataset.pairs.extend(flatten_record(record, job.episode, limits))
    logger.info(
        "Built SFT dataset: %s records, %s pairs from %s episodes",
        len(dataset.records),
        len(dataset.pairs),
        len(dataset.episode_ids),
    )
    return dataset


def build_mtdp_split(
    episodes: Sequence[VideoEpisode],
    sft_policy: PolicyParams,
    fraction: float,
    sft_records: Sequence[TrajectoryRecord],
    scorer: Scorer,
    seed: int,
    limits: RolloutLimits = DEFAULT_LIMITS,
) -> DatasetSplit:
    """Sample the GRPO episodes from those the distilled policy answers wrongly.

    The target size is round(fraction * number of SFT episodes), at least one.
    """
    if not episodes:
        raise ConfigurationError("the MTDP split needs at least one episode")
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"mtdp.fraction must lie in (0, 1], got {fraction}")

    pool = []
    for episode in sorted(episodes, key=lambda ep: ep.episode_id):
        answer = greedy_trajectory(sft_policy, episode, limits).answer
        if not scorer.is_correct(episode.episode_id, answer):
            pool.append(episode.episode_id)

    sft_size = len({record.episode_id for record in sft_records}) or len(episodes)
    target = max(1, round(fraction * sft_size))
    if not pool:
        logger.warning("The SFT policy answers every episode correctly; the MTDP split is empty")
        chosen: List[int] = []
    elif len(pool) <= target:
        if len(pool) < target:
            logger.warning("Challenge pool exhausted: %s episodes available, %s requested", len(pool), target)
        chosen = list(pool)
    else:
        rng = make_rng(derive_seed(seed, "mtdp"))
        picks = rng.choice(len(pool), size=target, replace=False)
        chosen = sorted(pool[int(i)] for i in picks)
    return DatasetSplit(
        sft_records=list(sft_records),
        mtdp_episode_ids=chosen,
        mtdp_fraction=fraction,
        challenge_pool_size=len(pool),
    )


def record_to_dict(record: TrajectoryRecord) -> Dict[str, Any]:
    return {
        "episode_id": record.episode_id,
        "source": record.source,
        "final_answer": record.final_answer,
        "total_reward": record.total_reward,
        "steps": [
            {"k": step.k, "action": action_to_dict(step.action), "tag": step.tag, "digest": step.digest}
            for step in record.steps
        ],
    }


def record_from_dict(payload: Mapping[str, Any]) -> TrajectoryRecord:
    try:
        steps = []
        for item in payload["steps"]:
            action = action_from_dict(item["action"])
            if not isinstance(action, Select):
                raise DomainError(f"record step {item['k']} is not an object selection")
            steps.append(RecordStep(k=int(item["k"]), action=action, tag=str(item["tag"]), digest=str(item["digest"])))
        return TrajectoryRecord(
            episode_id=int(payload["episode_id"]),
            steps=tuple(steps),
            final_answer=int(payload["final_answer"]),
            total_reward=float(payload["total_reward"]),
            source=str(payload["source"]),
        )
    except (KeyError, TypeError, ValueError, DomainError) as exc:
        raise DataIntegrityError(f"malformed trajectory record: {exc}") from exc


def pair_to_dict(pair: StatePair) -> Dict[str, Any]:
    return {
        "episode_id": pair.episode_id,
        "prefix": [action_to_dict(action) for action in pair.prefix],
        "action": action_to_dict(pair.action),
        "digest": pair.digest,
    }


def pair_from_dict(payload: Mapping[str, Any]) -> StatePair:
    try:
        return StatePair(
            episode_id=int(payload["episode_id"]),
            prefix=tuple(action_from_dict(item) for item in payload["prefix"]),
            action=action_from_dict(payload["action"]),
            digest=str(payload["digest"]),
        )
    except (KeyError, TypeError, ValueError, DomainError) as exc:
        raise DataIntegrityError(f"malformed state-action pair: {exc}") from exc
