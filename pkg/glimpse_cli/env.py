"""Synthetic video episodes with planted evidence chains, plus the rewards.

An episode is a short "video": every frame holds a handful of object
instances, each carrying a feature vector. A hidden chain of low-saliency,
query-correlated objects determines the answer; high-saliency distractors
are uncorrelated with the query.

Feature layout of every object (D entries, all in [-1, 1]):

    [0]      saliency
    [1:3]    label phasor  amplitude * (cos 2*pi*l/C, sin 2*pi*l/C)
    [3:D]    unit semantic vector (the query lives in this subspace)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DomainError, StateError
from .seeding import make_rng

if TYPE_CHECKING:
    from .state import ReasoningState, Trajectory

logger = logging.getLogger(__name__)

SALIENCY_DIM = 0
PHASOR_DIMS = (1, 2)
SEMANTIC_OFFSET = 3

ObjectRef = Tuple[int, int]


@dataclass(frozen=True)
class EnvConfig:
    num_frames: int = 8
    min_objects: int = 2
    max_objects: int = 4
    feature_dim: int = 8
    chain_length: int = 2
    num_distractors: int = 3
    num_classes: int = 4
    max_frame_gap: int = 2
    evidence_margin: float = 0.5
    label_amplitude: float = 0.5

    def feasible_chain_length(self) -> int:
        if self.max_frame_gap == 0:
            return self.min_objects
        return self.num_frames * self.min_objects

    def validate(self) -> None:
        if self.num_frames < 1:
            raise ConfigurationError("env.num_frames must be >= 1")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ConfigurationError("env.min_objects must be >= 1 and <= env.max_objects")
        if self.feature_dim < 4:
            raise ConfigurationError("env.feature_dim must be >= 4")
        if self.chain_length < 1:
            raise ConfigurationError("env.chain_length must be >= 1")
        if self.num_classes < 2:
            raise ConfigurationError("env.num_classes must be >= 2")
        if self.num_distractors < 0:
            raise ConfigurationError("env.num_distractors must be >= 0")
        if self.max_frame_gap < 0:
            raise ConfigurationError("env.max_frame_gap must be >= 0")
        if not 0.0 <= self.evidence_margin < 0.9:
            raise ConfigurationError("env.evidence_margin must lie in [0, 0.9)")
        if not 0.0 < self.label_amplitude <= 1.0:
            raise ConfigurationError("env.label_amplitude must lie in (0, 1]")
        if self.chain_length > self.feasible_chain_length():
            raise ConfigurationError(
                f"env.chain_length={self.chain_length} exceeds the feasible monotonic chain length "
                f"{self.feasible_chain_length()}"
            )
        if self.chain_length + self.num_distractors > self.num_frames * self.min_objects:
            raise ConfigurationError(
                "env.chain_length + env.num_distractors exceeds the guaranteed object count "
                f"{self.num_frames * self.min_objects}"
            )


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.5
    answer_reward_correct: float = 1.0
    answer_reward_wrong: float = 0.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise ConfigurationError(f"reward.alpha must be finite and non-negative, got {self.alpha}")


@dataclass(frozen=True, eq=False)
class ObjectInstance:
    frame_index: int
    object_index: int
    features: np.ndarray
    # oracle namespace; None once stripped
    is_evidence: Optional[bool] = None
    evidence_rank: Optional[int] = None
    hidden_label: Optional[int] = None
    saliency: Optional[float] = None

    @property
    def ref(self) -> ObjectRef:
        return (self.frame_index, self.object_index)


@dataclass(frozen=True, eq=False)
class VideoEpisode:
    episode_id: int
    num_frames: int
    num_classes: int
    objects: Tuple[Tuple[ObjectInstance, ...], ...]
    query: np.ndarray
    generator_seed: int
    evidence_chain: Optional[Tuple[ObjectRef, ...]] = None
    answer_truth: Optional[int] = None
    _frame_features: Tuple[np.ndarray, ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.num_frames != len(self.objects):
            raise ConfigurationError(
                f"episode {self.episode_id}: num_frames={self.num_frames} but {len(self.objects)} frames given"
            )
        matrices = []
        for frame in self.objects:
            rows = np.array([obj.features for obj in frame], dtype=float).reshape(len(frame), -1)
            rows.setflags(write=False)
            matrices.append(rows)
        object.__setattr__(self, "_frame_features", tuple(matrices))

    @property
    def feature_dim(self) -> int:
        return int(self.query.shape[0])

    @property
    def has_oracle(self) -> bool:
        return self.evidence_chain is not None and self.answer_truth is not None

    @property
    def total_objects(self) -> int:
        return sum(len(frame) for frame in self.objects)

    def objects_in_frame(self, t: int) -> int:
        return len(self.objects[t])

    def frame_features(self, t: int) -> np.ndarray:
        return self._frame_features[t]

    def has_object(self, t: int, m: int) -> bool:
        return 0 <= t < self.num_frames and 0 <= m < len(self.objects[t])

    def object_at(self, t: int, m: int) -> ObjectInstance:
        if not self.has_object(t, m):
            raise DomainError(f"episode {self.episode_id} has no object ({t}, {m})")
        return self.objects[t][m]

    def features_of(self, t: int, m: int) -> np.ndarray:
        if not self.has_object(t, m):
            raise DomainError(f"episode {self.episode_id} has no object ({t}, {m})")
        return self._frame_features[t][m]

    def evidence_set(self) -> frozenset:
        return frozenset(_require_oracle(self).evidence_chain or ())


def _require_oracle(episode: VideoEpisode) -> VideoEpisode:
    if not episode.has_oracle:
        raise DomainError(f"episode {episode.episode_id} carries no oracle fields")
    return episode


def label_phase(features: np.ndarray) -> float:
    return math.atan2(float(features[PHASOR_DIMS[1]]), float(features[PHASOR_DIMS[0]]))


def _unit(rng: np.random.Generator, size: int) -> np.ndarray:
    while True:
        v = rng.normal(size=size)
        norm = float(np.linalg.norm(v))
        if norm > 1e-12:
            return v / norm


def _semantic(rng: np.random.Generator, axis: np.ndarray, cosine: float) -> np.ndarray:
    v = rng.normal(size=axis.shape[0])
    v = v - float(v @ axis) * axis
    norm = float(np.linalg.norm(v))
    if norm < 1e-12:
        return cosine * axis
    return cosine * axis + math.sqrt(max(0.0, 1.0 - cosine * cosine)) * (v / norm)


def _chain_frames(rng: np.random.Generator, cfg: EnvConfig, counts: np.ndarray) -> List[int]:
    last = cfg.num_frames - 1
    for _ in range(64):
        frames = [int(rng.integers(0, min(cfg.max_frame_gap, last) + 1))]
        for _ in range(cfg.chain_length - 1):
            step = int(rng.integers(0, cfg.max_frame_gap + 1))
            frames.append(min(frames[-1] + step, last))
        used = np.bincount(frames, minlength=cfg.num_frames)
        if np.all(used <= counts):
            return frames
    # dense fallback: fill frames front to back, one frame step at a time
    frames = []
    t = 0
    while len(frames) < cfg.chain_length:
        take = min(int(counts[t]), cfg.chain_length - len(frames))
        frames.extend([t] * take)
        t += 1
    return frames


def gen_episode(seed: int, cfg: EnvConfig, episode_id: Optional[int] = None) -> VideoEpisode:
    """Generate one episode; a pure function of (seed, cfg)."""
    cfg.validate()
    rng = make_rng(seed)
    T, D, C = cfg.num_frames, cfg.feature_dim, cfg.num_classes

    counts = rng.integers(cfg.min_objects, cfg.max_objects + 1, size=T)
    axis = _unit(rng, D - SEMANTIC_OFFSET)
    query = np.concatenate([np.zeros(SEMANTIC_OFFSET), axis])

    chain: List[ObjectRef] = []
    frames = _chain_frames(rng, cfg, counts)
    for t in sorted(set(frames)):
        k = frames.count(t)
        picked = np.sort(rng.choice(int(counts[t]), size=k, replace=False))
        chain.extend((t, int(m)) for m in picked)

    slots = [(t, m) for t in range(T) for m in range(int(counts[t]))]
    chain_set = set(chain)
    free = [slot for slot in slots if slot not in chain_set]
    distractor_idx = rng.choice(len(free), size=cfg.num_distractors, replace=False) if cfg.num_distractors else []
    distractors = {free[int(i)] for i in distractor_idx}
    labels = rng.integers(0, C, size=len(slots))

    lo = cfg.evidence_margin + 0.1
    hi = min(cfg.evidence_margin + 0.4, 0.99)
    drawn: Dict[ObjectRef, Tuple[int, float, np.ndarray]] = {}
    for slot_idx, (t, m) in enumerate(slots):
        label = int(labels[slot_idx])
        if (t, m) in chain_set:
            saliency = float(rng.uniform(0.0, 0.3))
            semantic = _semantic(rng, axis, float(rng.uniform(lo, hi)))
        elif (t, m) in distractors:
            saliency = float(rng.uniform(0.7, 1.0))
            semantic = _semantic(rng, axis, 0.0)
        else:
            saliency = float(rng.uniform(0.2, 0.6))
            semantic = _semantic(rng, axis, float(rng.uniform(-0.3, 0.3)))
        angle = 2.0 * math.pi * label / C
        phasor = cfg.label_amplitude * np.array([math.cos(angle), math.sin(angle)])
        features = np.concatenate([[saliency], phasor, semantic])
        features.setflags(write=False)
        drawn[(t, m)] = (label, saliency, features)

    # frame order first; within a frame the object closest to the query leads
    chain.sort(key=lambda ref: (ref[0], -float(drawn[ref][2] @ query), ref[1]))
    rank_of = {ref: rank for rank, ref in enumerate(chain)}
    frames_out: List[List[ObjectInstance]] = [[] for _ in range(T)]
    for (t, m), (label, saliency, features) in drawn.items():
        frames_out[t].append(
            ObjectInstance(
                frame_index=t,
                object_index=m,
                features=features,
                is_evidence=(t, m) in chain_set,
                evidence_rank=rank_of.get((t, m)),
                hidden_label=label,
                saliency=saliency,
            )
        )

    answer = sum(frames_out[t][m].hidden_label for t, m in chain) % C
    query.setflags(write=False)
    return VideoEpisode(
        episode_id=int(seed if episode_id is None else episode_id),
        num_frames=T,
        num_classes=C,
        objects=tuple(tuple(frame) for frame in frames_out),
        query=query,
        generator_seed=int(seed),
        evidence_chain=tuple(chain),
        answer_truth=int(answer),
    )


def strip_oracle(episode: VideoEpisode) -> VideoEpisode:
    """Copy of the episode with every hidden field removed."""
    frames = tuple(
        tuple(ObjectInstance(obj.frame_index, obj.object_index, obj.features) for obj in frame)
        for frame in episode.objects
    )
    return VideoEpisode(
        episode_id=episode.episode_id,
        num_frames=episode.num_frames,
        num_classes=episode.num_classes,
        objects=frames,
        query=episode.query,
        generator_seed=episode.generator_seed,
    )


def _object_ref(action: Any) -> ObjectRef:
    if isinstance(action, tuple) and len(action) == 2:
        return (int(action[0]), int(action[1]))
    if hasattr(action, "t") and hasattr(action, "m"):
        return (int(action.t), int(action.m))
    raise DomainError(f"not an object selection: {action!r}")


def answer_reward(predicted: int, episode: VideoEpisode, cfg: RewardConfig) -> float:
    if not 0 <= predicted < episode.num_classes:
        raise DomainError(f"answer {predicted} outside [0, {episode.num_classes})")
    truth = _require_oracle(episode).answer_truth
    return cfg.answer_reward_correct if predicted == truth else cfg.answer_reward_wrong


def evidence_reward(state: "ReasoningState", action: Any, episode: VideoEpisode) -> float:
    """1.0 for the first selection of a chain object in this trajectory, else 0.0."""
    ref = _object_ref(action)
    if not episode.has_object(*ref):
        raise DomainError(f"episode {episode.episode_id} has no object {ref}")
    if ref in episode.evidence_set() and ref not in state.selected:
        return 1.0
    return 0.0


def evidence_hits(selections: Sequence[ObjectRef], episode: VideoEpisode) -> List[float]:
    chain = episode.evidence_set()
    seen = set()
    hits = []
    for ref in selections:
        if not episode.has_object(*ref):
            raise DomainError(f"episode {episode.episode_id} has no object {ref}")
        hits.append(1.0 if ref in chain and ref not in seen else 0.0)
        seen.add(ref)
    return hits


def composite_reward(answer: int, selections: Sequence[ObjectRef], episode: VideoEpisode, cfg: RewardConfig) -> float:
    if not selections:
        raise StateError("composite reward needs at least one object selection")
    hits = evidence_hits(selections, episode)
    return answer_reward(answer, episode, cfg) + cfg.alpha * (sum(hits) / len(hits))


def trajectory_reward(traj: "Trajectory", episode: VideoEpisode, cfg: RewardConfig) -> float:
    """R_ans + alpha * mean evidence credit; stored on the trajectory."""
    if traj.answer is None:
        raise StateError(f"trajectory for episode {traj.episode_id} has no terminal answer")
    selections = traj.selections
    if not selections:
        raise StateError(f"trajectory for episode {traj.episode_id} selects no object")
    hits = evidence_hits(selections, episode)
    total = answer_reward(traj.answer, episode, cfg) + cfg.alpha * (sum(hits) / len(hits))
    traj.evidence_rewards = tuple(hits)
    traj.total_reward = total
    return total


class Scorer:
    """Reward oracle over a corpus.

    After generation this is the only reader of oracle fields: training and
    evaluation hand it trajectories and receive rewards back.
    """

    def __init__(self, episodes: Iterable[VideoEpisode], cfg: RewardConfig) -> None:
        self.cfg = cfg
        self._episodes: Dict[int, VideoEpisode] = {}
        for episode in episodes:
            self._episodes[episode.episode_id] = _require_oracle(episode)

    def episode(self, episode_id: int) -> VideoEpisode:
        try:
            return self._episodes[episode_id]
        except KeyError as exc:
            raise DomainError(f"scorer knows no episode {episode_id}") from exc

    def score(self, traj: "Trajectory") -> float:
        return trajectory_reward(traj, self.episode(traj.episode_id), self.cfg)

    def is_correct(self, episode_id: int, answer: Optional[int]) -> bool:
        return answer is not None and answer == self.episode(episode_id).answer_truth

    def covers_chain(self, episode_id: int, selections: Iterable[ObjectRef]) -> bool:
        return self.episode(episode_id).evidence_set() <= set(selections)


def episode_to_dict(episode: VideoEpisode) -> Dict[str, Any]:
    payload: Dict[str, Any] = {
        "episode_id": episode.episode_id,
        "num_frames": episode.num_frames,
        "num_classes": episode.num_classes,
        "generator_seed": episode.generator_seed,
        "query": [float(x) for x in episode.query],
        "objects": [
            [{"t": obj.frame_index, "m": obj.object_index, "features": [float(x) for x in obj.features]} for obj in frame]
            for frame in episode.objects
        ],
    }
    if episode.has_oracle:
        payload["oracle"] = {
            "evidence_chain": [list(ref) for ref in episode.evidence_chain or ()],
            "answer_truth": episode.answer_truth,
            "objects": [
                [
                    {
                        "is_evidence": obj.is_evidence,
                        "evidence_rank": obj.evidence_rank,
                        "hidden_label": obj.hidden_label,
                        "saliency": obj.saliency,
                    }
                    for obj in frame
                ]
                for frame in episode.objects
            ],
        }
    return payload


def episode_from_dict(payload: Mapping[str, Any], strip: bool = False) -> VideoEpisode:
    oracle = None if strip else payload.get("oracle")
    frames = []
    for t, frame in enumerate(payload["objects"]):
        row = []
        for m, item in enumerate(frame):
            if item["t"] != t or item["m"] != m:
                raise DomainError(f"episode {payload['episode_id']}: object ({item['t']}, {item['m']}) out of place")
            features = np.array(item["features"], dtype=float)
            features.setflags(write=False)
            hidden = oracle["objects"][t][m] if oracle else {}
            row.append(
                ObjectInstance(
                    frame_index=t,
                    object_index=m,
                    features=features,
                    is_evidence=hidden.get("is_evidence"),
                    evidence_rank=hidden.get("evidence_rank"),
                    hidden_label=hidden.get("hidden_label"),
                    saliency=hidden.get("saliency"),
                )
            )
        frames.append(tuple(row))
    query = np.array(payload["query"], dtype=float)
    query.setflags(write=False)
    return VideoEpisode(
        episode_id=int(payload["episode_id"]),
        num_frames=int(payload["num_frames"]),
        num_classes=int(payload["num_classes"]),
        objects=tuple(frames),
        query=query,
        generator_seed=int(payload["generator_seed"]),
        evidence_chain=tuple((int(t), int(m)) for t, m in oracle["evidence_chain"]) if oracle else None,
        answer_truth=int(oracle["answer_truth"]) if oracle else None,
    )
