"""Reasoning state, action space and the grounded object-state transition."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .env import ObjectRef, VideoEpisode
from .errors import ConfigurationError, DomainError, MonotonicityError, StateError


@dataclass(frozen=True, order=True)
class Select:
    t: int
    m: int


@dataclass(frozen=True, order=True)
class Answer:
    c: int


Action = Union[Select, Answer]


def action_key(action: Action) -> Tuple[int, int, int]:
    """Total order on actions: selections by (t, m) first, then answers by class."""
    if isinstance(action, Select):
        return (0, action.t, action.m)
    return (1, action.c, 0)


@dataclass(frozen=True)
class RolloutLimits:
    max_steps: int = 6
    window: int = 2
    gamma: float = 0.5

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ConfigurationError("limits.max_steps must be >= 1")
        if self.window < 0:
            raise ConfigurationError("limits.window must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("limits.gamma must lie in [0, 1]")


DEFAULT_LIMITS = RolloutLimits()


@dataclass(frozen=True, eq=False)
class ReasoningState:
    summary: np.ndarray
    frame_cursor: int = 0
    step: int = 0
    selected: Tuple[ObjectRef, ...] = ()
    terminated: bool = False
    answer: Optional[int] = None

    def __post_init__(self) -> None:
        if self.step != len(self.selected):
            raise StateError(f"step {self.step} does not match {len(self.selected)} selections")
        if self.terminated != (self.answer is not None):
            raise StateError("a state carries an answer exactly when it is terminated")
        expected_cursor = self.selected[-1][0] if self.selected else 0
        if self.frame_cursor != expected_cursor:
            raise StateError(f"frame cursor {self.frame_cursor} differs from last selection frame {expected_cursor}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ReasoningState):
            return NotImplemented
        return (
            self.frame_cursor == other.frame_cursor
            and self.step == other.step
            and self.selected == other.selected
            and self.terminated == other.terminated
            and self.answer == other.answer
            and np.array_equal(self.summary, other.summary)
        )

    __hash__ = None  # type: ignore[assignment]

    def digest(self) -> str:
        """Short stable hash of the summary vector h."""
        raw = np.ascontiguousarray(self.summary, dtype="<f8").tobytes()
        return hashlib.sha256(raw).hexdigest()[:16]


def initial_state(episode: VideoEpisode) -> ReasoningState:
    norm = float(np.linalg.norm(episode.query))
    if norm == 0.0 or not math.isfinite(norm):
        raise DomainError(f"episode {episode.episode_id} has a degenerate query vector")
    summary = episode.query / norm
    summary.setflags(write=False)
    return ReasoningState(summary=summary)


def legal_actions(
    state: ReasoningState, episode: VideoEpisode, limits: RolloutLimits = DEFAULT_LIMITS
) -> List[Action]:
    """Selections inside the frame window, plus answers once something was selected.

    At step K_max only answers remain; the result is never empty for a live state.
    """
    if state.terminated:
        raise StateError("no legal actions in a terminated state")
    actions: List[Action] = []
    if state.step < limits.max_steps:
        last = min(state.frame_cursor + limits.window, episode.num_frames - 1)
        for t in range(state.frame_cursor, last + 1):
            actions.extend(Select(t, m) for m in range(episode.objects_in_frame(t)))
    if state.step >= 1:
        actions.extend(Answer(c) for c in range(episode.num_classes))
    if not actions:
        raise StateError(f"state at step {state.step} of episode {episode.episode_id} has no legal action")
    return actions


def transition(state: ReasoningState, action: Action, episode: VideoEpisode, gamma: float) -> ReasoningState:
    """h' = gamma * h + (1 - gamma) * f for a selection; answers terminate."""
    if state.terminated:
        raise StateError("cannot transition out of a terminated state")
    if isinstance(action, Answer):
        if state.step < 1:
            raise StateError("an answer needs at least one object selection first")
        if not 0 <= action.c < episode.num_classes:
            raise DomainError(f"answer {action.c} outside [0, {episode.num_classes})")
        return ReasoningState(
            summary=state.summary,
            frame_cursor=state.frame_cursor,
            step=state.step,
            selected=state.selected,
            terminated=True,
            answer=action.c,
        )
    if not isinstance(action, Select):
        raise DomainError(f"unknown action {action!r}")
    if action.t < state.frame_cursor:
        raise MonotonicityError(f"selection at frame {action.t} precedes frame cursor {state.frame_cursor}")
    features = episode.features_of(action.t, action.m)
    summary = gamma * state.summary + (1.0 - gamma) * features
    summary.setflags(write=False)
    return ReasoningState(
        summary=summary,
        frame_cursor=action.t,
        step=state.step + 1,
        selected=state.selected + ((action.t, action.m),),
    )


@dataclass
class Trajectory:
    """A finished or partial path: states[i] is the state in which actions[i] was taken."""

    episode_id: int
    actions: Tuple[Action, ...]
    states: Tuple[ReasoningState, ...]
    final_state: ReasoningState
    step_log_probs: Tuple[float, ...] = ()
    evidence_rewards: Tuple[float, ...] = ()
    total_reward: Optional[float] = None

    @property
    def answer(self) -> Optional[int]:
        return self.final_state.answer

    @property
    def terminated(self) -> bool:
        return self.final_state.terminated

    @property
    def selections(self) -> Tuple[ObjectRef, ...]:
        return self.final_state.selected

    @property
    def num_selections(self) -> int:
        return self.final_state.step

    @property
    def log_prob(self) -> float:
        total = 0.0
        for value in self.step_log_probs:
            total += value
        return total

    def pairs(self) -> Iterator[Tuple[ReasoningState, Action]]:
        return zip(self.states, self.actions)


def replay(
    actions: Sequence[Action],
    episode: VideoEpisode,
    limits: RolloutLimits = DEFAULT_LIMITS,
    check_legal: bool = True,
) -> Trajectory:
    """Re-run a sequence of actions from the initial state."""
    state = initial_state(episode)
    states = []
    for action in actions:
        if check_legal and action not in legal_actions(state, episode, limits):
            raise DomainError(f"action {action} is not legal at step {state.step} of episode {episode.episode_id}")
        states.append(state)
        state = transition(state, action, episode, limits.gamma)
    return Trajectory(
        episode_id=episode.episode_id,
        actions=tuple(actions),
        states=tuple(states),
        final_state=state,
    )


def actions_of_state(state: ReasoningState) -> Tuple[Action, ...]:
    """The action history that produced a state."""
    actions: List[Action] = [Select(t, m) for t, m in state.selected]
    if state.terminated and state.answer is not None:
        actions.append(Answer(state.answer))
    return tuple(actions)


def action_label(action: Action) -> str:
    if isinstance(action, Select):
        return f"select({action.t},{action.m})"
    return f"answer({action.c})"


def action_to_dict(action: Action) -> Dict[str, int]:
    if isinstance(action, Select):
        return {"kind": "select", "t": action.t, "m": action.m}
    return {"kind": "answer", "c": action.c}


def action_from_dict(payload: Mapping[str, Any]) -> Action:
    kind = payload.get("kind")
    try:
        if kind == "select":
            return Select(int(payload["t"]), int(payload["m"]))
        if kind == "answer":
            return Answer(int(payload["c"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DomainError(f"malformed action {dict(payload)!r}") from exc
    raise DomainError(f"unknown action kind {kind!r}")
