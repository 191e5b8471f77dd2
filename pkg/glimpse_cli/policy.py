"""Featurised softmax policy over legal actions.

pi(a | h) = softmax_a( s(psi(h, a)) / tau )

with s linear in psi (default) or a single tanh hidden layer. Every action
is described by one row psi of P = 3D + C + 6 numbers:

    [0, D)            h                       shared
    [D, 2D)           f                       selections
    [2D, 3D)          h * f (elementwise)     selections
    3D                dot(h, f)               selections
    3D+1              (t - t_cur) / T         selections
    3D+2              1 if (t, m) was already selected
    [3D+3, 3D+3+C)    one_hot(c)              answers
    3D+3+C            cos(Phi - 2*pi*c / C)   answers, Phi = summed label phase of the selections
    3D+4+C            k (selections so far)   answers
    3D+5+C            1                       shared bias

Entries a row does not use stay zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .env import VideoEpisode, evidence_hits, label_phase
from .errors import ConfigurationError, DomainError, StateError
from .seeding import make_rng
from .state import (
    DEFAULT_LIMITS,
    Action,
    Answer,
    ReasoningState,
    RolloutLimits,
    Select,
    Trajectory,
    initial_state,
    legal_actions,
    replay,
    transition,
)

CHECKPOINT_FORMAT = "glimpse-policy"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FeatureLayout:
    feature_dim: int
    num_classes: int

    @property
    def size(self) -> int:
        return 3 * self.feature_dim + self.num_classes + 6

    @property
    def select_offset(self) -> int:
        return self.feature_dim

    @property
    def answer_offset(self) -> int:
        return 3 * self.feature_dim + 3

    @property
    def phase_index(self) -> int:
        return self.answer_offset + self.num_classes

    @property
    def step_index(self) -> int:
        return self.phase_index + 1

    @property
    def bias_index(self) -> int:
        return self.size - 1

    def blocks(self) -> Dict[str, List[int]]:
        D, C = self.feature_dim, self.num_classes
        return {
            "summary": [0, D],
            "object": [D, 2 * D],
            "interaction": [2 * D, 3 * D],
            "dot": [3 * D, 3 * D + 1],
            "frame_offset": [3 * D + 1, 3 * D + 2],
            "revisit": [3 * D + 2, 3 * D + 3],
            "answer_one_hot": [3 * D + 3, 3 * D + 3 + C],
            "phase_agreement": [3 * D + 3 + C, 3 * D + 4 + C],
            "step": [3 * D + 4 + C, 3 * D + 5 + C],
            "bias": [3 * D + 5 + C, 3 * D + 6 + C],
        }


def layout_for(episode: VideoEpisode) -> FeatureLayout:
    return FeatureLayout(feature_dim=episode.feature_dim, num_classes=episode.num_classes)


def parameter_count(layout: FeatureLayout, hidden_units: int = 0) -> int:
    if hidden_units == 0:
        return layout.size
    return hidden_units * layout.size + 2 * hidden_units


@dataclass(frozen=True, eq=False)
class PolicyParams:
    weights: np.ndarray
    layout: FeatureLayout
    temperature: float = 1.0
    hidden_units: int = 0

    def __post_init__(self) -> None:
        if self.temperature <= 0 or not math.isfinite(self.temperature):
            raise ConfigurationError(f"policy temperature must be > 0, got {self.temperature}")
        if self.hidden_units < 0:
            raise ConfigurationError("policy.hidden_units must be >= 0")
        expected = parameter_count(self.layout, self.hidden_units)
        if self.weights.shape != (expected,):
            raise ConfigurationError(f"policy expects {expected} weights, got shape {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ConfigurationError("policy weights must be finite")

    def copy(self) -> "PolicyParams":
        return replace(self, weights=np.array(self.weights, dtype=float, copy=True))

    def with_weights(self, weights: np.ndarray) -> "PolicyParams":
        return replace(self, weights=np.asarray(weights, dtype=float))

    def with_temperature(self, temperature: float) -> "PolicyParams":
        return replace(self, temperature=float(temperature))


def init_params(
    layout: FeatureLayout,
    hidden_units: int = 0,
    temperature: float = 1.0,
    seed: int = 0,
    scale: float = 0.1,
) -> PolicyParams:
    """Zero weights for the linear policy; small random weights for the hidden layer."""
    if hidden_units == 0:
        weights = np.zeros(layout.size)
    else:
        rng = make_rng(seed)
        P, H = layout.size, hidden_units
        w = rng.normal(scale=scale / math.sqrt(P), size=H * P)
        v = rng.normal(scale=scale, size=H)
        weights = np.concatenate([w, np.zeros(H), v])
    return PolicyParams(weights=weights, layout=layout, temperature=temperature, hidden_units=hidden_units)


def _selection_phase(state: ReasoningState, episode: VideoEpisode) -> float:
    total = 0.0
    for t, m in state.selected:
        total += label_phase(episode.features_of(t, m))
    return total


def feature_matrix(state: ReasoningState, actions: Sequence[Action], episode: VideoEpisode) -> np.ndarray:
    layout = layout_for(episode)
    D, C = layout.feature_dim, layout.num_classes
    h = state.summary
    rows = np.zeros((len(actions), layout.size))
    rows[:, :D] = h
    rows[:, layout.bias_index] = 1.0

    select_rows = [i for i, a in enumerate(actions) if isinstance(a, Select)]
    if select_rows:
        refs = [(actions[i].t, actions[i].m) for i in select_rows]  # type: ignore[union-attr]
        for t, _ in refs:
            if t < state.frame_cursor:
                raise DomainError(f"selection at frame {t} precedes frame cursor {state.frame_cursor}")
        F = np.array([episode.features_of(t, m) for t, m in refs])
        chosen = set(state.selected)
        rows[select_rows, D : 2 * D] = F
        rows[select_rows, 2 * D : 3 * D] = F * h
        rows[select_rows, 3 * D] = F @ h
        rows[select_rows, 3 * D + 1] = [(t - state.frame_cursor) / episode.num_frames for t, _ in refs]
        rows[select_rows, 3 * D + 2] = [1.0 if ref in chosen else 0.0 for ref in refs]

    answer_rows = [i for i, a in enumerate(actions) if isinstance(a, Answer)]
    if answer_rows:
        phase = _selection_phase(state, episode)
        for i in answer_rows:
            c = actions[i].c  # type: ignore[union-attr]
            if not 0 <= c < C:
                raise DomainError(f"answer {c} outside [0, {C})")
            rows[i, layout.answer_offset + c] = 1.0
            rows[i, layout.phase_index] = math.cos(phase - 2.0 * math.pi * c / C)
            rows[i, layout.step_index] = float(state.step)

    if len(select_rows) + len(answer_rows) != len(actions):
        raise DomainError("unknown action variant")
    return rows


def action_features(state: ReasoningState, action: Action, episode: VideoEpisode) -> np.ndarray:
    """psi(h, a) for a single action."""
    if state.terminated:
        raise StateError("terminated states have no action features")
    return feature_matrix(state, [action], episode)[0]


@dataclass(frozen=True, eq=False)
class DecisionPoint:
    """The legal actions of one state with their feature rows; independent of the weights."""

    state: ReasoningState
    actions: Tuple[Action, ...]
    features: np.ndarray

    def index(self, action: Action) -> int:
        try:
            return self.actions.index(action)
        except ValueError as exc:
            raise DomainError(f"action {action} is not legal at step {self.state.step}") from exc


def decision_point(state: ReasoningState, episode: VideoEpisode, limits: RolloutLimits = DEFAULT_LIMITS) -> DecisionPoint:
    actions = tuple(legal_actions(state, episode, limits))
    return DecisionPoint(state=state, actions=actions, features=feature_matrix(state, actions, episode))


def _scores(params: PolicyParams, features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Action scores and their Jacobian with respect to the flat weight vector."""
    if params.hidden_units == 0:
        return features @ params.weights, features
    H, P = params.hidden_units, params.layout.size
    W = params.weights[: H * P].reshape(H, P)
    b = params.weights[H * P : H * P + H]
    v = params.weights[H * P + H :]
    z = np.tanh(features @ W.T + b)
    scores = z @ v
    dz = (1.0 - z * z) * v
    jac_w = (dz[:, :, None] * features[:, None, :]).reshape(features.shape[0], H * P)
    return scores, np.concatenate([jac_w, dz, z], axis=1)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    top = float(np.max(logits))
    shifted = logits - top
    return shifted - math.log(float(np.sum(np.exp(shifted))))


def point_log_probs(params: PolicyParams, point: DecisionPoint) -> np.ndarray:
    scores, _ = _scores(params, point.features)
    return _log_softmax(scores / params.temperature)


def point_log_prob_and_grad(params: PolicyParams, point: DecisionPoint, index: int) -> Tuple[float, np.ndarray]:
    """log pi(a_index) and its exact score-function gradient."""
    scores, jac = _scores(params, point.features)
    logp = _log_softmax(scores / params.temperature)
    probs = np.exp(logp)
    grad = (jac[index] - probs @ jac) / params.temperature
    return float(logp[index]), grad


def point_expected_jacobian(params: PolicyParams, point: DecisionPoint, probs: np.ndarray) -> np.ndarray:
    """sum_a probs(a) * d s(a) / d theta, evaluated at `params`."""
    _, jac = _scores(params, point.features)
    return probs @ jac


def action_distribution(
    params: PolicyParams, state: ReasoningState, episode: VideoEpisode, limits: RolloutLimits = DEFAULT_LIMITS
) -> Dict[Action, float]:
    point = decision_point(state, episode, limits)
    probs = np.exp(point_log_probs(params, point))
    return {action: float(p) for action, p in zip(point.actions, probs)}


def log_prob_and_grad(
    params: PolicyParams,
    state: ReasoningState,
    action: Action,
    episode: VideoEpisode,
    limits: RolloutLimits = DEFAULT_LIMITS,
) -> Tuple[float, np.ndarray]:
    point = decision_point(state, episode, limits)
    return point_log_prob_and_grad(params, point, point.index(action))


def trajectory_points(traj: Trajectory, episode: VideoEpisode, limits: RolloutLimits = DEFAULT_LIMITS) -> List[Tuple[DecisionPoint, int]]:
    """Decision points along a trajectory, re-derived by legal replay."""
    if traj.num_selections < 1:
        raise StateError(f"trajectory for episode {traj.episode_id} selects no object")
    replayed = replay(traj.actions, episode, limits)
    points = []
    for state, action in replayed.pairs():
        point = decision_point(state, episode, limits)
        points.append((point, point.index(action)))
    return points


def trajectory_log_prob(
    params: PolicyParams, traj: Trajectory, episode: VideoEpisode, limits: RolloutLimits = DEFAULT_LIMITS
) -> float:
    """Sum of per-step log-probabilities, the terminal answer included."""
    total = 0.0
    for point, index in trajectory_points(traj, episode, limits):
        total += float(point_log_probs(params, point)[index])
    return total


def greedy_action(
    params: PolicyParams, state: ReasoningState, episode: VideoEpisode, limits: RolloutLimits = DEFAULT_LIMITS
) -> Action:
    point = decision_point(state, episode, limits)
    # argmax returns the first maximum, i.e. ties go to the earliest legal action
    return point.actions[int(np.argmax(point_log_probs(params, point)))]


def complete_from(
    params: PolicyParams,
    episode: VideoEpisode,
    start: ReasoningState,
    limits: RolloutLimits = DEFAULT_LIMITS,
    rng: Optional[np.random.Generator] = None,
) -> Trajectory:
    """Roll the policy forward from `start` until it answers; greedy when `rng` is None.

    The returned trajectory holds only the steps taken from `start`, while its
    final state carries the full selection history.
    """
    state = start
    actions: List[Action] = []
    states: List[ReasoningState] = []
    log_probs: List[float] = []
    while not state.terminated:
        point = decision_point(state, episode, limits)
        logp = point_log_probs(params, point)
        if rng is None:
            index = int(np.argmax(logp))
        else:
            cdf = np.cumsum(np.exp(logp))
            index = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(cdf) - 1)
        actions.append(point.actions[index])
        states.append(state)
        log_probs.append(float(logp[index]))
        state = transition(state, point.actions[index], episode, limits.gamma)
    traj = Trajectory(
        episode_id=episode.episode_id,
        actions=tuple(actions),
        states=tuple(states),
        final_state=state,
        step_log_probs=tuple(log_probs),
    )
    if episode.has_oracle:
        traj.evidence_rewards = tuple(evidence_hits(traj.selections, episode))
    return traj


def sample_trajectory(
    params: PolicyParams, episode: VideoEpisode, seed: int, limits: RolloutLimits = DEFAULT_LIMITS
) -> Trajectory:
    """Ancestral sampling until an answer; deterministic for a fixed seed."""
    return complete_from(params, episode, initial_state(episode), limits, make_rng(seed))


def greedy_trajectory(
    params: PolicyParams,
    episode: VideoEpisode,
    limits: RolloutLimits = DEFAULT_LIMITS,
    start: Optional[ReasoningState] = None,
) -> Trajectory:
    """Greedy completion from `start` (the initial state by default)."""
    return complete_from(params, episode, start if start is not None else initial_state(episode), limits)


def save_params(path: Path, params: PolicyParams) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layout": {
            "feature_dim": params.layout.feature_dim,
            "num_classes": params.layout.num_classes,
            "size": params.layout.size,
            "blocks": params.layout.blocks(),
        },
        "hidden_units": params.hidden_units,
        "temperature": params.temperature,
        "weights": [float(w) for w in params.weights],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")


def load_params(path: Path, expected: Optional[FeatureLayout] = None) -> PolicyParams:
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"Failed to read policy checkpoint {path}: {exc}") from exc

    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path} is not a version {CHECKPOINT_VERSION} policy checkpoint")
    layout_info = payload["layout"]
    layout = FeatureLayout(feature_dim=int(layout_info["feature_dim"]), num_classes=int(layout_info["num_classes"]))
    if int(layout_info["size"]) != layout.size:
        raise ConfigurationError(f"{path}: feature size {layout_info['size']} does not match layout size {layout.size}")
    if expected is not None and layout != expected:
        raise ConfigurationError(
            f"{path}: checkpoint layout D={layout.feature_dim}, C={layout.num_classes} does not match "
            f"configured D={expected.feature_dim}, C={expected.num_classes}"
        )
    return PolicyParams(
        weights=np.array(payload["weights"], dtype=float),
        layout=layout,
        temperature=float(payload["temperature"]),
        hidden_units=int(payload["hidden_units"]),
    )
