"""Monte Carlo tree search over object-grounded reasoning states.

Selection uses the policy-guided upper confidence bound

    a* = argmax_a  Q(h, a) + lambda * P(a | h) * sqrt(sum_b N(h, b)) / (1 + N(h, a))

with Q = W / N and Q = 0 for unvisited edges. Leaves are valued by completing
the trajectory with the policy and scoring the finished path.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .env import RewardConfig, VideoEpisode, composite_reward, trajectory_reward
from .errors import ConfigurationError, StateError
from .policy import PolicyParams, action_distribution, complete_from
from .seeding import make_rng
from .state import (
    DEFAULT_LIMITS,
    Action,
    ReasoningState,
    RolloutLimits,
    Trajectory,
    action_key,
    action_label,
    actions_of_state,
    initial_state,
    replay,
    transition,
)

logger = logging.getLogger(__name__)

LEAF_POLICIES = ("greedy", "sample")

# Scores a finished (terminated) state.
LeafEvaluator = Callable[[ReasoningState], float]


@dataclass(frozen=True)
class SearchConfig:
    n_rollouts: int = 32
    exploration: float = 1.0
    top_k: int = 8
    leaf_policy: str = "greedy"
    prior_boost: float = 0.5

    def __post_init__(self) -> None:
        if self.n_rollouts < 1:
            raise ConfigurationError("search.n_rollouts must be >= 1")
        if self.exploration < 0 or not math.isfinite(self.exploration):
            raise ConfigurationError("search.exploration must be a finite value >= 0")
        if self.top_k < 1:
            raise ConfigurationError("search.top_k must be >= 1")
        if self.leaf_policy not in LEAF_POLICIES:
            raise ConfigurationError(f"search.leaf_policy must be one of {', '.join(LEAF_POLICIES)}")
        if not 0.0 <= self.prior_boost <= 1.0:
            raise ConfigurationError("search.prior_boost must lie in [0, 1]")


@dataclass
class Edge:
    prior: float
    visits: int = 0
    value_sum: float = 0.0
    child: Optional["SearchNode"] = None

    @property
    def q(self) -> float:
        return self.value_sum / self.visits if self.visits > 0 else 0.0


@dataclass(eq=False)
class SearchNode:
    state: ReasoningState
    edges: Dict[Action, Edge] = field(default_factory=dict)
    expanded: bool = False
    # Action of the speculated path at this node, if the node lies on it.
    boosted: Optional[Action] = None

    @property
    def is_terminal(self) -> bool:
        return self.state.terminated

    @property
    def total_visits(self) -> int:
        return sum(edge.visits for edge in self.edges.values())


@dataclass
class SearchTree:
    root: SearchNode
    episode_id: int
    rollouts: int = 0


def puct_select(node: SearchNode, exploration: float) -> Action:
    """Argmax of the PUCT score; ties go to the larger prior, then the smaller action key."""
    if node.is_terminal:
        raise StateError("cannot select an action in a terminal node")
    if not node.edges:
        raise StateError("cannot select an action in an unexpanded node")
    sqrt_total = math.sqrt(node.total_visits)
    best: Optional[Action] = None
    best_score = best_prior = 0.0
    for action, edge in node.edges.items():
        score = edge.q + exploration * edge.prior * sqrt_total / (1 + edge.visits)
        if (
            best is None
            or score > best_score
            or (score == best_score and edge.prior > best_prior)
            or (score == best_score and edge.prior == best_prior and action_key(action) < action_key(best))
        ):
            best, best_score, best_prior = action, score, edge.prior
    assert best is not None
    return best


def expand(
    node: SearchNode,
    policy: PolicyParams,
    episode: VideoEpisode,
    limits: RolloutLimits = DEFAULT_LIMITS,
    prior_boost: float = 0.0,
) -> None:
    """Create one edge per legal action with the policy prior.

    On the speculated path the boosted action's prior is mixed toward one:
    P' = (1 - eta) * P + eta * [a == boosted].
    """
    if node.is_terminal:
        raise StateError("cannot expand a terminal node")
    if node.expanded:
        raise StateError(f"node at step {node.state.step} is already expanded")
    priors = action_distribution(policy, node.state, episode, limits)
    boosted = node.boosted if node.boosted in priors else None
    for action, prior in priors.items():
        if boosted is not None and prior_boost > 0.0:
            prior = (1.0 - prior_boost) * prior + (prior_boost if action == boosted else 0.0)
        node.edges[action] = Edge(prior=prior)
    node.expanded = True


def oracle_evaluator(episode: VideoEpisode, cfg: RewardConfig) -> LeafEvaluator:
    def evaluate(final: ReasoningState) -> float:
        assert final.answer is not None
        return composite_reward(final.answer, final.selected, episode, cfg)

    return evaluate


def evaluate_leaf(
    state: ReasoningState,
    policy: PolicyParams,
    episode: VideoEpisode,
    cfg: RewardConfig,
    rng: Optional[np.random.Generator] = None,
    limits: RolloutLimits = DEFAULT_LIMITS,
    leaf_policy: str = "greedy",
    evaluator: Optional[LeafEvaluator] = None,
) -> float:
    """Reward of the leaf's path, completing it with the policy when it is still open."""
    if state.terminated:
        final = state
    else:
        completion = complete_from(policy, episode, state, limits, rng if leaf_policy == "sample" else None)
        final = completion.final_state
    if evaluator is None:
        evaluator = oracle_evaluator(episode, cfg)
    return float(evaluator(final))


def backup(path: Sequence[Tuple[SearchNode, Action]], value: float) -> None:
    for node, action in path:
        edge = node.edges[action]
        edge.visits += 1
        edge.value_sum += value


def search(
    episode: VideoEpisode,
    policy: PolicyParams,
    cfg: SearchConfig,
    reward_cfg: RewardConfig,
    seed: int,
    limits: RolloutLimits = DEFAULT_LIMITS,
    seed_actions: Optional[Sequence[Action]] = None,
    evaluator: Optional[LeafEvaluator] = None,
) -> SearchTree:
    """Run cfg.n_rollouts select / expand / evaluate / backup iterations from the root."""
    rng = make_rng(seed)
    speculated = tuple(seed_actions or ())
    boost = cfg.prior_boost if speculated else 0.0

    root = SearchNode(state=initial_state(episode), boosted=speculated[0] if speculated else None)
    expand(root, policy, episode, limits, boost)
    tree = SearchTree(root=root, episode_id=episode.episode_id)

    for _ in range(cfg.n_rollouts):
        node = root
        path: List[Tuple[SearchNode, Action]] = []
        while not node.is_terminal:
            action = puct_select(node, cfg.exploration)
            path.append((node, action))
            edge = node.edges[action]
            if edge.child is None:
                depth = len(path)
                on_path = node.boosted is not None and action == node.boosted and depth < len(speculated)
                child = SearchNode(
                    state=transition(node.state, action, episode, limits.gamma),
                    boosted=speculated[depth] if on_path else None,
                )
                if not child.is_terminal:
                    expand(child, policy, episode, limits, boost)
                edge.child = child
                node = child
                break
            node = edge.child
        value = evaluate_leaf(node.state, policy, episode, reward_cfg, rng, limits, cfg.leaf_policy, evaluator)
        backup(path, value)
        tree.rollouts += 1

    logger.debug("Searched episode %s with %s rollouts", episode.episode_id, tree.rollouts)
    return tree


def _terminal_paths(root: SearchNode) -> List[List[Tuple[Action, Edge]]]:
    paths: List[List[Tuple[Action, Edge]]] = []
    stack: List[Tuple[SearchNode, List[Tuple[Action, Edge]]]] = [(root, [])]
    while stack:
        node, prefix = stack.pop()
        for action, edge in node.edges.items():
            if edge.child is None:
                continue
            path = prefix + [(action, edge)]
            if edge.child.is_terminal:
                paths.append(path)
            else:
                stack.append((edge.child, path))
    return paths


def extract_top_trajectories(
    tree: SearchTree,
    k: int,
    episode: VideoEpisode,
    reward_cfg: Optional[RewardConfig] = None,
    limits: RolloutLimits = DEFAULT_LIMITS,
) -> List[Trajectory]:
    """Up to k root-to-terminal paths ranked by mean edge Q.

    Ties fall back to the root edge's visit count, then to the action keys.
    Rewards are recomputed when the episode carries its oracle.
    """
    ranked = []
    for path in _terminal_paths(tree.root):
        mean_q = math.fsum(edge.q for _, edge in path) / len(path)
        actions = tuple(action for action, _ in path)
        ranked.append((-mean_q, -path[0][1].visits, tuple(action_key(a) for a in actions), actions))
    ranked.sort()

    trajectories = []
    for _, _, _, actions in ranked[:k]:
        traj = replay(actions, episode, limits)
        if reward_cfg is not None and episode.has_oracle:
            trajectory_reward(traj, episode, reward_cfg)
        trajectories.append(traj)
    return trajectories


def _dump_node(node: SearchNode) -> Dict[str, Any]:
    return {
        "step": node.state.step,
        "frame_cursor": node.state.frame_cursor,
        "answer": node.state.answer,
        "digest": node.state.digest(),
        "edges": [
            {
                "action": action_label(action),
                "N": edge.visits,
                "W": edge.value_sum,
                "P": edge.prior,
                "Q": edge.q,
                "child": _dump_node(edge.child) if edge.child is not None else None,
            }
            for action, edge in sorted(node.edges.items(), key=lambda item: action_key(item[0]))
        ],
    }


def dump_tree(tree: SearchTree) -> Dict[str, Any]:
    """Nested per-edge N, W, P, Q of a searched tree."""
    return {"episode_id": tree.episode_id, "rollouts": tree.rollouts, "root": _dump_node(tree.root)}


def best_path(tree: SearchTree) -> Tuple[Action, ...]:
    """Most-visited path from the root down to a terminal node."""
    node = tree.root
    actions: List[Action] = []
    while not node.is_terminal:
        visited = [(action, edge) for action, edge in node.edges.items() if edge.child is not None]
        if not visited:
            break
        action, edge = max(visited, key=lambda item: (item[1].visits, item[1].prior, tuple(-x for x in action_key(item[0]))))
        actions.append(action)
        assert edge.child is not None
        node = edge.child
    return actions_of_state(node.state) if node.is_terminal else tuple(actions)
