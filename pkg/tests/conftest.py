import math
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from glimpse_cli.config import parse_config  # noqa: E402
from glimpse_cli.env import EnvConfig, ObjectInstance, VideoEpisode, gen_episode  # noqa: E402
from glimpse_cli.state import RolloutLimits  # noqa: E402


def build_episode(labels, chain, num_classes=2, episode_id=0):
    """Hand-made episode: chain objects are quiet and on-query, the rest loud and off-query."""
    chain = [tuple(ref) for ref in chain]
    frames = []
    for t, frame_labels in enumerate(labels):
        row = []
        for m, label in enumerate(frame_labels):
            on_chain = (t, m) in chain
            saliency = 0.1 if on_chain else 0.8
            angle = 2.0 * math.pi * label / num_classes
            features = np.array([saliency, 0.5 * math.cos(angle), 0.5 * math.sin(angle), 0.9 if on_chain else 0.0])
            row.append(
                ObjectInstance(
                    frame_index=t,
                    object_index=m,
                    features=features,
                    is_evidence=on_chain,
                    evidence_rank=chain.index((t, m)) if on_chain else None,
                    hidden_label=label,
                    saliency=saliency,
                )
            )
        frames.append(tuple(row))
    answer = sum(labels[t][m] for t, m in chain) % num_classes
    return VideoEpisode(
        episode_id=episode_id,
        num_frames=len(labels),
        num_classes=num_classes,
        objects=tuple(frames),
        query=np.array([0.0, 0.0, 0.0, 1.0]),
        generator_seed=0,
        evidence_chain=tuple(chain),
        answer_truth=answer,
    )


@pytest.fixture
def make_episode():
    return build_episode


@pytest.fixture
def degenerate_episode():
    # one frame, one object, two classes; the truth is 0
    return build_episode([[0]], chain=[(0, 0)])


@pytest.fixture
def hand_episode():
    # chain (0,0) label 1 and (1,1) label 0, so the truth is 1
    return build_episode([[1, 0], [1, 0], [0, 1]], chain=[(0, 0), (1, 1)])


@pytest.fixture
def small_env():
    return EnvConfig(
        num_frames=3,
        min_objects=1,
        max_objects=2,
        feature_dim=5,
        chain_length=2,
        num_distractors=1,
        num_classes=2,
        max_frame_gap=1,
    )


@pytest.fixture
def small_limits():
    return RolloutLimits(max_steps=3, window=1, gamma=0.5)


@pytest.fixture
def small_episodes(small_env):
    return [gen_episode(100 + i, small_env, episode_id=i) for i in range(8)]


TINY_CONFIG = {
    "seed": 3,
    "env": {
        "num_frames": 3,
        "min_objects": 1,
        "max_objects": 2,
        "feature_dim": 5,
        "chain_length": 2,
        "num_distractors": 1,
        "num_classes": 2,
        "max_frame_gap": 1,
    },
    "corpus": {"train_episodes": 6, "eval_episodes": 6},
    "limits": {"max_steps": 3, "window": 1, "gamma": 0.5},
    "search": {"n_rollouts": 24, "top_k": 4},
    "sft": {"epochs": 3, "batch_size": 4},
    "grpo": {"group_size": 4, "steps": 3},
    "mtdp": {"fraction": 0.5},
    "inference": {"n_samples": 2},
}


@pytest.fixture
def tiny_payload():
    return {key: dict(value) if isinstance(value, dict) else value for key, value in TINY_CONFIG.items()}


@pytest.fixture
def tiny_config(tiny_payload):
    return parse_config(tiny_payload)


@pytest.fixture
def runtime_env(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("GLIMPSE_DB_URL", f"sqlite:///{tmp_path / 'runs.db'}")
    monkeypatch.setenv("GLIMPSE_OUTPUT_DIR", str(tmp_path / "runs"))
    monkeypatch.setenv("GLIMPSE_LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setenv("GLIMPSE_LOG_LEVEL", "WARNING")
    monkeypatch.delenv("GLIMPSE_WORKERS", raising=False)
    return tmp_path
