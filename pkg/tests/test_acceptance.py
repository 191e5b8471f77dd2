from typing import Dict, Tuple

import numpy as np
import pytest

from glimpse_cli.config import parse_config
from glimpse_cli.runner import (
    generate_corpus,
    public_view,
    run_eval,
    run_experiment,
    run_search,
    run_sft,
    run_sweep,
    summarise_sweep,
)

ACCEPTANCE_CONFIG = {
    "env": {
        "num_frames": 4,
        "min_objects": 2,
        "max_objects": 3,
        "feature_dim": 6,
        "chain_length": 2,
        "num_distractors": 2,
        "num_classes": 2,
        "max_frame_gap": 1,
    },
    "corpus": {"train_episodes": 48, "eval_episodes": 200},
    "limits": {"max_steps": 4, "window": 1, "gamma": 0.5},
    "search": {"n_rollouts": 64, "top_k": 4},
    "sft": {"learning_rate": 0.1, "epochs": 30, "batch_size": 8},
    "grpo": {"group_size": 8, "steps": 200},
    "mtdp": {"fraction": 0.5},
    "inference": {"n_samples": 4},
}
# with four classes a blind answer is rarely right
ALPHA_CONFIG = {**ACCEPTANCE_CONFIG, "env": {**ACCEPTANCE_CONFIG["env"], "num_classes": 4}}
SEEDS = tuple(range(8))


@pytest.fixture(scope="module")
def stage_reports() -> Dict[str, Dict[str, float]]:
    """Seed-averaged eval metrics of the untrained, distilled and refined policies."""
    collected: Dict[str, list] = {"baseline": [], "sft": [], "sft-grpo": []}
    for seed in SEEDS:
        config = parse_config({**ACCEPTANCE_CONFIG, "seed": seed})
        refined = run_experiment(config, "sft-grpo")
        assert refined.sft is not None
        collected["sft-grpo"].append(refined.report.metrics)
        collected["sft"].append(run_eval(config, refined.sft.policy, generate_corpus(config).eval).metrics)
        collected["baseline"].append(run_experiment(config, "baseline").report.metrics)
    return {
        name: {metric: float(np.mean([row[metric] for row in rows])) for metric in rows[0]}
        for name, rows in collected.items()
    }


def _sweep_accuracy(payload, parameter: str, values) -> Tuple[float, ...]:
    config = parse_config(payload)
    summary = summarise_sweep(run_sweep(config, parameter, values, SEEDS))
    return tuple(item["accuracy_mean"] for item in summary)


@pytest.mark.slow
def test_distilled_policy_beats_the_untrained_one(stage_reports):
    assert stage_reports["sft"]["accuracy"] > stage_reports["baseline"]["accuracy"]


@pytest.mark.slow
def test_distilled_policy_finds_more_evidence(stage_reports):
    baseline = stage_reports["baseline"]["mean_evidence_hit_rate"]
    assert stage_reports["sft"]["mean_evidence_hit_rate"] > baseline


@pytest.mark.slow
def test_rl_stage_improves_on_distillation(stage_reports):
    distilled, refined = stage_reports["sft"], stage_reports["sft-grpo"]
    assert refined["accuracy"] > distilled["accuracy"]
    assert refined["mean_reward"] > distilled["mean_reward"]


@pytest.mark.slow
def test_balanced_reward_is_the_best_alpha():
    no_evidence, balanced, evidence_heavy = _sweep_accuracy(ALPHA_CONFIG, "alpha", [0.0, 0.5, 1.0])
    assert balanced >= no_evidence
    assert balanced >= evidence_heavy


@pytest.mark.slow
def test_larger_rl_pool_does_not_hurt():
    small, large = _sweep_accuracy(ACCEPTANCE_CONFIG, "rl_fraction", [0.05, 0.15])
    assert large >= small


@pytest.mark.slow
def test_default_sft_fits_the_searched_actions():
    config = parse_config({"corpus": {"train_episodes": 100, "eval_episodes": 1}})
    train = generate_corpus(config).train
    dataset = run_search(config, train)
    result = run_sft(config, public_view(train), dataset.pairs)
    assert result.history[-1]["agreement"] >= 0.9
    assert result.history[-1]["loss"] < result.history[0]["loss"]
