"""Experiment stages: corpus generation, search, SFT, GRPO and evaluation.

Each stage has an in-memory form, used by sweeps, and a file form that
reads the previous stage's artifacts from the output directory. Both run
the same code, so a sweep row reproduces the matching staged run.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import ExperimentConfig, config_hash, emit_config, override
from .env import Scorer, VideoEpisode, episode_from_dict, episode_to_dict, gen_episode, strip_oracle
from .errors import DependencyError, UsageError
from .infer import EvaluationReport, evaluate_policy
from .pipeline import (
    DatasetSplit,
    SftDataset,
    StatePair,
    TrajectoryRecord,
    build_mtdp_split,
    build_sft_dataset,
    pair_from_dict,
    pair_to_dict,
    record_from_dict,
    record_to_dict,
)
from .policy import FeatureLayout, PolicyParams, init_params, load_params, save_params
from .report import render_report
from .seeding import derive_seed
from .storage import file_header, read_jsonl, write_csv, write_json, write_jsonl
from .train import GrpoResult, SftResult, as_episode_map, train_grpo, train_sft

logger = logging.getLogger(__name__)

EVAL_ID_OFFSET = 2**32

STAGES = ("gen-data", "search", "sft", "grpo", "eval")
STAGE_OUTPUTS: Dict[str, Tuple[str, ...]] = {
    "gen-data": ("train_episodes.jsonl", "eval_episodes.jsonl", "manifest.json"),
    "search": ("sft_records.jsonl", "sft_pairs.jsonl", "metrics_search.csv"),
    "sft": ("policy_sft.json", "metrics_sft.csv"),
    "grpo": ("split_manifest.json", "policy_grpo.json", "metrics_grpo.csv"),
    "eval": ("eval_report.json", "eval_report.md", "eval_rows.csv", "metrics_eval.csv"),
}
PREDECESSOR = {"search": "gen-data", "sft": "search", "grpo": "sft", "eval": "sft"}

COMPONENTS = ("baseline", "naive-rl", "sft", "sft-grpo")
SWEEP_PARAMETERS = {
    "alpha": "reward.alpha",
    "rollouts": "search.n_rollouts",
    "rl_fraction": "mtdp.fraction",
    "components": None,
}
EVAL_POLICIES = ("latest", "init", "sft", "grpo")

SweepValue = Union[int, float, str]


@dataclass
class Corpus:
    train: List[VideoEpisode]
    eval: List[VideoEpisode]


@dataclass
class StageOutcome:
    stage: str
    metrics: Dict[str, float]
    artifacts: List[Path] = field(default_factory=list)


@dataclass
class ExperimentResult:
    component: str
    report: EvaluationReport
    sft: Optional[SftResult] = None
    grpo: Optional[GrpoResult] = None


def generate_corpus(config: ExperimentConfig) -> Corpus:
    """Train episode i has id i; eval episode i has id 2**32 + i."""
    train = [
        gen_episode(derive_seed(config.seed, "train", i), config.env, episode_id=i)
        for i in range(config.corpus.train_episodes)
    ]
    evals = [
        gen_episode(derive_seed(config.seed, "eval", i), config.env, episode_id=EVAL_ID_OFFSET + i)
        for i in range(config.corpus.eval_episodes)
    ]
    return Corpus(train=train, eval=evals)


def public_view(episodes: Sequence[VideoEpisode]) -> List[VideoEpisode]:
    return [strip_oracle(episode) for episode in episodes]


def config_layout(config: ExperimentConfig) -> FeatureLayout:
    return FeatureLayout(feature_dim=config.env.feature_dim, num_classes=config.env.num_classes)


def initial_policy(config: ExperimentConfig) -> PolicyParams:
    return init_params(
        config_layout(config),
        hidden_units=config.policy.hidden_units,
        temperature=config.policy.temperature,
        seed=derive_seed(config.seed, "init"),
        scale=config.policy.init_scale,
    )


def run_search(config: ExperimentConfig, train: Sequence[VideoEpisode], workers: int = 1) -> SftDataset:
    scorer = Scorer(train, config.reward)
    return build_sft_dataset(
        public_view(train),
        initial_policy(config),
        scorer,
        config.search,
        derive_seed(config.seed, "search"),
        config.limits,
        k_max=config.limits.max_steps,
        verify_coverage=config.data.verify_coverage,
        speculate=config.data.speculate,
        workers=workers,
        keep_trees=config.data.dump_trees,
    )


def run_sft(config: ExperimentConfig, train_public: Sequence[VideoEpisode], pairs: Sequence[StatePair]) -> SftResult:
    if not pairs:
        raise UsageError("The search stage produced no state-action pairs; raise search.n_rollouts or the corpus size")
    return train_sft(
        initial_policy(config),
        pairs,
        as_episode_map(train_public),
        config.sft,
        derive_seed(config.seed, "sft"),
        config.limits,
    )


def run_grpo(
    config: ExperimentConfig,
    start: PolicyParams,
    reference: PolicyParams,
    train: Sequence[VideoEpisode],
    records: Sequence[TrajectoryRecord],
) -> Tuple[DatasetSplit, GrpoResult]:
    """Pick the episodes `start` fails on and optimise on them; rewards come from the scorer only."""
    scorer = Scorer(train, config.reward)
    public = public_view(train)
    split = build_mtdp_split(
        public, start, config.mtdp.fraction, records, scorer, derive_seed(config.seed, "mtdp"), config.limits
    )
    result = train_grpo(
        start,
        reference,
        split.mtdp_episode_ids,
        as_episode_map(public),
        scorer,
        config.grpo,
        derive_seed(config.seed, "grpo"),
        config.limits,
    )
    return split, result


def run_eval(config: ExperimentConfig, policy: PolicyParams, episodes: Sequence[VideoEpisode]) -> EvaluationReport:
    scorer = Scorer(episodes, config.reward)
    return evaluate_policy(
        policy, public_view(episodes), scorer, derive_seed(config.seed, "eval"), config.inference, config.limits
    )


def run_experiment(config: ExperimentConfig, component: str = "sft-grpo", workers: int = 1) -> ExperimentResult:
    """Whole pipeline in memory, truncated to the requested component set."""
    if component not in COMPONENTS:
        raise UsageError(f"component must be one of {', '.join(COMPONENTS)}, got {component!r}")
    corpus = generate_corpus(config)
    result_sft: Optional[SftResult] = None
    result_grpo: Optional[GrpoResult] = None

    if component == "baseline":
        policy = initial_policy(config)
    elif component == "naive-rl":
        answer_only = override(config, "reward.alpha", 0.0)
        start = initial_policy(answer_only)
        _, result_grpo = run_grpo(answer_only, start, start.copy(), corpus.train, [])
        policy = result_grpo.policy
    else:
        dataset = run_search(config, corpus.train, workers)
        result_sft = run_sft(config, public_view(corpus.train), dataset.pairs)
        policy = result_sft.policy
        if component == "sft-grpo":
            _, result_grpo = run_grpo(config, result_sft.policy, result_sft.reference, corpus.train, dataset.records)
            policy = result_grpo.policy

    report = run_eval(config, policy, corpus.eval)
    return ExperimentResult(component=component, report=report, sft=result_sft, grpo=result_grpo)


def parse_sweep_value(parameter: str, raw: str) -> SweepValue:
    if parameter not in SWEEP_PARAMETERS:
        raise UsageError(f"sweep parameter must be one of {', '.join(SWEEP_PARAMETERS)}, got {parameter!r}")
    try:
        if parameter == "rollouts":
            return int(raw)
        if parameter in ("alpha", "rl_fraction"):
            return float(raw)
    except ValueError as exc:
        raise UsageError(f"invalid {parameter} value {raw!r}") from exc
    if raw not in COMPONENTS:
        raise UsageError(f"component must be one of {', '.join(COMPONENTS)}, got {raw!r}")
    return raw


def run_sweep(
    config: ExperimentConfig,
    parameter: str,
    values: Sequence[SweepValue],
    seeds: Sequence[int],
    workers: int = 1,
) -> List[Dict[str, Any]]:
    """One row (value, seed, accuracy, mean reward, ...) per pipeline run."""
    if parameter not in SWEEP_PARAMETERS:
        raise UsageError(f"sweep parameter must be one of {', '.join(SWEEP_PARAMETERS)}, got {parameter!r}")
    if len(values) < 2:
        raise UsageError("a sweep needs at least 2 values")
    if len(seeds) < 3:
        raise UsageError("a sweep needs at least 3 seeds")

    dotted = SWEEP_PARAMETERS[parameter]
    rows = []
    for value in values:
        for seed in seeds:
            cfg = override(config, "seed", int(seed))
            if dotted is not None:
                cfg = override(cfg, dotted, value)
            component = str(value) if dotted is None else "sft-grpo"
            logger.info("Sweep %s=%s seed=%s", parameter, value, seed)
            metrics = run_experiment(cfg, component, workers).report.metrics
            rows.append(
                {
                    "parameter": parameter,
                    "value": value,
                    "seed": int(seed),
                    "accuracy": metrics["accuracy"],
                    "mean_reward": metrics["mean_reward"],
                    "mean_evidence_hit_rate": metrics["mean_evidence_hit_rate"],
                    "mean_length": metrics["mean_length"],
                }
            )
    return rows


def summarise_sweep(rows: Sequence[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """Mean and population std of accuracy and reward per swept value, in first-seen order."""
    order: List[SweepValue] = []
    grouped: Dict[SweepValue, List[Dict[str, Any]]] = {}
    for row in rows:
        if row["value"] not in grouped:
            order.append(row["value"])
            grouped[row["value"]] = []
        grouped[row["value"]].append(row)
    summary = []
    for value in order:
        accuracy = np.array([row["accuracy"] for row in grouped[value]])
        reward = np.array([row["mean_reward"] for row in grouped[value]])
        summary.append(
            {
                "value": value,
                "seeds": len(accuracy),
                "accuracy_mean": float(accuracy.mean()),
                "accuracy_std": float(accuracy.std()),
                "reward_mean": float(reward.mean()),
                "reward_std": float(reward.std()),
            }
        )
    return summary


SWEEP_COLUMNS = ("parameter", "value", "seed", "accuracy", "mean_reward", "mean_evidence_hit_rate", "mean_length")


def require_stage(out_dir: Path, stage: str) -> None:
    """A predecessor with no outputs is an ordering error; a partial one is a missing dependency."""
    if stage not in STAGES:
        raise UsageError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    predecessor = PREDECESSOR.get(stage)
    if predecessor is None:
        return
    names = STAGE_OUTPUTS[predecessor]
    if not any((out_dir / name).exists() for name in names):
        raise UsageError(f"Stage '{stage}' needs stage '{predecessor}' to run first in {out_dir}")
    for name in names:
        if not (out_dir / name).exists():
            raise DependencyError(f"Missing required file: {out_dir / name}", missing=str(out_dir / name))


def _check_header(header: Dict[str, Any], config: ExperimentConfig, path: Path) -> None:
    if header.get("config_hash") != config_hash(config):
        logger.warning("%s was produced with a different config (hash %s)", path, header.get("config_hash"))


def _load_episodes(path: Path, config: ExperimentConfig, strip: bool) -> List[VideoEpisode]:
    header, rows = read_jsonl(path)
    _check_header(header, config, path)
    return [episode_from_dict(row, strip=strip) for row in rows]


def _header(stage: str, config: ExperimentConfig) -> Dict[str, Any]:
    return file_header(stage, config.seed, config_hash(config))


def stage_gen(config: ExperimentConfig, out_dir: Path, workers: int = 1) -> StageOutcome:
    corpus = generate_corpus(config)
    header = _header("gen-data", config)
    train_path = out_dir / "train_episodes.jsonl"
    eval_path = out_dir / "eval_episodes.jsonl"
    n_train = write_jsonl(train_path, header, (episode_to_dict(ep) for ep in corpus.train))
    n_eval = write_jsonl(eval_path, header, (episode_to_dict(ep) for ep in corpus.eval))
    manifest = write_json(
        out_dir / "manifest.json",
        {
            "header": header,
            "config": emit_config(config),
            "train_episodes": n_train,
            "eval_episodes": n_eval,
            "files": {"train": train_path.name, "eval": eval_path.name},
        },
    )
    objects = [ep.total_objects for ep in corpus.train + corpus.eval]
    metrics = {
        "train_episodes": float(n_train),
        "eval_episodes": float(n_eval),
        "mean_objects": math.fsum(objects) / len(objects),
    }
    return StageOutcome("gen-data", metrics, [train_path, eval_path, manifest])


def stage_search(config: ExperimentConfig, out_dir: Path, workers: int = 1) -> StageOutcome:
    require_stage(out_dir, "search")
    train = _load_episodes(out_dir / "train_episodes.jsonl", config, strip=False)
    dataset = run_search(config, train, workers)
    header = _header("search", config)

    records_path = out_dir / "sft_records.jsonl"
    pairs_path = out_dir / "sft_pairs.jsonl"
    write_jsonl(records_path, header, (record_to_dict(record) for record in dataset.records))
    write_jsonl(pairs_path, header, (pair_to_dict(pair) for pair in dataset.pairs))
    metrics_path = write_csv(
        out_dir / "metrics_search.csv",
        ("episode_id", "rollouts", "candidates", "kept", "top_reward", "top_correct"),
        dataset.stats,
    )
    artifacts = [records_path, pairs_path, metrics_path]
    if dataset.trees:
        trees_path = out_dir / "search_trees.jsonl"
        write_jsonl(trees_path, header, dataset.trees)
        artifacts.append(trees_path)
    if not dataset.records:
        logger.warning("Search kept no trajectory for any episode")

    top = [stat["top_reward"] for stat in dataset.stats]
    metrics = {
        "episodes": float(len(dataset.stats)),
        "kept_episodes": float(len(dataset.episode_ids)),
        "records": float(len(dataset.records)),
        "pairs": float(len(dataset.pairs)),
        "mean_top_reward": math.fsum(top) / len(top) if top else 0.0,
    }
    return StageOutcome("search", metrics, artifacts)


def stage_sft(config: ExperimentConfig, out_dir: Path, workers: int = 1) -> StageOutcome:
    require_stage(out_dir, "sft")
    # the policy only ever sees stripped episodes
    train_public = _load_episodes(out_dir / "train_episodes.jsonl", config, strip=True)
    _, rows = read_jsonl(out_dir / "sft_pairs.jsonl")
    pairs = [pair_from_dict(row) for row in rows]
    result = run_sft(config, train_public, pairs)

    policy_path = out_dir / "policy_sft.json"
    save_params(policy_path, result.policy)
    metrics_path = write_csv(out_dir / "metrics_sft.csv", ("epoch", "loss", "agreement"), result.history)
    final = result.history[-1]
    metrics = {"pairs": float(len(pairs)), "loss": final["loss"], "agreement": final["agreement"]}
    return StageOutcome("sft", metrics, [policy_path, metrics_path])


def stage_grpo(config: ExperimentConfig, out_dir: Path, workers: int = 1) -> StageOutcome:
    require_stage(out_dir, "grpo")
    require_stage(out_dir, "sft")
    train = _load_episodes(out_dir / "train_episodes.jsonl", config, strip=False)
    _, rows = read_jsonl(out_dir / "sft_records.jsonl")
    records = [record_from_dict(row) for row in rows]
    sft_policy = load_params(out_dir / "policy_sft.json", config_layout(config))
    split, result = run_grpo(config, sft_policy, sft_policy.copy(), train, records)

    split_path = write_json(
        out_dir / "split_manifest.json",
        {
            "header": _header("grpo", config),
            "sft_episode_ids": sorted({record.episode_id for record in split.sft_records}),
            "sft_records": len(split.sft_records),
            "mtdp_episode_ids": split.mtdp_episode_ids,
            "mtdp_fraction": split.mtdp_fraction,
            "challenge_pool_size": split.challenge_pool_size,
        },
    )
    policy_path = out_dir / "policy_grpo.json"
    save_params(policy_path, result.policy)
    metrics_path = write_csv(
        out_dir / "metrics_grpo.csv", ("step", "mean_reward", "accuracy", "mean_kl", "loss"), result.history
    )
    metrics = {
        "mtdp_episodes": float(len(split.mtdp_episode_ids)),
        "challenge_pool": float(split.challenge_pool_size),
        "saturated_ratios": float(result.saturated),
    }
    if result.history:
        metrics.update({key: float(result.history[-1][key]) for key in ("mean_reward", "accuracy", "mean_kl")})
    return StageOutcome("grpo", metrics, [split_path, policy_path, metrics_path])


def _resolve_eval_policy(config: ExperimentConfig, out_dir: Path, which: str) -> Tuple[str, PolicyParams]:
    if which not in EVAL_POLICIES:
        raise UsageError(f"policy must be one of {', '.join(EVAL_POLICIES)}, got {which!r}")
    if which == "init":
        return "init", initial_policy(config)
    if which == "latest":
        which = "grpo" if (out_dir / "policy_grpo.json").exists() else "sft"
    path = out_dir / f"policy_{which}.json"
    if not path.exists():
        raise DependencyError(f"Missing required file: {path}", missing=str(path))
    return which, load_params(path, config_layout(config))


def stage_eval(config: ExperimentConfig, out_dir: Path, workers: int = 1, policy: str = "latest") -> StageOutcome:
    require_stage(out_dir, "eval")
    episodes = _load_episodes(out_dir / "eval_episodes.jsonl", config, strip=False)
    policy_name, params = _resolve_eval_policy(config, out_dir, policy)
    report = run_eval(config, params, episodes)

    header = _header("eval", config)
    json_path = write_json(out_dir / "eval_report.json", {"header": header, "policy": policy_name, **report.to_dict()})
    md_path = out_dir / "eval_report.md"
    md_path.write_text(
        render_report(
            report,
            {
                "policy_name": policy_name,
                "seed": config.seed,
                "config_hash": header["config_hash"],
                "strategy": config.inference.strategy,
                "selection": config.inference.selection,
                "n_samples": config.inference.n_samples,
            },
        ),
        encoding="utf-8",
    )
    rows_path = write_csv(
        out_dir / "eval_rows.csv",
        ("episode_id", "predicted", "truth", "correct", "reward", "evidence_hit_rate", "length", "chain"),
        [vars(row) for row in report.rows],
    )
    metrics_path = write_csv(out_dir / "metrics_eval.csv", sorted(report.metrics), [report.metrics])
    return StageOutcome("eval", dict(report.metrics), [json_path, md_path, rows_path, metrics_path])


STAGE_RUNNERS = {
    "gen-data": stage_gen,
    "search": stage_search,
    "sft": stage_sft,
    "grpo": stage_grpo,
    "eval": stage_eval,
}


def run_stage(stage: str, config: ExperimentConfig, out_dir: Path, workers: int = 1) -> StageOutcome:
    if stage not in STAGE_RUNNERS:
        raise UsageError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    out_dir.mkdir(parents=True, exist_ok=True)
    logger.info("Running stage %s into %s", stage, out_dir)
    outcome = STAGE_RUNNERS[stage](config, out_dir, workers)
    logger.info("Stage %s finished: %s", stage, outcome.metrics)
    return outcome
