"""
Budget-aware SFT and GRPO training for the softmax-linear policy.
SFT clones demonstration trajectories; GRPO ascends a clipped surrogate with
asymmetric clipping and dynamic sampling of uninformative groups.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import cycle
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from src.errors import AllGroupsDegenerate, ConfigError, IoFailure, LabError, OffPolicyRollout, UnknownAction
from src.policy import LinearSoftmaxPolicy, PolicyParams, log_prob_and_grad
from src.rollout_env import EpisodeConfig, Trajectory, behavior_ratios, run_episode
from src.synthetic_scenes import Scene, SceneSet, generate_scene


@dataclass(frozen=True)
class SftConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"SFT learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(f"Invalid SFT epochs/batch_size: {self.epochs}/{self.batch_size}")


@dataclass(frozen=True)
class GrpoConfig:
    """GRPO hyperparameters. clip_high above clip_low leaves room to explore.

    focus_cost is deducted from the training signal once per focus turn; the
    accuracy reward itself stays binary.
    """

    group_size: int = 8
    clip_low: float = 0.2
    clip_high: float = 0.28
    learning_rate: float = 1e-2
    batch_queries: int = 16
    minibatch: int = 32
    max_steps: int = 50
    dynamic_sampling: bool = True
    max_refill_rounds: int = 4
    max_degenerate_retries: int = 3
    workers: int = 1
    focus_cost: float = 0.0

    def __post_init__(self):
        if self.group_size < 2:
            raise ConfigError(f"group_size must be at least 2, got {self.group_size}")
        if not 0 < self.clip_low < 1:
            raise ConfigError(f"clip_low must be in (0, 1), got {self.clip_low}")
        if self.clip_high <= 0:
            raise ConfigError(f"clip_high must be positive, got {self.clip_high}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_queries < 1 or self.minibatch < 1:
            raise ConfigError("batch_queries and minibatch must be positive")
        if self.minibatch > self.batch_queries * self.group_size:
            raise ConfigError(
                f"minibatch {self.minibatch} exceeds batch_queries x group_size "
                f"({self.batch_queries * self.group_size})"
            )
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")
        if not 0 <= self.focus_cost < 1:
            raise ConfigError(f"focus_cost must be in [0, 1), got {self.focus_cost}")


@dataclass(frozen=True)
class AdvantageGroup:
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]
    degenerate: bool


@dataclass(frozen=True, eq=False)
class RolloutGroup:
    """G rollouts of one scene and their group-relative advantages."""

    scene_seed: int
    trajectories: tuple[Trajectory, ...]
    advantages: AdvantageGroup

    @classmethod
    def from_trajectories(
        cls, scene_seed: int, trajectories: Sequence[Trajectory], focus_cost: float = 0.0
    ) -> "RolloutGroup":
        return cls(
            scene_seed=scene_seed,
            trajectories=tuple(trajectories),
            advantages=group_advantages([t.reward - focus_cost * t.focus_turns for t in trajectories]),
        )


# --- SFT ---

def _decision_steps(trajectory):
    for step in trajectory.steps:
        if step.arm is None or step.features is None:
            raise UnknownAction(f"Trajectory step {step.action!r} has no arm in the policy's arm set")
        yield step


def sft_loss_and_grad(params: PolicyParams, dataset: Sequence) -> tuple[float, np.ndarray]:
    """Negative mean over trajectories of the summed log-probs of their actions.

    The final answer is itself an arm, so the answer term is its last step.
    """
    if not dataset:
        raise LabError("SFT dataset is empty")
    total = 0.0
    grad = np.zeros_like(params.weights)
    for trajectory in dataset:
        for step in _decision_steps(trajectory):
            log_prob, g = log_prob_and_grad(params, step.features, step.arm)
            total += log_prob
            grad += g
    n = len(dataset)
    return -total / n, -grad / n


def sft_train(
    params0: PolicyParams,
    dataset: Sequence,
    config: SftConfig,
    seed: int = 0,
    log_every: int = 0,
) -> tuple[PolicyParams, list[float]]:
    """Minibatch gradient descent on the SFT loss.

    Returns the trained params and the full-dataset loss before training and
    after every epoch.
    """
    rng = np.random.default_rng(seed)
    params = params0
    losses = [sft_loss_and_grad(params, dataset)[0]] if config.epochs else []
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            _, grad = sft_loss_and_grad(params, batch)
            params = params.updated(-config.learning_rate * grad)
        losses.append(sft_loss_and_grad(params, dataset)[0])
        if log_every and (epoch + 1) % log_every == 0:
            print(f"    epoch {epoch + 1}: loss={losses[-1]:.4f}")
    return params, losses


# --- GRPO arithmetic ---

def group_advantages(rewards: Sequence[float]) -> AdvantageGroup:
    """(r - mean) / std with the population std; zero-variance groups are degenerate."""
    if len(rewards) < 2:
        raise LabError(f"A group needs at least 2 rewards, got {len(rewards)}")
    r = np.asarray(rewards, dtype=float)
    std = r.std()
    if std == 0:
        return AdvantageGroup(rewards=tuple(r.tolist()), advantages=(0.0,) * len(r), degenerate=True)
    return AdvantageGroup(
        rewards=tuple(r.tolist()),
        advantages=tuple(((r - r.mean()) / std).tolist()),
        degenerate=False,
    )


def clipped_surrogate(logp_new: float, logp_old: float, advantage: float, config: GrpoConfig) -> float:
    """min(r * A, clip(r, 1 - eps_low, 1 + eps_high) * A) with r = exp(logp_new - logp_old)."""
    ratio = math.exp(logp_new - logp_old)
    clipped = min(max(ratio, 1 - config.clip_low), 1 + config.clip_high)
    return min(ratio * advantage, clipped * advantage)


def _surrogate_term(params: PolicyParams, step, advantage: float, config: GrpoConfig) -> tuple[float, np.ndarray]:
    logp_new, g = log_prob_and_grad(params, step.features, step.arm)
    ratio = math.exp(logp_new - step.log_prob)
    value = clipped_surrogate(logp_new, step.log_prob, advantage, config)
    clipped = min(max(ratio, 1 - config.clip_low), 1 + config.clip_high)
    # Zero gradient where the clipped branch is the strict minimum
    if clipped * advantage < ratio * advantage:
        return value, np.zeros_like(g)
    return value, advantage * ratio * g


def surrogate_objective_and_grad(
    params: PolicyParams,
    groups: Sequence[RolloutGroup],
    config: GrpoConfig,
) -> tuple[float, np.ndarray]:
    """Mean clipped surrogate over every decision of the non-degenerate groups."""
    total = 0.0
    grad = np.zeros_like(params.weights)
    count = 0
    for group in groups:
        if group.advantages.degenerate:
            continue
        for trajectory, advantage in zip(group.trajectories, group.advantages.advantages):
            for step in _decision_steps(trajectory):
                value, g = _surrogate_term(params, step, advantage, config)
                total += value
                grad += g
                count += 1
    if count == 0:
        return 0.0, grad
    return total / count, grad / count


@dataclass(frozen=True)
class GrpoStepStats:
    objective: float
    informative_groups: int
    refilled_groups: int


def _check_on_policy(params: PolicyParams, groups: Sequence[RolloutGroup]):
    for group in groups:
        for trajectory in group.trajectories:
            for step in trajectory.steps:
                if step.arm is not None and step.version != params.version:
                    raise OffPolicyRollout(
                        f"Rollout sampled from params version {step.version}, current is {params.version}"
                    )


def grpo_step(
    params_old: PolicyParams,
    groups: Sequence[RolloutGroup],
    config: GrpoConfig,
    refill: Optional[Callable[[int, int], list[RolloutGroup]]] = None,
) -> tuple[PolicyParams, GrpoStepStats]:
    """One near on-policy GRPO update.

    Degenerate groups are dropped; with dynamic sampling, `refill(n, round)`
    supplies up to n fresh groups per round until the batch is full again.
    """
    _check_on_policy(params_old, groups)
    informative = [g for g in groups if not g.advantages.degenerate]
    refilled = 0
    if config.dynamic_sampling and refill is not None:
        for round_index in range(config.max_refill_rounds):
            missing = len(groups) - len(informative)
            if missing <= 0:
                break
            fresh = refill(missing, round_index)
            _check_on_policy(params_old, fresh)
            kept = [g for g in fresh if not g.advantages.degenerate]
            informative.extend(kept)
            refilled += len(kept)
    if not informative:
        raise AllGroupsDegenerate(f"All {len(groups)} groups had identical rewards")

    # Mini-batches over trajectories; the rollouts' log-probs stay the old policy's
    pairs = [(t, a) for g in informative for t, a in zip(g.trajectories, g.advantages.advantages)]
    weights = params_old.weights.copy()
    current = params_old
    for start in range(0, len(pairs), config.minibatch):
        chunk = pairs[start:start + config.minibatch]
        minibatch = [
            RolloutGroup(
                scene_seed=-1,
                trajectories=tuple(t for t, _ in chunk),
                advantages=AdvantageGroup(
                    rewards=tuple(float(t.reward) for t, _ in chunk),
                    advantages=tuple(a for _, a in chunk),
                    degenerate=False,
                ),
            )
        ]
        _, grad = surrogate_objective_and_grad(current, minibatch, config)
        weights = weights + config.learning_rate * grad
        current = PolicyParams(weights=weights, version=params_old.version)

    objective, _ = surrogate_objective_and_grad(params_old, informative, config)
    stats = GrpoStepStats(objective=objective, informative_groups=len(informative), refilled_groups=refilled)
    return PolicyParams(weights=weights, version=params_old.version + 1), stats


# --- Rollout collection and the RL loop ---

def collect_groups(
    policy,
    scenes: Sequence[Scene],
    env_config: EpisodeConfig,
    group_size: int,
    seed_prefix: tuple[int, ...],
    workers: int = 1,
    focus_cost: float = 0.0,
) -> list[RolloutGroup]:
    """G rollouts per scene. Episode q, j is seeded by seed_prefix + (q, j)."""
    jobs = [(q, j) for q in range(len(scenes)) for j in range(group_size)]

    def run(job):
        q, j = job
        scene = scenes[q]
        return run_episode(policy, scene, scene.query, env_config, seed_prefix + (q, j))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    return [
        RolloutGroup.from_trajectories(scenes[q].seed, results[q * group_size:(q + 1) * group_size], focus_cost)
        for q in range(len(scenes))
    ]


def rollout_metrics(groups: Sequence[RolloutGroup]) -> dict:
    """Reward, behavior ratios and visual-token meter of every group a step rolled out."""
    trajectories = [t for g in groups for t in g.trajectories]
    if not trajectories:
        return {"mean_reward": 0.0, "all_direct": 0.0, "all_focus": 0.0, "direct_rate": 0.0, "visual_tokens": 0}
    all_direct, all_focus = behavior_ratios([[not t.is_direct for t in g.trajectories] for g in groups])
    return {
        "mean_reward": float(np.mean([t.reward for t in trajectories])),
        "all_direct": all_direct,
        "all_focus": all_focus,
        "direct_rate": float(np.mean([t.is_direct for t in trajectories])),
        "visual_tokens": int(sum(t.visual_tokens for t in trajectories)),
    }


def rl_train(
    params0: PolicyParams,
    scenes: SceneSet,
    env_config: EpisodeConfig,
    config: GrpoConfig,
    seed: int = 0,
    log_every: int = 1,
) -> tuple[PolicyParams, list[dict]]:
    """GRPO over a cyclic stream of scenes; returns final params and the per-step log."""
    if len(scenes) == 0:
        raise LabError("RL needs a non-empty scene set")
    stream = cycle(scenes.seeds)

    def next_scenes(count: int) -> list[Scene]:
        return [generate_scene(scenes.spec, next(stream)) for _ in range(count)]

    params = params0
    log = []
    failures = 0
    for step in range(config.max_steps):
        policy = LinearSoftmaxPolicy(params, scenes.spec)
        batch = next_scenes(config.batch_queries)
        groups = collect_groups(
            policy, batch, env_config, config.group_size, (seed, step, 0), config.workers, config.focus_cost
        )
        collected = list(groups)

        def refill(count: int, round_index: int) -> list[RolloutGroup]:
            fresh = collect_groups(
                policy, next_scenes(count), env_config, config.group_size,
                (seed, step, round_index + 1), config.workers, config.focus_cost,
            )
            collected.extend(fresh)
            return fresh

        record = {"step": step}
        try:
            params, stats = grpo_step(params, groups, config, refill)
            failures = 0
            record.update(
                objective=stats.objective,
                informative_groups=stats.informative_groups,
                refilled_groups=stats.refilled_groups,
            )
        except AllGroupsDegenerate:
            failures += 1
            if failures > config.max_degenerate_retries:
                raise
            record.update(objective=None, informative_groups=0, refilled_groups=0)
        record.update(rollout_metrics(collected))
        record["version"] = params.version
        log.append(record)

        if log_every and step % log_every == 0:
            print(
                f"    step {step}: reward={record['mean_reward']:.3f} "
                f"all_focus={record['all_focus']:.3f} all_direct={record['all_direct']:.3f} "
                f"tokens={record['visual_tokens']} informative={record['informative_groups']}"
            )
    return params, log


def save_training_log(log: Sequence[dict], path: Path) -> Path:
    """One JSON record per line."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for record in log:
                f.write(json.dumps(record, sort_keys=True) + "\n")
    except OSError as e:
        raise IoFailure(f"Could not write training log {path}: {e}") from e
    return path
