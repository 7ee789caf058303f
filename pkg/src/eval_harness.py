"""
Evaluation harness.
Runs k rollouts per query under a fixed or unconstrained budget, reduces them
to accuracy and behavior ratios, and writes plot-ready CSV / JSON reports.
"""
from __future__ import annotations

import csv
import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from src.budget_engine import BudgetConfig
from src.errors import ConfigError, IoFailure, LabError, MismatchedScenes, ParseError
from src.rollout_env import EpisodeConfig, EpisodeStatus, Trajectory, behavior_ratios, run_episode
from src.synthetic_scenes import SceneSet

QUERY_COLUMNS = ["scene_seed", "gold", "accuracy", "focus_rollouts", "direct_rollouts", "mean_turns", "visual_tokens"]
SWEEP_COLUMNS = ["budget", "accuracy", "all_direct_ratio", "all_focus_ratio", "mixed_ratio", "mean_turns", "visual_tokens_total"]
TRAINING_COLUMNS = [
    "step", "mean_reward", "all_direct", "all_focus", "direct_rate",
    "visual_tokens", "objective", "informative_groups", "refilled_groups", "version",
]


@dataclass(frozen=True)
class EvalConfig:
    constrained: bool = True
    budget_override: Optional[int] = 256
    max_turns: int = 3
    context_limit: int = 30000
    rollouts_per_query: int = 4
    budgets_for_sweep: tuple[int, ...] = (128, 256, 512, 1024)
    budget: BudgetConfig = field(default_factory=BudgetConfig)

    def __post_init__(self):
        if self.rollouts_per_query < 1:
            raise ConfigError(f"rollouts_per_query must be at least 1, got {self.rollouts_per_query}")
        if any(b < 1 for b in self.budgets_for_sweep):
            raise ConfigError(f"Sweep budgets must be positive, got {self.budgets_for_sweep}")

    @property
    def greedy(self) -> bool:
        return self.rollouts_per_query == 1

    def episode_config(self) -> EpisodeConfig:
        return EpisodeConfig(
            max_turns=self.max_turns,
            context_limit=self.context_limit,
            budget=self.budget,
            constrained=self.constrained,
            fixed_budget_override=self.budget_override,
        )


@dataclass(frozen=True)
class QueryRow:
    scene_seed: int
    gold: str
    accuracy: float
    focus_rollouts: int
    direct_rollouts: int
    mean_turns: float
    visual_tokens: int


@dataclass(frozen=True)
class MetricsReport:
    """Aggregate metrics of one evaluation.

    direct/focus/mixed query counts partition the scene set, so the three
    ratios sum to one.
    """

    accuracy: float
    all_direct_ratio: float
    all_focus_ratio: float
    mixed_ratio: float
    direct_queries: int
    focus_queries: int
    mixed_queries: int
    rollouts_per_query: int
    mean_turns: float
    visual_tokens_total: int
    direct_rate: float
    status_histogram: dict[str, int]
    per_query: tuple[QueryRow, ...]
    constrained: bool = True
    budget: Optional[int] = None

    @property
    def num_queries(self) -> int:
        return len(self.per_query)

    @property
    def scene_seeds(self) -> tuple[int, ...]:
        return tuple(row.scene_seed for row in self.per_query)

    def summary(self) -> dict:
        data = asdict(self)
        data.pop("per_query")
        data["num_queries"] = self.num_queries
        data["scene_seeds"] = list(self.scene_seeds)
        return data

    def to_dict(self) -> dict:
        data = asdict(self)
        data["per_query"] = [asdict(row) for row in self.per_query]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        try:
            rows = tuple(QueryRow(**row) for row in data["per_query"])
            fields = {k: v for k, v in data.items() if k not in ("per_query", "num_queries", "scene_seeds")}
            return cls(per_query=rows, **fields)
        except (KeyError, TypeError) as e:
            raise ParseError(f"Unreadable metrics report: {e}") from e


def _reduce(groups: Sequence[tuple[int, str, list[Trajectory]]], config: EvalConfig) -> MetricsReport:
    rows = []
    statuses: Counter = Counter()
    flags = []
    for scene_seed, gold, trajectories in groups:
        focused = [not t.is_direct for t in trajectories]
        flags.append(focused)
        statuses.update(t.status.value for t in trajectories)
        rows.append(QueryRow(
            scene_seed=scene_seed,
            gold=gold,
            accuracy=float(np.mean([t.reward for t in trajectories])),
            focus_rollouts=sum(focused),
            direct_rollouts=len(focused) - sum(focused),
            mean_turns=float(np.mean([t.episode.turn for t in trajectories])),
            visual_tokens=int(sum(t.visual_tokens for t in trajectories)),
        ))

    n = len(rows)
    all_direct, all_focus = behavior_ratios(flags)
    direct_queries = round(all_direct * n)
    focus_queries = round(all_focus * n)
    mixed_queries = n - direct_queries - focus_queries
    all_trajectories = [t for _, _, ts in groups for t in ts]
    return MetricsReport(
        accuracy=float(np.mean([t.reward for t in all_trajectories])),
        all_direct_ratio=all_direct,
        all_focus_ratio=all_focus,
        mixed_ratio=mixed_queries / n,
        direct_queries=direct_queries,
        focus_queries=focus_queries,
        mixed_queries=mixed_queries,
        rollouts_per_query=config.rollouts_per_query,
        mean_turns=float(np.mean([t.episode.turn for t in all_trajectories])),
        visual_tokens_total=int(sum(t.visual_tokens for t in all_trajectories)),
        direct_rate=float(np.mean([t.is_direct for t in all_trajectories])),
        status_histogram={s.value: statuses.get(s.value, 0) for s in EpisodeStatus if s != EpisodeStatus.RUNNING},
        per_query=tuple(rows),
        constrained=config.constrained,
        budget=config.budget_override if config.constrained else None,
    )


def evaluate(
    policy,
    scene_set: SceneSet,
    config: EvalConfig,
    seed: int = 0,
    workers: int = 1,
    log_every: int = 0,
) -> MetricsReport:
    """k rollouts per query; greedy argmax decoding when k == 1."""
    if len(scene_set) == 0:
        raise LabError("Evaluation needs a non-empty scene set")
    env_config = config.episode_config()
    k = config.rollouts_per_query

    def run(index: int):
        scene = scene_set[index]
        trajectories = [
            run_episode(policy, scene, scene.query, env_config, (seed, scene.seed, j), greedy=config.greedy)
            for j in range(k)
        ]
        if log_every and (index + 1) % log_every == 0:
            print(f"    {index + 1}/{len(scene_set)} queries evaluated")
        return scene.seed, scene.gold, trajectories

    indices = range(len(scene_set))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            groups = list(pool.map(run, indices))
    else:
        groups = [run(i) for i in indices]
    return _reduce(groups, config)


@dataclass(frozen=True)
class Degradation:
    gain: float
    loss: float

    @property
    def gap(self) -> float:
        return abs(self.loss - self.gain)


def degradation_report(
    report_unconstrained: MetricsReport,
    report_constrained: MetricsReport,
    baseline_accuracy: float,
) -> Degradation:
    """Accuracy deltas against a baseline: gain without the budget, loss under it."""
    if report_unconstrained.scene_seeds != report_constrained.scene_seeds:
        raise MismatchedScenes("Constrained and unconstrained reports cover different scenes")
    return Degradation(
        gain=report_unconstrained.accuracy - baseline_accuracy,
        loss=report_constrained.accuracy - baseline_accuracy,
    )


def budget_sweep(
    policy,
    scene_set: SceneSet,
    config: EvalConfig,
    budgets: Optional[Sequence[int]] = None,
    seed: int = 0,
    workers: int = 1,
    log_every: int = 0,
) -> list[tuple[int, MetricsReport]]:
    budgets = list(budgets if budgets is not None else config.budgets_for_sweep)
    if not budgets:
        raise LabError("Budget sweep needs at least one budget")
    results = []
    for index, budget in enumerate(budgets):
        swept = replace(config, constrained=True, budget_override=budget)
        report = evaluate(policy, scene_set, swept, seed=seed, workers=workers)
        if log_every and (index + 1) % log_every == 0:
            print(f"    B={budget}: accuracy={report.accuracy:.3f} all_focus={report.all_focus_ratio:.3f}")
        results.append((budget, report))
    return results


# --- Emission ---

def _write_csv(path: Path, fieldnames: list[str], rows: Sequence[dict]):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def emit_report(report: MetricsReport, path: Path) -> tuple[Path, Path]:
    """Write <path>.json (full report) and <path>.csv (one row per query)."""
    path = Path(path)
    json_path, csv_path = path.with_suffix(".json"), path.with_suffix(".csv")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        _write_csv(csv_path, QUERY_COLUMNS, [asdict(row) for row in report.per_query])
    except OSError as e:
        raise IoFailure(f"Could not write report {path}: {e}") from e
    return json_path, csv_path


def load_report(path: Path) -> MetricsReport:
    path = Path(path).with_suffix(".json")
    try:
        data = json.loads(path.read_text())
    except OSError as e:
        raise IoFailure(f"Could not read report {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e}") from e
    return MetricsReport.from_dict(data)


def emit_sweep(results: Sequence[tuple[int, MetricsReport]], path: Path) -> Path:
    """One CSV row per budget."""
    path = Path(path).with_suffix(".csv")
    rows = [{"budget": budget, **report.summary()} for budget, report in results]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        _write_csv(path, SWEEP_COLUMNS, rows)
    except OSError as e:
        raise IoFailure(f"Could not write sweep {path}: {e}") from e
    return path


def emit_training_log(log: Sequence[dict], path: Path) -> Path:
    """Per-step training metrics as CSV."""
    path = Path(path).with_suffix(".csv")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        _write_csv(path, TRAINING_COLUMNS, log)
    except OSError as e:
        raise IoFailure(f"Could not write training log {path}: {e}") from e
    return path
