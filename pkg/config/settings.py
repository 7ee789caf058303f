"""
Run configuration for the budgeted-perception lab.
Every key lives in config/default.env; a per-run file overlays it.
"""
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from dotenv import dotenv_values, load_dotenv

from src.budget_engine import BudgetConfig, budget_for_size, target_size
from src.errors import ConfigError
from src.eval_harness import EvalConfig
from src.rollout_env import EpisodeConfig
from src.synthetic_scenes import LEGIBLE_SCALE, SceneSpec
from src.trainer import GrpoConfig, SftConfig

BASE_DIR = Path(__file__).parent.parent
DEFAULTS_PATH = Path(__file__).parent / "default.env"

# Optional .env at the project root may set LAB_CONFIG
load_dotenv(BASE_DIR / ".env")


def _int(values: dict, key: str) -> int:
    try:
        return int(values[key])
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be an integer, got {values[key]!r}")


def _float(values: dict, key: str) -> float:
    try:
        return float(values[key])
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be a number, got {values[key]!r}")


def _bool(values: dict, key: str) -> bool:
    value = (values[key] or "").strip().lower()
    if value in ("true", "1", "yes"):
        return True
    if value in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key} must be true or false, got {values[key]!r}")


def _optional_int(values: dict, key: str) -> Optional[int]:
    if not (values[key] or "").strip():
        return None
    return _int(values, key)


def _int_list(values: dict, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in (values[key] or "").split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of integers, got {values[key]!r}")


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs, composed of the module configs."""

    budget: BudgetConfig
    scene_spec: SceneSpec
    episode: EpisodeConfig
    sft: SftConfig
    grpo: GrpoConfig
    eval: EvalConfig
    seed: int = 0
    train_scene_start: int = 0
    train_scenes: int = 256
    eval_scene_start: int = 100000
    eval_scenes: int = 200
    sft_samples_per_scene: int = 4
    dedup_iou: float = 0.5
    difficulty_rollouts: int = 8
    difficulty_band: tuple[float, float] = (0.125, 0.375)
    output_dir: Path = field(default_factory=lambda: BASE_DIR / "output")
    log_every: int = 1
    source: Optional[Path] = None

    @classmethod
    def from_values(cls, values: dict) -> "RunConfig":
        budget = BudgetConfig(
            gamma=_float(values, "GAMMA"),
            b_min=_int(values, "B_MIN"),
            b_max=_int(values, "B_MAX"),
            patch_size=_int(values, "PATCH_SIZE"),
        )
        output_dir = Path(values["OUTPUT_DIR"] or "output")
        if not output_dir.is_absolute():
            output_dir = Path.cwd() / output_dir
        return cls(
            budget=budget,
            scene_spec=SceneSpec(
                canvas=_int(values, "CANVAS"),
                grid=_int(values, "GRID"),
                glyph_size=_int(values, "GLYPH_SIZE"),
                num_classes=_int(values, "NUM_CLASSES"),
                distractor_density=_float(values, "DISTRACTOR_DENSITY"),
                seed=_int(values, "SCENE_SPEC_SEED"),
            ),
            episode=EpisodeConfig(
                max_turns=_int(values, "MAX_TURNS"),
                context_limit=_int(values, "CONTEXT_LIMIT"),
                budget=budget,
                constrained=_bool(values, "CONSTRAINED"),
                fixed_budget_override=_optional_int(values, "FIXED_BUDGET"),
                on_protocol_error=(values["ON_PROTOCOL_ERROR"] or "").strip(),
            ),
            sft=SftConfig(
                epochs=_int(values, "SFT_EPOCHS"),
                batch_size=_int(values, "SFT_BATCH_SIZE"),
                learning_rate=_float(values, "SFT_LEARNING_RATE"),
            ),
            grpo=GrpoConfig(
                group_size=_int(values, "GROUP_SIZE"),
                clip_low=_float(values, "CLIP_LOW"),
                clip_high=_float(values, "CLIP_HIGH"),
                learning_rate=_float(values, "RL_LEARNING_RATE"),
                batch_queries=_int(values, "BATCH_QUERIES"),
                minibatch=_int(values, "MINIBATCH"),
                max_steps=_int(values, "MAX_STEPS"),
                dynamic_sampling=_bool(values, "DYNAMIC_SAMPLING"),
                max_refill_rounds=_int(values, "MAX_REFILL_ROUNDS"),
                max_degenerate_retries=_int(values, "MAX_DEGENERATE_RETRIES"),
                workers=_int(values, "WORKERS"),
                focus_cost=_float(values, "FOCUS_COST"),
            ),
            eval=EvalConfig(
                constrained=_bool(values, "EVAL_CONSTRAINED"),
                budget_override=_optional_int(values, "EVAL_BUDGET"),
                max_turns=_int(values, "EVAL_MAX_TURNS"),
                context_limit=_int(values, "EVAL_CONTEXT_LIMIT"),
                rollouts_per_query=_int(values, "ROLLOUTS_PER_QUERY"),
                budgets_for_sweep=_int_list(values, "SWEEP_BUDGETS"),
                budget=budget,
            ),
            seed=_int(values, "SEED"),
            train_scene_start=_int(values, "TRAIN_SCENE_START"),
            train_scenes=_int(values, "TRAIN_SCENES"),
            eval_scene_start=_int(values, "EVAL_SCENE_START"),
            eval_scenes=_int(values, "EVAL_SCENES"),
            sft_samples_per_scene=_int(values, "SFT_SAMPLES_PER_SCENE"),
            dedup_iou=_float(values, "DEDUP_IOU"),
            difficulty_rollouts=_int(values, "DIFFICULTY_ROLLOUTS"),
            difficulty_band=(_float(values, "DIFFICULTY_LOW"), _float(values, "DIFFICULTY_HIGH")),
            output_dir=output_dir,
            log_every=_int(values, "LOG_EVERY"),
        )

    def overview_scale(self, budget: Optional[int]) -> float:
        """Linear scale of the glimpse of a full canvas under the given budget."""
        canvas = self.scene_spec.canvas
        if budget is None:
            return 1.0
        width, _ = target_size(canvas, canvas, budget, self.budget.patch_size)
        return width / canvas

    def crop_scale(self, budget: Optional[int]) -> float:
        """Linear scale of a budgeted single-cell crop."""
        cell = self.scene_spec.cell_size
        if budget is None:
            return 1.0
        width, _ = target_size(cell, cell, budget, self.budget.patch_size)
        return width / cell

    def training_budget(self) -> Optional[int]:
        if not self.episode.constrained:
            return None
        if self.episode.fixed_budget_override is not None:
            return self.episode.fixed_budget_override
        return budget_for_size(self.scene_spec.canvas, self.scene_spec.canvas, self.budget)

    def validate(self) -> list[str]:
        """Return a list of problems that would undermine a run."""
        errors = []

        if self.train_scenes < 1 or self.eval_scenes < 1:
            errors.append("TRAIN_SCENES and EVAL_SCENES must be at least 1")
        train = range(self.train_scene_start, self.train_scene_start + self.train_scenes)
        evaluation = range(self.eval_scene_start, self.eval_scene_start + self.eval_scenes)
        if train and evaluation and train.start < evaluation.stop and evaluation.start < train.stop:
            errors.append("Training and evaluation scene seeds overlap")

        if self.sft_samples_per_scene < 1:
            errors.append("SFT_SAMPLES_PER_SCENE must be at least 1")
        if not 0 < self.dedup_iou <= 1:
            errors.append("DEDUP_IOU must be in (0, 1]")
        if self.difficulty_rollouts < 1:
            errors.append("DIFFICULTY_ROLLOUTS must be at least 1")
        low, high = self.difficulty_band
        if not 0 <= low <= high <= 1:
            errors.append("DIFFICULTY_LOW/HIGH must satisfy 0 <= low <= high <= 1")
        if self.log_every < 0:
            errors.append("LOG_EVERY must be non-negative")

        # Starvation: the glimpse must not be readable, a focused cell must be
        for name, budget in [("training", self.training_budget()), ("evaluation", self.eval.budget_override)]:
            if budget is None:
                continue
            if self.overview_scale(budget) >= LEGIBLE_SCALE:
                errors.append(f"The {name} glimpse (B={budget}) is legible; direct answers would be rewarded")
            if self.crop_scale(budget) < LEGIBLE_SCALE:
                errors.append(f"A focused cell is illegible at the {name} budget (B={budget})")

        return errors


def load_values(path: Optional[Path] = None, overrides: Optional[dict] = None) -> dict:
    """Defaults overlaid by a user file and then by explicit overrides."""
    values = dotenv_values(DEFAULTS_PATH)
    if path is None and os.getenv("LAB_CONFIG"):
        path = Path(os.getenv("LAB_CONFIG"))
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        user = dotenv_values(path)
        unknown = sorted(set(user) - set(values))
        if unknown:
            raise ConfigError(f"Unknown config keys in {path}: {', '.join(unknown)}")
        values.update(user)
    for key, value in (overrides or {}).items():
        if key not in values:
            raise ConfigError(f"Unknown config key {key}")
        if value is not None:
            values[key] = str(value)
    return values


def load_run_config(path: Optional[Path] = None, overrides: Optional[dict] = None) -> RunConfig:
    config = RunConfig.from_values(load_values(path, overrides))
    if path is not None:
        config = replace(config, source=Path(path))
    return config
