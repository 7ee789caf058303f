"""
Policies over the focus environment.
A softmax-linear policy with analytic gradients, the observation-only
featurizer it reads, and scripted reference policies (oracle demonstrator,
constant answer, never answer, repeat focus, fixed transcript).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from src.budget_engine import BBox, ImageBuffer
from src.errors import IoFailure, LabError, ShapeMismatch, UnknownAction
from src.rollout_env import (
    Action,
    Answer,
    EpisodeState,
    Focus,
    StepRecord,
    Trajectory,
    default_think,
    normalize_answer,
)
from src.synthetic_scenes import MARKER_TINT, GlyphReading, SceneSpec, cell_bbox, read_target, tint_map

# Luminance std of a fully busy cell is at most 0.5
SALIENCY_SCALE = 0.5


class Policy(Protocol):
    """Anything run_episode can drive: one decision per turn."""

    def decide(self, state: EpisodeState, rng: np.random.Generator, greedy: bool = False) -> StepRecord:
        ...


@dataclass(frozen=True)
class ArmLayout:
    """Arm order: K answer arms, then one focus arm per overview grid cell (row-major)."""

    labels: tuple[str, ...]
    grid: int

    @classmethod
    def from_spec(cls, spec: SceneSpec) -> "ArmLayout":
        return cls(labels=tuple(spec.labels), grid=spec.grid)

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    @property
    def num_arms(self) -> int:
        return self.num_classes + self.grid * self.grid

    @property
    def feature_dim(self) -> int:
        return 2 * self.grid * self.grid + self.num_classes + 2

    def is_answer(self, arm: int) -> bool:
        return arm < self.num_classes

    def focus_arm(self, row: int, col: int) -> int:
        return self.num_classes + row * self.grid + col

    def cell_of(self, arm: int) -> tuple[int, int]:
        return divmod(arm - self.num_classes, self.grid)

    def action_for(self, arm: int, state: EpisodeState) -> Action:
        if not 0 <= arm < self.num_arms:
            raise UnknownAction(f"Arm {arm} outside 0..{self.num_arms - 1}")
        if self.is_answer(arm):
            return Answer(self.labels[arm])
        overview = state.overview.view
        row, col = self.cell_of(arm)
        return Focus((cell_bbox(row, col, overview.width, overview.height, self.grid),))

    def arm_of(self, action: Action, state: EpisodeState) -> int:
        """Arm that emits `action` in `state`; UnknownAction when none does."""
        if isinstance(action, Answer):
            wanted = normalize_answer(action.text)
            for i, label in enumerate(self.labels):
                if normalize_answer(label) == wanted:
                    return i
            raise UnknownAction(f"Answer {action.text!r} is not in the label set")
        if isinstance(action, Focus) and len(action.bboxes) == 1:
            overview = state.overview.view
            box = action.bboxes[0]
            for row in range(self.grid):
                for col in range(self.grid):
                    cell = cell_bbox(row, col, overview.width, overview.height, self.grid)
                    # Rescaled records may be off by one pixel per edge
                    if all(abs(a - b) <= 1 for a, b in zip(box.as_list(), cell.as_list())):
                        return self.focus_arm(row, col)
        raise UnknownAction(f"Action {action!r} does not match any arm")


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Weights (arms x features) and the number of updates applied so far."""

    weights: np.ndarray
    version: int = 0

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ShapeMismatch(f"weights must be 2-D, got shape {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise LabError("Policy weights contain non-finite entries")

    @classmethod
    def zeros(cls, layout: ArmLayout) -> "PolicyParams":
        return cls(weights=np.zeros((layout.num_arms, layout.feature_dim)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    def updated(self, step: np.ndarray) -> "PolicyParams":
        """New snapshot with weights + step and the version bumped."""
        return PolicyParams(weights=self.weights + step, version=self.version + 1)


@dataclass(frozen=True, eq=False)
class ActionDistribution:
    probs: np.ndarray
    log_probs: np.ndarray


# --- Featurizer ---

@lru_cache(maxsize=8)
def _overview_blocks(view: ImageBuffer, grid: int) -> tuple[np.ndarray, np.ndarray]:
    luminance = view.data.mean(axis=2)
    tint = tint_map(view.data)
    saliency = np.zeros(grid * grid)
    marker = np.zeros(grid * grid)
    for row in range(grid):
        for col in range(grid):
            box = cell_bbox(row, col, view.width, view.height, grid)
            if box.width <= 0 or box.height <= 0:
                continue
            i = row * grid + col
            saliency[i] = luminance[box.y1:box.y2, box.x1:box.x2].std() / SALIENCY_SCALE
            marker[i] = tint[box.y1:box.y2, box.x1:box.x2].mean() / MARKER_TINT
    return np.clip(saliency, 0.0, 1.0) / grid, np.clip(marker, 0.0, 1.0)


@lru_cache(maxsize=32)
def _reading(view: ImageBuffer, source: BBox, spec: SceneSpec) -> Optional[GlyphReading]:
    return read_target(view, source, spec)


@lru_cache(maxsize=8)
def _glimpse_guess(view: ImageBuffer, num_classes: int) -> int:
    # Content hash: fixed per glimpse, uncorrelated with the glyph class
    return int(view.digest()[:8], 16) % num_classes


def best_reading(state: EpisodeState, spec: SceneSpec, focused_only: bool = False) -> Optional[GlyphReading]:
    """Most confident glyph reading over the views so far, the glimpse included unless focused_only."""
    best = None
    for obs in state.observations[1:] if focused_only else state.observations:
        reading = _reading(obs.view, obs.source_bbox, spec)
        if reading and (best is None or reading.margin > best.margin):
            best = reading
    return best


def marker_scores(state: EpisodeState, grid: int) -> np.ndarray:
    """Per-cell marker likelihood read from the overview, shape (G*G,)."""
    return _overview_blocks(state.overview.view, grid)[1]


def featurize(state: EpisodeState, spec: SceneSpec) -> np.ndarray:
    """Feature vector of dimension 2*G^2 + K + 2, computed from observations only.

    Layout: overview saliency per cell, marker likelihood per cell, decode
    margin of the focused views, turn fraction, one-hot of the believed class.

    The belief is the best reading when some view is legible and otherwise a
    guess fixed by the glimpse pixels, so exactly one class is always active.
    The margin is 0 until a focused view is read: a glimpse carries no
    confidence signal, legible or not.
    """
    saliency, marker = _overview_blocks(state.overview.view, spec.grid)
    reading = best_reading(state, spec)
    if reading is not None:
        believed = spec.labels.index(reading.label)
    else:
        believed = _glimpse_guess(state.overview.view, spec.num_classes)
    decoded = np.zeros(spec.num_classes)
    decoded[believed] = 1.0
    focused = best_reading(state, spec, focused_only=True)
    margin = min(focused.margin, 1.0) if focused else 0.0
    turn = state.turn / state.config.max_turns
    return np.concatenate([saliency, marker, [margin, turn], decoded])


# --- Softmax-linear arithmetic ---

def act_distribution(params: PolicyParams, features: np.ndarray) -> ActionDistribution:
    if features.ndim != 1 or params.weights.shape[1] != features.shape[0]:
        raise ShapeMismatch(
            f"weights {params.weights.shape} cannot act on features {features.shape}"
        )
    logits = params.weights @ features
    shifted = logits - logits.max()
    log_probs = shifted - np.log(np.exp(shifted).sum())
    return ActionDistribution(probs=np.exp(log_probs), log_probs=log_probs)


def log_prob_and_grad(params: PolicyParams, features: np.ndarray, arm: int) -> tuple[float, np.ndarray]:
    """log pi(arm | features) and its gradient (1{k=arm} - p_k) * features."""
    dist = act_distribution(params, features)
    if not 0 <= arm < dist.probs.shape[0]:
        raise UnknownAction(f"Arm {arm} outside 0..{dist.probs.shape[0] - 1}")
    indicator = np.zeros_like(dist.probs)
    indicator[arm] = 1.0
    grad = np.outer(indicator - dist.probs, features)
    return float(dist.log_probs[arm]), grad


def sample(dist: ActionDistribution, rng: np.random.Generator) -> tuple[int, float]:
    """Inverse-CDF draw."""
    cdf = np.cumsum(dist.probs)
    arm = int(np.searchsorted(cdf, rng.random(), side="right"))
    arm = min(arm, len(cdf) - 1)
    return arm, float(dist.log_probs[arm])


def argmax_arm(dist: ActionDistribution) -> tuple[int, float]:
    arm = int(np.argmax(dist.probs))
    return arm, float(dist.log_probs[arm])


class LinearSoftmaxPolicy:
    """pi(a | H_t) = softmax(W . features(H_t))."""

    def __init__(self, params: PolicyParams, spec: SceneSpec):
        self.params = params
        self.spec = spec
        self.layout = ArmLayout.from_spec(spec)
        if params.shape != (self.layout.num_arms, self.layout.feature_dim):
            raise ShapeMismatch(
                f"params shape {params.shape} does not fit layout "
                f"({self.layout.num_arms}, {self.layout.feature_dim})"
            )

    def decide(self, state: EpisodeState, rng: np.random.Generator, greedy: bool = False) -> StepRecord:
        features = featurize(state, self.spec)
        dist = act_distribution(self.params, features)
        arm, log_prob = argmax_arm(dist) if greedy else sample(dist, rng)
        action = self.layout.action_for(arm, state)
        return StepRecord(
            state=state,
            action=action,
            arm=arm,
            log_prob=log_prob,
            features=features,
            version=self.params.version,
            think=default_think(action),
        )


# --- Scripted policies ---

class ScriptedPolicy:
    """Deterministic policy; subclasses implement choose()."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.layout = ArmLayout.from_spec(spec)

    def choose(self, state: EpisodeState) -> Action:
        raise NotImplementedError

    def decide(self, state: EpisodeState, rng: np.random.Generator, greedy: bool = False) -> StepRecord:
        action = self.choose(state)
        try:
            arm = self.layout.arm_of(action, state)
        except UnknownAction:
            arm = None
        return StepRecord(
            state=state,
            action=action,
            arm=arm,
            features=featurize(state, self.spec),
            think=default_think(action),
        )

    def _focus_cell(self, state: EpisodeState, row: int, col: int) -> Focus:
        overview = state.overview.view
        return Focus((cell_bbox(row, col, overview.width, overview.height, self.spec.grid),))

    def _marker_cell(self, state: EpisodeState) -> tuple[int, int]:
        return divmod(int(np.argmax(marker_scores(state, self.spec.grid))), self.spec.grid)


class OraclePolicy(ScriptedPolicy):
    """Focus the most marker-like cell, then answer the decoded class."""

    def choose(self, state: EpisodeState) -> Action:
        if state.focus_count == 0:
            return self._focus_cell(state, *self._marker_cell(state))
        reading = best_reading(state, self.spec)
        return Answer(reading.label if reading else self.spec.labels[0])


class ConstantAnswerPolicy(ScriptedPolicy):
    """Answer one fixed class immediately."""

    def __init__(self, spec: SceneSpec, label_index: int = 0):
        super().__init__(spec)
        self.label = spec.labels[label_index]

    def choose(self, state: EpisodeState) -> Action:
        return Answer(self.label)


class NeverAnswerPolicy(ScriptedPolicy):
    """Focus a new cell every turn and never answer."""

    def choose(self, state: EpisodeState) -> Action:
        cells = self.spec.grid * self.spec.grid
        return self._focus_cell(state, *divmod(state.turn % cells, self.spec.grid))


class RepeatFocusPolicy(ScriptedPolicy):
    """Focus the marker cell `repeats` times, then answer."""

    def __init__(self, spec: SceneSpec, repeats: int = 2):
        super().__init__(spec)
        self.repeats = repeats

    def choose(self, state: EpisodeState) -> Action:
        if state.focus_count < self.repeats:
            return self._focus_cell(state, *self._marker_cell(state))
        reading = best_reading(state, self.spec)
        return Answer(reading.label if reading else self.spec.labels[0])


class TranscriptPolicy:
    """Emits fixed assistant texts, one per turn; exercises the text grammar path."""

    def __init__(self, turns: Sequence[str]):
        self.turns = list(turns)

    def decide(self, state: EpisodeState, rng: np.random.Generator, greedy: bool = False) -> StepRecord:
        return StepRecord(state=state, text=self.turns[min(state.turn, len(self.turns) - 1)])


def annotate_trajectory(trajectory: Trajectory, spec: SceneSpec) -> Trajectory:
    """Fill in features and arms of steps that lack them (e.g. rebuilt from records)."""
    layout = ArmLayout.from_spec(spec)
    steps = []
    for s in trajectory.steps:
        if s.action is None:
            continue
        if s.features is None or s.arm is None:
            s = replace(s, features=featurize(s.state, spec), arm=layout.arm_of(s.action, s.state))
        steps.append(s)
    return replace(trajectory, steps=tuple(steps))


# --- Checkpoints ---

def save_params(params: PolicyParams, path: Path, seed: Optional[int] = None) -> Path:
    """Text matrix with a one-line JSON header (shape, version, seed)."""
    path = Path(path)
    header = json.dumps({"shape": list(params.shape), "version": params.version, "seed": seed})
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(path, params.weights, fmt="%.17g", header=header)
    except OSError as e:
        raise IoFailure(f"Could not write checkpoint {path}: {e}") from e
    return path


def load_params(path: Path) -> tuple[PolicyParams, dict]:
    """Read a checkpoint; returns params and its header."""
    path = Path(path)
    try:
        with open(path) as f:
            header = json.loads(f.readline().lstrip("#").strip())
        weights = np.loadtxt(path, ndmin=2)
    except (OSError, ValueError) as e:
        raise IoFailure(f"Could not read checkpoint {path}: {e}") from e
    if list(weights.shape) != header.get("shape"):
        raise ShapeMismatch(f"Checkpoint {path} holds {weights.shape}, header says {header.get('shape')}")
    return PolicyParams(weights=weights, version=int(header.get("version", 0))), header
