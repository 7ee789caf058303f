"""
Budgeted multi-turn rollout environment.
The first observation is a budgeted glimpse of the whole image; every focus
action crops the native-resolution original and budgets each crop on its own.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Optional, Sequence, Union

import numpy as np

from src.budget_engine import (
    BBox,
    BudgetConfig,
    ImageBuffer,
    budgeted_view,
    compute_budget,
    crop,
    downsample,
)
from src.errors import (
    BBoxCountOutOfRange,
    ConfigError,
    EmptyRegion,
    EpisodeFinished,
    ParseError,
    ProtocolError,
    UnknownAction,
)
from src.toolcall_protocol import (
    IMAGE_TOKEN,
    MAX_BBOXES,
    ROLE_ASSISTANT,
    ROLE_ENVIRONMENT,
    ToolCall,
    TurnContent,
    parse_turn,
    render_tool_response,
    render_user_prompt,
    serialize_turn,
)

if TYPE_CHECKING:
    from src.policy import Policy
    from src.synthetic_scenes import Scene

# Fixed text allowance charged per turn against the context limit
TEXT_TOKENS_PER_TURN = 64

PROTOCOL_ERROR_MODES = ("terminate", "skip")


class EpisodeStatus(str, Enum):
    RUNNING = "running"
    ANSWERED = "answered"
    TRUNCATED_TURNS = "truncated_turns"
    TRUNCATED_CONTEXT = "truncated_context"
    PROTOCOL_ERROR = "protocol_error"


@dataclass(frozen=True)
class EpisodeConfig:
    """Turn and context limits plus the budget regime of one episode."""

    max_turns: int = 5
    context_limit: int = 30000
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    constrained: bool = True
    fixed_budget_override: Optional[int] = None
    on_protocol_error: str = "terminate"

    def __post_init__(self):
        if self.max_turns < 1:
            raise ConfigError(f"max_turns must be at least 1, got {self.max_turns}")
        if self.context_limit < self.budget.b_max:
            raise ConfigError(f"context_limit {self.context_limit} is below b_max {self.budget.b_max}")
        if self.fixed_budget_override is not None and self.fixed_budget_override < 1:
            raise ConfigError(f"fixed_budget_override must be positive, got {self.fixed_budget_override}")
        if self.on_protocol_error not in PROTOCOL_ERROR_MODES:
            raise ConfigError(
                f"on_protocol_error must be one of {PROTOCOL_ERROR_MODES}, got {self.on_protocol_error!r}"
            )


@dataclass(frozen=True)
class Focus:
    """Request crops of 1-3 boxes given in the overview frame."""

    bboxes: tuple[BBox, ...]

    def __post_init__(self):
        if not 1 <= len(self.bboxes) <= MAX_BBOXES:
            raise BBoxCountOutOfRange(f"Focus needs 1-{MAX_BBOXES} bboxes, got {len(self.bboxes)}")


@dataclass(frozen=True)
class Answer:
    text: str


Action = Union[Focus, Answer]


@dataclass(frozen=True, eq=False)
class Observation:
    view: ImageBuffer
    source_bbox: BBox
    tokens: int


@dataclass(frozen=True, eq=False)
class EpisodeState:
    """Interaction history H_t. Immutable; step() returns a new state."""

    query: str
    original: ImageBuffer
    observations: tuple[Observation, ...]
    actions: tuple[Action, ...]
    turn: int
    tokens_used: int
    status: EpisodeStatus
    config: EpisodeConfig
    budget: Optional[int]
    error: Optional[str] = None

    @property
    def overview(self) -> Observation:
        return self.observations[0]

    @property
    def running(self) -> bool:
        return self.status == EpisodeStatus.RUNNING

    @property
    def visual_tokens(self) -> int:
        return sum(obs.tokens for obs in self.observations)

    @property
    def focus_count(self) -> int:
        return sum(isinstance(a, Focus) for a in self.actions)


@dataclass(frozen=True, eq=False)
class StepRecord:
    """One policy decision and the state it was taken in.

    Text-emitting policies set `text`; the parsed action is filled in after
    the environment applies it. `applied` is False for a turn the environment
    spent without recording an action (skip mode).
    """

    state: EpisodeState
    action: Optional[Action] = None
    text: Optional[str] = None
    arm: Optional[int] = None
    log_prob: float = 0.0
    features: Optional[np.ndarray] = None
    version: int = 0
    think: str = ""
    applied: bool = True


@dataclass(frozen=True, eq=False)
class Trajectory:
    episode: EpisodeState
    answer: Optional[str]
    reward: int
    gold: str
    steps: tuple[StepRecord, ...] = ()
    scene_seed: Optional[int] = None

    @property
    def focus_turns(self) -> int:
        return self.episode.focus_count

    @property
    def is_direct(self) -> bool:
        return self.focus_turns == 0

    @property
    def visual_tokens(self) -> int:
        return self.episode.visual_tokens

    @property
    def status(self) -> EpisodeStatus:
        return self.episode.status


def behavior_ratios(rollouts_per_query: Sequence[Sequence[bool]]) -> tuple[float, float]:
    """(all_direct, all_focus) from per-query lists of 'rollout focused' flags."""
    if not rollouts_per_query:
        return 0.0, 0.0
    direct = sum(not any(flags) for flags in rollouts_per_query)
    focus = sum(all(flags) for flags in rollouts_per_query)
    n = len(rollouts_per_query)
    return direct / n, focus / n


def active_budget(image: ImageBuffer, config: EpisodeConfig) -> Optional[int]:
    """Per-view token budget in force, or None when unconstrained."""
    if not config.constrained:
        return None
    if config.fixed_budget_override is not None:
        return config.fixed_budget_override
    return compute_budget(image, config.budget)


def _observe(region: ImageBuffer, source: BBox, budget: Optional[int], patch_size: int) -> Observation:
    view = region if budget is None else downsample(region, budget, patch_size)
    return Observation(view=view, source_bbox=source, tokens=view.tokens(patch_size))


def reset(scene_image: ImageBuffer, query: str, config: EpisodeConfig) -> EpisodeState:
    """Start an episode with the global glimpse v0 = D(X, B)."""
    budget = active_budget(scene_image, config)
    patch = config.budget.patch_size
    view = scene_image if budget is None else budgeted_view(scene_image, budget, patch)
    glimpse = Observation(
        view=view,
        source_bbox=BBox(0, 0, scene_image.width, scene_image.height),
        tokens=view.tokens(patch),
    )
    return EpisodeState(
        query=query,
        original=scene_image,
        observations=(glimpse,),
        actions=(),
        turn=0,
        tokens_used=glimpse.tokens + TEXT_TOKENS_PER_TURN,
        status=EpisodeStatus.RUNNING,
        config=config,
        budget=budget,
    )


def to_original_frame(bbox: BBox, state: EpisodeState) -> BBox:
    """Map an overview-frame box onto the original image."""
    overview = state.overview.view
    sx = state.original.width / overview.width
    sy = state.original.height / overview.height
    return bbox.scale(sx, sy)


def to_overview_frame(bbox: BBox, state: EpisodeState) -> BBox:
    overview = state.overview.view
    sx = overview.width / state.original.width
    sy = overview.height / state.original.height
    return bbox.scale(sx, sy)


def _protocol_failure(state: EpisodeState, message: str) -> EpisodeState:
    if state.config.on_protocol_error == "terminate":
        return replace(state, status=EpisodeStatus.PROTOCOL_ERROR, error=message)
    # skip: the turn is spent, nothing is observed
    turn = state.turn + 1
    status = EpisodeStatus.TRUNCATED_TURNS if turn >= state.config.max_turns else EpisodeStatus.RUNNING
    return replace(
        state,
        turn=turn,
        tokens_used=state.tokens_used + TEXT_TOKENS_PER_TURN,
        status=status,
        error=message,
    )


def step(state: EpisodeState, action: Action) -> EpisodeState:
    """Apply one action and return the next state."""
    if not state.running:
        raise EpisodeFinished(f"Episode already ended with status {state.status.value}")

    turn = state.turn + 1
    tokens_used = state.tokens_used + TEXT_TOKENS_PER_TURN
    actions = state.actions + (action,)

    if isinstance(action, Answer):
        return replace(state, actions=actions, turn=turn, tokens_used=tokens_used, status=EpisodeStatus.ANSWERED)
    if not isinstance(action, Focus):
        raise UnknownAction(f"Unsupported action {action!r}")

    if turn >= state.config.max_turns:
        # The last turn has to answer; a focus here ends the episode unexecuted
        return replace(
            state, actions=actions, turn=turn, tokens_used=tokens_used, status=EpisodeStatus.TRUNCATED_TURNS
        )

    patch = state.config.budget.patch_size
    observations = []
    try:
        for bbox in action.bboxes:
            source = to_original_frame(bbox, state).clamp(state.original.width, state.original.height)
            region = crop(state.original, source)
            observations.append(_observe(region, source, state.budget, patch))
    except EmptyRegion as e:
        return _protocol_failure(state, str(e))

    tokens_used += sum(obs.tokens for obs in observations)
    status = EpisodeStatus.RUNNING
    if tokens_used > state.config.context_limit:
        status = EpisodeStatus.TRUNCATED_CONTEXT
    return replace(
        state,
        observations=state.observations + tuple(observations),
        actions=actions,
        turn=turn,
        tokens_used=tokens_used,
        status=status,
    )


def action_from_turn(turn: TurnContent) -> Action:
    if turn.tool_call is not None:
        return Focus(turn.tool_call.bboxes)
    return Answer(turn.answer)


def step_text(state: EpisodeState, text: str) -> EpisodeState:
    """Parse an assistant turn with the strict grammar, then step()."""
    if not state.running:
        raise EpisodeFinished(f"Episode already ended with status {state.status.value}")
    try:
        turn = parse_turn(text)
    except ProtocolError as e:
        return _protocol_failure(state, f"{type(e).__name__}: {e}")
    return step(state, action_from_turn(turn))


def normalize_answer(text: str) -> str:
    return text.strip().casefold()


def final_answer(state: EpisodeState) -> Optional[str]:
    if state.status == EpisodeStatus.ANSWERED and isinstance(state.actions[-1], Answer):
        return state.actions[-1].text
    return None


def compute_reward(trajectory: Union[Trajectory, EpisodeState], gold_answer: str) -> int:
    """1 iff the episode ended in an answer that matches gold after case-fold and trim."""
    state = trajectory.episode if isinstance(trajectory, Trajectory) else trajectory
    answer = final_answer(state)
    if answer is None:
        return 0
    return int(normalize_answer(answer) == normalize_answer(gold_answer))


def run_episode(
    policy: "Policy",
    scene: "Scene",
    query: str,
    config: EpisodeConfig,
    rng_seed,
    greedy: bool = False,
) -> Trajectory:
    """Budgeted rollout: glimpse, then act/observe until answered or truncated."""
    rng = np.random.default_rng(rng_seed)
    state = reset(scene.image, query, config)
    steps = []
    while state.running:
        decision = policy.decide(state, rng, greedy=greedy)
        if decision.text is not None:
            state = step_text(state, decision.text)
        else:
            state = step(state, decision.action)
        applied = len(state.actions) > len(decision.state.actions)
        if applied and decision.text is not None:
            decision = replace(decision, action=state.actions[-1])
        steps.append(replace(decision, applied=applied))

    return Trajectory(
        episode=state,
        answer=final_answer(state),
        reward=compute_reward(state, scene.gold),
        gold=scene.gold,
        steps=tuple(steps),
        scene_seed=scene.seed,
    )


def replay(scene_image: ImageBuffer, query: str, actions: Sequence[Action], config: EpisodeConfig) -> list[EpisodeState]:
    """Re-execute recorded actions; returns the state before each action plus the final one."""
    states = [reset(scene_image, query, config)]
    for action in actions:
        if not states[-1].running:
            break
        states.append(step(states[-1], action))
    return states


# --- Conversation records ---

def default_think(action: Action) -> str:
    if isinstance(action, Focus):
        boxes = ", ".join(str(b.as_list()) for b in action.bboxes)
        return f"The glyph is too small to read at this scale. Zooming into {boxes}."
    return f"The zoomed view shows the glyph clearly: {action.text}."


def to_conversation_record(trajectory: Trajectory, source: str = "rollout") -> dict:
    """Transcript as an alternating gpt/human record.

    Images are referenced by content digest in observation order.
    """
    episode = trajectory.episode
    turns = [{"from": ROLE_ENVIRONMENT, "value": IMAGE_TOKEN + "\n" + render_user_prompt(episode.query)}]
    images = [episode.overview.view.digest()]
    thinks = [s.think for s in trajectory.steps if s.applied and s.action is not None]

    observed = list(episode.observations[1:])
    bboxes = []
    for i, action in enumerate(episode.actions):
        think = thinks[i] if i < len(thinks) and thinks[i].strip() else default_think(action)
        if isinstance(action, Focus):
            content = TurnContent(think=think, tool_call=ToolCall(bboxes=action.bboxes))
        else:
            content = TurnContent(think=think, answer=action.text)
        turns.append({"from": ROLE_ASSISTANT, "value": serialize_turn(content)})

        if isinstance(action, Focus):
            bboxes.extend(b.as_list() for b in action.bboxes)
            views = observed[:len(action.bboxes)]
            observed = observed[len(action.bboxes):]
            if views:
                turns.append({"from": ROLE_ENVIRONMENT, "value": render_tool_response(views).content})
                images.extend(obs.view.digest() for obs in views)

    overview = episode.overview.view
    return {
        "meta": {
            "query": episode.query,
            "gold": trajectory.gold,
            "source": source,
            "bboxes": bboxes,
            "image_size": [episode.original.width, episode.original.height],
            "overview_size": [overview.width, overview.height],
            "scene_seed": trajectory.scene_seed,
        },
        "turns": turns,
        "images": images,
    }


def record_actions(record: dict) -> tuple[list[Action], list[str]]:
    """Actions and think texts of the assistant turns of a record."""
    actions, thinks = [], []
    try:
        for turn in record["turns"]:
            if turn["from"] != ROLE_ASSISTANT:
                continue
            content = parse_turn(turn["value"])
            actions.append(action_from_turn(content))
            thinks.append(content.think)
    except (KeyError, TypeError) as e:
        raise ParseError(f"Unreadable conversation record: {e}") from e
    return actions, thinks


def trajectory_from_record(record: dict, scene: "Scene", config: EpisodeConfig) -> Trajectory:
    """Rebuild a trainable trajectory by replaying a record against its scene."""
    actions, thinks = record_actions(record)
    states = replay(scene.image, scene.query, actions, config)
    final = states[-1]
    steps = tuple(
        StepRecord(state=state, action=action, think=think)
        for state, action, think in zip(states[:-1], actions, thinks)
    )
    return Trajectory(
        episode=final,
        answer=final_answer(final),
        reward=compute_reward(final, scene.gold),
        gold=scene.gold,
        steps=steps,
        scene_seed=scene.seed,
    )
