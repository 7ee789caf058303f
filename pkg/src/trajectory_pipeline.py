"""
Conversation-record pipeline.
Structural validation of multi-turn focus records, geometric rescaling into
the overview frame, IoU deduplication, the RL data filters, rejection
sampling of demonstration trajectories and JSON-lines record I/O.
"""
from __future__ import annotations

import copy
import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from src.budget_engine import BBox, ImageBuffer, round_half_away
from src.errors import IoFailure, LabError, ParseError, ProtocolError
from src.rollout_env import EpisodeConfig, Focus, Trajectory, run_episode, to_conversation_record
from src.synthetic_scenes import Scene, SceneSet
from src.toolcall_protocol import (
    MAX_BBOXES,
    ROLE_ASSISTANT,
    ROLE_ENVIRONMENT,
    count_images,
    parse_tool_call,
)

THINK_RE = re.compile(r"<think>(.*?)</think>", re.DOTALL)
TOOL_CALL_RE = re.compile(r"<tool_call>(.*?)</tool_call>", re.DOTALL)
COORD_MENTION_RE = re.compile(r"\[\s*-?\d+\s*,\s*-?\d+\s*,\s*-?\d+\s*,\s*-?\d+\s*\]")
NUMBER_RE = re.compile(r"-?\d+")

DIFFICULTY_BAND = (0.125, 0.375)
MIN_RESOLUTION = 512
MAX_ZOOM_TURNS = 3


@dataclass(frozen=True)
class ValidationReport:
    passed: bool
    failures: tuple[tuple[int, str], ...] = ()

    @property
    def failed_checks(self) -> set[int]:
        return {check for check, _ in self.failures}


@dataclass(frozen=True)
class RescaleMap:
    """Coordinate scale (s_x, s_y); (W_ov / W_orig, H_ov / H_orig) maps into the overview frame."""

    sx: float
    sy: float

    def __post_init__(self):
        if self.sx <= 0 or self.sy <= 0:
            raise LabError(f"Scale factors must be positive, got ({self.sx}, {self.sy})")

    @classmethod
    def from_sizes(cls, original: Sequence[int], overview: Sequence[int]) -> "RescaleMap":
        return cls(sx=overview[0] / original[0], sy=overview[1] / original[1])

    def inverse(self) -> "RescaleMap":
        return RescaleMap(sx=1 / self.sx, sy=1 / self.sy)

    def apply(self, coords: Sequence[int]) -> list[int]:
        """Round half away from zero; boxes collapsed to zero width or height get one pixel back."""
        x1, y1, x2, y2 = BBox.from_list(coords).scale(self.sx, self.sy).as_list()
        if x2 == x1:
            x2 = x1 + 1
        if y2 == y1:
            y2 = y1 + 1
        return [x1, y1, x2, y2]


# --- Record structure helpers ---

def _turns(record: dict) -> list[dict]:
    if not isinstance(record, dict):
        raise ParseError("Record must be a JSON object")
    turns = record.get("turns")
    if not isinstance(turns, list) or not turns:
        raise ParseError("Record needs a non-empty 'turns' list")
    for turn in turns:
        if not isinstance(turn, dict) or not isinstance(turn.get("from"), str) or not isinstance(turn.get("value"), str):
            raise ParseError(f"Malformed turn {turn!r}")
    if not isinstance(record.get("meta", {}), dict):
        raise ParseError("Record 'meta' must be an object")
    return turns


def _conversation(turns: list[dict]) -> list[dict]:
    """Turns after the initial query, if the record opens with one."""
    if turns and turns[0]["from"] == ROLE_ENVIRONMENT:
        return turns[1:]
    return turns


def tool_call_boxes(text: str) -> list[list[list[int]]]:
    """Box lists of every tool call in an assistant turn (normally zero or one)."""
    return [[b.as_list() for b in parse_tool_call(m.group(1)).bboxes] for m in TOOL_CALL_RE.finditer(text)]


def record_turn_boxes(record: dict) -> list[list[list[int]]]:
    """Per assistant turn with a tool call, the boxes it requested."""
    boxes = []
    for turn in _turns(record):
        if turn["from"] == ROLE_ASSISTANT:
            boxes.extend(tool_call_boxes(turn["value"]))
    return boxes


# --- Validation ---

def validate(record: dict) -> ValidationReport:
    """Run the four structural checks on a record.

    1. at least 3 conversation turns, strictly alternating gpt/human
    2. every gpt turn has a non-empty <think> block
    3. each tool response has one <image> per box of the preceding call (1-3)
    4. the multiset of boxes across tool calls equals meta["bboxes"]
    """
    turns = _turns(record)
    conversation = _conversation(turns)
    failures: list[tuple[int, str]] = []

    # 1
    if len(conversation) < 3:
        failures.append((1, f"Only {len(conversation)} turns after the query, need at least 3"))
    roles = [t["from"] for t in conversation]
    if any(r not in (ROLE_ASSISTANT, ROLE_ENVIRONMENT) for r in roles):
        failures.append((1, f"Unknown roles in {sorted(set(roles))}"))
    elif roles and roles[0] != ROLE_ASSISTANT:
        failures.append((1, "Conversation must start from the assistant side"))
    elif any(a == b for a, b in zip(roles, roles[1:])):
        failures.append((1, "Roles do not strictly alternate"))

    # 2
    for i, turn in enumerate(conversation):
        if turn["from"] == ROLE_ASSISTANT:
            match = THINK_RE.search(turn["value"])
            if not match or not match.group(1).strip():
                failures.append((2, f"Assistant turn {i} has no <think> block"))

    # 3
    used: list[tuple[int, ...]] = []
    for i, turn in enumerate(conversation):
        if turn["from"] != ROLE_ASSISTANT:
            continue
        try:
            calls = tool_call_boxes(turn["value"])
        except ProtocolError as e:
            failures.append((3, f"Assistant turn {i} has an unreadable tool call: {e}"))
            continue
        if not calls:
            continue
        boxes = calls[0]
        used.extend(tuple(b) for call in calls for b in call)
        response = conversation[i + 1] if i + 1 < len(conversation) else None
        if response is None or response["from"] != ROLE_ENVIRONMENT:
            failures.append((3, f"Tool call in turn {i} has no tool response"))
            continue
        images = count_images(response["value"])
        if images != len(boxes) or not 1 <= images <= MAX_BBOXES:
            failures.append((3, f"Turn {i + 1} returns {images} images for {len(boxes)} bboxes"))
    images = record.get("images")
    if isinstance(images, list):
        placeholders = sum(count_images(t["value"]) for t in turns)
        if placeholders != len(images):
            failures.append((3, f"{len(images)} image references for {placeholders} placeholders"))

    # 4
    reference = record.get("meta", {}).get("bboxes")
    if not isinstance(reference, list):
        failures.append((4, "meta has no reference bboxes"))
    else:
        try:
            expected = Counter(tuple(int(v) for v in b) for b in reference)
        except (TypeError, ValueError):
            raise ParseError(f"meta bboxes are not integer boxes: {reference!r}")
        if Counter(used) != expected:
            failures.append((4, f"Used bboxes {sorted(used)} differ from reference {sorted(expected.elements())}"))

    return ValidationReport(passed=not failures, failures=tuple(failures))


# --- Rescaling ---

def _rewrite_mentions(text: str, mapping: dict[tuple[int, ...], list[int]]) -> str:
    """Swap bracketed [x1, y1, x2, y2] mentions of known boxes, keeping their spacing."""

    def swap(match: re.Match) -> str:
        mention = match.group(0)
        old = tuple(int(v) for v in NUMBER_RE.findall(mention))
        new = mapping.get(old)
        if new is None:
            return mention
        values = iter(new)
        return NUMBER_RE.sub(lambda _: str(next(values)), mention)

    return COORD_MENTION_RE.sub(swap, text)


def rescale(record: dict, rescale_map: RescaleMap) -> dict:
    """Map every box of a record (tool calls, think mentions, meta) through rescale_map."""
    turns = _turns(record)
    result = copy.deepcopy(record)

    mapping: dict[tuple[int, ...], list[int]] = {}
    for turn in turns:
        if turn["from"] == ROLE_ASSISTANT:
            for call in tool_call_boxes(turn["value"]):
                for box in call:
                    mapping[tuple(box)] = rescale_map.apply(box)
    for box in result.get("meta", {}).get("bboxes", []) or []:
        mapping.setdefault(tuple(box), rescale_map.apply(box))

    # Identity maps leave text byte-identical
    if all(list(old) == new for old, new in mapping.items()):
        return result

    for turn in result["turns"]:
        if turn["from"] != ROLE_ASSISTANT:
            continue
        value = turn["value"]
        value = THINK_RE.sub(lambda m: "<think>" + _rewrite_mentions(m.group(1), mapping) + "</think>", value)

        def rewrite_call(match: re.Match) -> str:
            call = parse_tool_call(match.group(1))
            payload = {"name": call.name, "arguments": {"bboxes": [mapping[tuple(b.as_list())] for b in call.bboxes]}}
            return "<tool_call>" + json.dumps(payload) + "</tool_call>"

        turn["value"] = TOOL_CALL_RE.sub(rewrite_call, value)

    meta = result.get("meta", {})
    if isinstance(meta.get("bboxes"), list):
        meta["bboxes"] = [mapping[tuple(b)] for b in meta["bboxes"]]
    return result


# --- Filters ---

def iou(b1: BBox, b2: BBox) -> float:
    inter = b1.intersection(b2).area
    union = b1.area + b2.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def _focus_turn_boxes(item: Union[Trajectory, dict]) -> list[list[BBox]]:
    if isinstance(item, dict):
        return [[BBox.from_list(b) for b in call] for call in record_turn_boxes(item)]
    return [list(a.bboxes) for a in item.episode.actions if isinstance(a, Focus)]


def zoom_turns(item: Union[Trajectory, dict]) -> int:
    return len(_focus_turn_boxes(item))


def dedup_filter(item: Union[Trajectory, dict], threshold: float = 0.5) -> bool:
    """Keep unless two different turns focus regions with IoU >= threshold."""
    if not 0 < threshold <= 1:
        raise LabError(f"IoU threshold must be in (0, 1], got {threshold}")
    turns = _focus_turn_boxes(item)
    for i in range(len(turns)):
        for j in range(i + 1, len(turns)):
            if any(iou(a, b) >= threshold for a in turns[i] for b in turns[j]):
                return False
    return True


def length_filter(item: Union[Trajectory, dict], max_zoom_turns: int = MAX_ZOOM_TURNS) -> bool:
    """Keep trajectories with at most max_zoom_turns focus turns."""
    return zoom_turns(item) <= max_zoom_turns


def single_pass_filter(item: Union[Trajectory, dict]) -> bool:
    """Keep only trajectories that call the focus tool at least once."""
    return zoom_turns(item) > 0


def resolution_filter(image: ImageBuffer) -> bool:
    """Keep images larger than 512 x 512 in both dimensions."""
    return image.width > MIN_RESOLUTION and image.height > MIN_RESOLUTION


def rollout_accuracy(
    scene: Scene,
    policy,
    env_config: EpisodeConfig,
    n: int = 8,
    seed: int = 0,
    query: Optional[str] = None,
) -> float:
    """Mean reward of n seeded rollouts; episode i is seeded by (seed, scene.seed, i)."""
    query = scene.query if query is None else query
    rewards = [run_episode(policy, scene, query, env_config, (seed, scene.seed, i)).reward for i in range(n)]
    return float(np.mean(rewards))


def difficulty_filter(
    query: str,
    scene: Scene,
    policy,
    env_config: EpisodeConfig,
    n: int = 8,
    band: tuple[float, float] = DIFFICULTY_BAND,
    seed: int = 0,
) -> bool:
    """Keep scenes whose mean reward over n seeded rollouts lies in band (inclusive)."""
    if n < 1:
        raise LabError(f"n must be at least 1, got {n}")
    lo, hi = band
    if not 0 <= lo <= hi <= 1:
        raise LabError(f"band must satisfy 0 <= lo <= hi <= 1, got {band}")
    return lo <= rollout_accuracy(scene, policy, env_config, n=n, seed=seed, query=query) <= hi


def rejection_sample(
    scene_set: Iterable[Scene],
    demonstrator,
    env_config: EpisodeConfig,
    k: int = 4,
    iou_threshold: float = 0.5,
    seed: int = 0,
    max_zoom_turns: int = MAX_ZOOM_TURNS,
    log_every: int = 0,
) -> list[Trajectory]:
    """One correct, non-redundant demonstration per scene, first by seed order."""
    if k < 1:
        raise LabError(f"k must be at least 1, got {k}")
    dataset = []
    for index, scene in enumerate(scene_set):
        for j in range(k):
            trajectory = run_episode(demonstrator, scene, scene.query, env_config, (seed, scene.seed, j))
            if (
                trajectory.reward == 1
                and dedup_filter(trajectory, iou_threshold)
                and length_filter(trajectory, max_zoom_turns)
            ):
                dataset.append(trajectory)
                break
        if log_every and (index + 1) % log_every == 0:
            print(f"    {index + 1} scenes sampled, {len(dataset)} kept")
    return dataset


# --- Record I/O ---

def asset_dir_for(path: Path) -> Path:
    path = Path(path)
    return path.parent / f"{path.stem}_assets"


def write_records(records: Iterable[dict], path: Path, views: Optional[dict[str, ImageBuffer]] = None) -> Path:
    """One JSON record per line; views go to <stem>_assets/<sha256>.npy."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for record in records:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        if views:
            assets = asset_dir_for(path)
            assets.mkdir(parents=True, exist_ok=True)
            for digest, view in views.items():
                target = assets / f"{digest}.npy"
                if not target.exists():
                    np.save(target, view.data)
    except OSError as e:
        raise IoFailure(f"Could not write records to {path}: {e}") from e
    return path


def read_records(path: Path) -> list[dict]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise IoFailure(f"Could not read records from {path}: {e}") from e
    records = []
    for number, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}:{number}: {e}") from e
    return records


def load_view(asset_dir: Path, digest: str) -> ImageBuffer:
    try:
        return ImageBuffer.from_array(np.load(Path(asset_dir) / f"{digest}.npy"))
    except OSError as e:
        raise IoFailure(f"Missing view asset {digest}: {e}") from e


def export_trajectories(trajectories: Sequence[Trajectory], path: Path, source: str = "rollout") -> Path:
    """Write trajectories as conversation records plus their view assets."""
    records = []
    views = {}
    for trajectory in trajectories:
        records.append(to_conversation_record(trajectory, source))
        for obs in trajectory.episode.observations:
            views.setdefault(obs.view.digest(), obs.view)
    return write_records(records, path, views)


def scene_for_record(record: dict, scene_set: SceneSet):
    """Regenerate the scene a record was produced from."""
    seed = record.get("meta", {}).get("scene_seed")
    if seed is None or seed not in scene_set.seeds:
        raise ParseError(f"Record has no scene seed from this scene set: {seed!r}")
    return scene_set[scene_set.seeds.index(seed)]
