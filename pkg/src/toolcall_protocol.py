"""
Turn grammar for the focus tool.
Parses and renders assistant turns (<think> plus one <tool_call> or <answer>),
tool-call JSON payloads and environment tool responses.
"""
from __future__ import annotations

import html
import json
import re
from dataclasses import dataclass
from typing import Optional, Sequence

from src.budget_engine import BBox
from src.errors import (
    BadCoordinateArity,
    BBoxCountOutOfRange,
    BothOrNeitherTerminal,
    EmptyToolResponse,
    MalformedTags,
    MalformedToolCall,
    MissingThink,
    UnknownTool,
)

TOOL_NAME = "focus"
MAX_BBOXES = 3
IMAGE_TOKEN = "<image>"

# Conversation roles, in the on-disk record vocabulary
ROLE_ASSISTANT = "gpt"
ROLE_ENVIRONMENT = "human"

RESERVED_TAGS = ("think", "tool_call", "answer", "tool_response")
_TAG_RE = re.compile(r"<(/?)(think|tool_call|answer|tool_response)>")

# Overview frame size of the distillation prompt: 256 patches of 28 px
MAX_VIEW_PIXELS = 28 * 28 * 16 * 16


@dataclass(frozen=True)
class ToolCall:
    """A focus request: 1-3 boxes in the overview frame."""

    bboxes: tuple[BBox, ...]
    name: str = TOOL_NAME

    def __post_init__(self):
        if self.name != TOOL_NAME:
            raise UnknownTool(f"Unknown tool '{self.name}'")
        if not 1 <= len(self.bboxes) <= MAX_BBOXES:
            raise BBoxCountOutOfRange(f"Expected 1-{MAX_BBOXES} bboxes, got {len(self.bboxes)}")


@dataclass(frozen=True)
class TurnContent:
    """One assistant turn: a think block plus exactly one terminal block."""

    think: str
    tool_call: Optional[ToolCall] = None
    answer: Optional[str] = None

    def __post_init__(self):
        if not self.think.strip():
            raise MissingThink("Turn has an empty <think> block")
        if (self.tool_call is None) == (self.answer is None):
            raise BothOrNeitherTerminal("Turn needs exactly one of <tool_call> or <answer>")


@dataclass(frozen=True)
class Message:
    """A conversation message in record vocabulary ("gpt" or "human")."""

    role: str
    content: str

    @property
    def image_count(self) -> int:
        return count_images(self.content)

    def to_dict(self) -> dict:
        return {"from": self.role, "value": self.content}


def count_images(text: str) -> int:
    return text.count(IMAGE_TOKEN)


def strip_code_fence(content: str) -> str:
    """Unwrap a ```json fenced block, which model outputs often carry."""
    if "```json" in content:
        content = content.split("```json")[1].split("```")[0]
    elif "```" in content:
        content = content.split("```")[1].split("```")[0]
    return content.strip()


def parse_tool_call(text: str) -> ToolCall:
    """Decode and validate the interior of a <tool_call> block."""
    payload = strip_code_fence(text)
    try:
        data = json.loads(payload)
    except json.JSONDecodeError as e:
        raise MalformedToolCall(f"Tool call is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise MalformedToolCall("Tool call must be a JSON object")

    name = data.get("name")
    if name != TOOL_NAME:
        raise UnknownTool(f"Unknown tool '{name}'")

    arguments = data.get("arguments")
    if isinstance(arguments, str):
        # Some emitters double-encode the arguments object
        try:
            arguments = json.loads(arguments)
        except json.JSONDecodeError as e:
            raise MalformedToolCall(f"Tool arguments are not valid JSON: {e}") from e
    if not isinstance(arguments, dict) or not isinstance(arguments.get("bboxes"), list):
        raise MalformedToolCall("Tool call arguments need a 'bboxes' list")

    raw_boxes = arguments["bboxes"]
    if not 1 <= len(raw_boxes) <= MAX_BBOXES:
        raise BBoxCountOutOfRange(f"Expected 1-{MAX_BBOXES} bboxes, got {len(raw_boxes)}")

    boxes = []
    for raw in raw_boxes:
        if not isinstance(raw, list) or len(raw) != 4:
            raise BadCoordinateArity(f"bbox must have 4 coordinates, got {raw!r}")
        # bool is an int subclass; floats are never truncated
        if not all(type(v) is int for v in raw):
            raise BadCoordinateArity(f"bbox coordinates must be integers, got {raw!r}")
        boxes.append(BBox.from_list(raw))
    return ToolCall(bboxes=tuple(boxes))


def parse_turn(text: str) -> TurnContent:
    """Parse one assistant turn under the strict format.

    The turn must be exactly <think>...</think> followed by one <tool_call> or
    <answer> block, with only whitespace around and between them.
    """
    body = text.strip()
    tags = list(_TAG_RE.finditer(body))
    opens = [m.group(2) for m in tags if not m.group(1)]

    if "tool_response" in (m.group(2) for m in tags):
        raise MalformedTags("Assistant turns cannot contain <tool_response>")
    for name in ("tool_call", "answer"):
        if opens.count(name) > 1:
            raise MalformedTags(f"More than one <{name}> block")
    if "think" not in opens:
        raise MissingThink("Turn has no <think> block")
    has_call = "tool_call" in opens
    has_answer = "answer" in opens
    if has_call == has_answer:
        raise BothOrNeitherTerminal("Turn needs exactly one of <tool_call> or <answer>")

    terminal = "tool_call" if has_call else "answer"
    expected = [("", "think"), ("/", "think"), ("", terminal), ("/", terminal)]
    if [(m.group(1), m.group(2)) for m in tags] != expected:
        raise MalformedTags("Tags must be <think></think> then one terminal block, unnested")

    think_open, think_close, term_open, term_close = tags
    if think_open.start() != 0 or term_close.end() != len(body):
        raise MalformedTags("Text outside the turn blocks")
    if body[think_close.end():term_open.start()].strip():
        raise MalformedTags("Text between </think> and the terminal block")

    think = html.unescape(body[think_open.end():think_close.start()])
    if not think.strip():
        raise MissingThink("Turn has an empty <think> block")
    inner = body[term_open.end():term_close.start()]

    if has_call:
        return TurnContent(think=think, tool_call=parse_tool_call(inner))
    return TurnContent(think=think, answer=html.unescape(inner))


def serialize_tool_call(call: ToolCall) -> str:
    return json.dumps({"name": call.name, "arguments": {"bboxes": [b.as_list() for b in call.bboxes]}})


def serialize_turn(turn: TurnContent) -> str:
    """Render a turn so that parse_turn() returns it unchanged."""
    think = f"<think>{html.escape(turn.think, quote=False)}</think>"
    if turn.tool_call is not None:
        return f"{think}<tool_call>{serialize_tool_call(turn.tool_call)}</tool_call>"
    return f"{think}<answer>{html.escape(turn.answer, quote=False)}</answer>"


def render_tool_response(views: Sequence) -> Message:
    """Environment message with one <image> placeholder per returned view."""
    if not views:
        raise EmptyToolResponse("A tool response needs at least one view")
    if len(views) > MAX_BBOXES:
        raise BBoxCountOutOfRange(f"At most {MAX_BBOXES} views per tool response, got {len(views)}")
    return Message(ROLE_ENVIRONMENT, "<tool_response>" + IMAGE_TOKEN * len(views) + "</tool_response>")


def tool_schema(reference: str = "first") -> dict:
    """JSON schema of the focus tool; boxes live in the frame of the `reference` image."""
    if reference == "first":
        description = "Request a high-resolution local region of the first image and zoom in"
    else:
        description = (
            "Request a detailed view of the overview image from the original image pixel space. "
            "The returned focused image will still be constrained to MAX_VIEW_PIXELS if too large."
        )
    return {
        "type": "function",
        "function": {
            "name": TOOL_NAME,
            "description": description,
            "parameters": {
                "type": "object",
                "properties": {
                    "bboxes": {
                        "type": "array",
                        "minItems": 1,
                        "maxItems": MAX_BBOXES,
                        "items": {
                            "type": "array",
                            "items": {"type": "integer"},
                            "minItems": 4,
                            "maxItems": 4,
                            "description": (
                                "The bounding box of the region to crop, as [x1, y1, x2, y2] "
                                f"in ABSOLUTE PIXEL COORDINATES of the {reference} image."
                            ),
                        },
                        "description": "A list of bounding boxes to zoom in on. You can request 1-3 bboxes at a turn.",
                    }
                },
                "required": ["bboxes"],
            },
        },
    }


def render_system_prompt(reference: str = "first") -> str:
    """System prompt for rollouts.

    reference="first" is the RL training prompt; reference="overview" adds the
    fixed-view constraint used when distilling demonstration trajectories.
    """
    if reference not in ("first", "overview"):
        raise ValueError(f"reference must be 'first' or 'overview', got {reference!r}")

    lines = ["You are a helpful assistant."]
    if reference == "overview":
        lines += [
            "A user gives a image with a question. Solve it under a fixed view size:",
            f"- MAX_VIEW_PIXELS = 28 * 28 * 16 * 16 pixels ({MAX_VIEW_PIXELS}).",
            "- The image is shown to you as an `overview image` no larger than MAX_VIEW_PIXELS.",
            "- Call the **focus** tool for detailed views of regions. Both overview and focused regions "
            "are constrained by MAX_VIEW_PIXELS.",
            "Keep focusing until you are sure the question can be solved.",
        ]
    lines += [
        "",
        "# Tools",
        "You are provided with the function signature within <tools></tools> XML tags:",
        "<tools>",
        json.dumps(tool_schema(reference), indent=2),
        "</tools>",
        "",
        "# How to call a tool",
        "Return a json object with function name and arguments within <tool_call></tool_call> XML tags:",
        "<tool_call>",
        '{"name": <function-name>, "arguments": <args-json-object>}',
        "</tool_call>",
        "",
        "Example:",
        "<tool_call>",
        '{"name": "focus", "arguments": {"bboxes": [[10, 20, 100, 200]]}}',
        "</tool_call>",
    ]
    return "\n".join(lines)


def render_user_prompt(query: str) -> str:
    return "\n".join([
        "Think first, call focus if needed, then answer if you are confident.",
        "Format strictly as:",
        "  <think>...</think>",
        "  <tool_call>...</tool_call>  (if tools needed)",
        "  <answer>...</answer>",
        "Keep reasoning inside <think>...</think> based on what the focus tool returns.",
        "Here is the question:",
        query,
    ])
