"""
Synthetic visual-search scenes.
Renders a grid of binary glyphs on a gray canvas, tints the target cell so it
can be located from a coarse overview, and decodes glyphs back from views.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image, ImageDraw

from src.budget_engine import BBox, ImageBuffer
from src.errors import IoFailure, LabError, SpecInfeasible

BACKGROUND_RGB = (128, 128, 128)
MARKER_RGB = (217, 115, 115)
# R - (G + B) / 2 of the marker color, in [0, 1] units
MARKER_TINT = (MARKER_RGB[0] - (MARKER_RGB[1] + MARKER_RGB[2]) / 2) / 255

# Glyphs rendered below half size are not decodable
LEGIBLE_SCALE = 0.5
DECODE_MARGIN = 0.25

NATO_WORDS = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel",
    "india", "juliett", "kilo", "lima", "mike", "november", "oscar", "papa",
    "quebec", "romeo", "sierra", "tango", "uniform", "victor", "whiskey",
    "xray", "yankee", "zulu",
]


class Legibility(str, Enum):
    LEGIBLE = "legible"
    ILLEGIBLE = "illegible"


@dataclass(frozen=True)
class SceneSpec:
    """Layout of a scene family. Scenes are a pure function of (spec, seed)."""

    canvas: int = 1792
    grid: int = 8
    glyph_size: int = 16
    num_classes: int = 8
    distractor_density: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.grid < 1 or self.canvas % self.grid != 0:
            raise SpecInfeasible(f"canvas {self.canvas} is not a multiple of grid {self.grid}")
        if self.glyph_size < 1 or 2 * self.glyph_size > self.cell_size:
            # The tinted margin around the glyph has to dominate the cell
            raise SpecInfeasible(
                f"glyph_size {self.glyph_size} needs a cell of at least {2 * self.glyph_size} px, "
                f"cell is {self.cell_size}"
            )
        if self.num_classes < 2:
            raise SpecInfeasible(f"num_classes must be at least 2, got {self.num_classes}")
        if not 0.0 <= self.distractor_density <= 1.0:
            raise SpecInfeasible(f"distractor_density must be in [0, 1], got {self.distractor_density}")

    @property
    def cell_size(self) -> int:
        return self.canvas // self.grid

    @property
    def glyph_offset(self) -> int:
        return (self.cell_size - self.glyph_size) // 2

    @property
    def labels(self) -> list[str]:
        return class_labels(self.num_classes)

    def cell_bbox(self, row: int, col: int) -> BBox:
        cell = self.cell_size
        return BBox(col * cell, row * cell, (col + 1) * cell, (row + 1) * cell)

    def glyph_bbox(self, row: int, col: int) -> BBox:
        x = col * self.cell_size + self.glyph_offset
        y = row * self.cell_size + self.glyph_offset
        return BBox(x, y, x + self.glyph_size, y + self.glyph_size)


@dataclass(frozen=True, eq=False)
class Scene:
    """One rendered scene: image X, query Q and gold answer Y*."""

    image: ImageBuffer
    target_cell: tuple[int, int]
    gold: str
    query: str
    marker_bbox: BBox
    spec: SceneSpec
    seed: int


def class_labels(num_classes: int) -> list[str]:
    """Answer vocabulary: NATO code words, then numbered glyph names."""
    return [NATO_WORDS[i] if i < len(NATO_WORDS) else f"glyph-{i}" for i in range(num_classes)]


def cell_bbox(row: int, col: int, width: int, height: int, grid: int) -> BBox:
    """Grid cell in a width x height frame, edges floored."""
    return BBox(col * width // grid, row * height // grid, (col + 1) * width // grid, (row + 1) * height // grid)


def plotkin_bound(length: int, distance: int) -> Optional[int]:
    """Upper bound on binary code size for length n and minimum distance d (d >= n/2)."""
    if 2 * distance > length:
        return 2 * (distance // (2 * distance - length))
    if 2 * distance == length:
        return 4 * distance
    return None


def _sylvester_hadamard(n: int) -> np.ndarray:
    h = np.ones((1, 1), dtype=np.int8)
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h


@lru_cache(maxsize=32)
def glyph_codebook(glyph_size: int, num_classes: int) -> np.ndarray:
    """Binary glyph patterns, shape (K, g, g), pairwise Hamming distance >= g*g/2.

    Public: depends only on glyph size and class count. 1 is ink.
    """
    n = glyph_size * glyph_size
    distance = math.ceil(n / 2)
    bound = plotkin_bound(n, distance)
    if bound is not None and num_classes > bound:
        raise SpecInfeasible(
            f"{num_classes} classes cannot be {distance} bits apart at glyph size {glyph_size} "
            f"(at most {bound})"
        )

    if n & (n - 1) == 0:
        # Hadamard rows and their complements, minus the blank and the solid pattern
        rows = _sylvester_hadamard(n)[1:] < 0
        words = np.concatenate([rows, ~rows])
        if num_classes > len(words):
            raise SpecInfeasible(
                f"{num_classes} classes exceed the {len(words)} glyphs available at glyph size {glyph_size}"
            )
        chosen = words[:num_classes]
    else:
        chosen = _greedy_codebook(n, distance, num_classes)
    return chosen.reshape(num_classes, glyph_size, glyph_size).astype(np.uint8)


def _greedy_codebook(n: int, distance: int, num_classes: int, max_tries: int = 20000) -> np.ndarray:
    rng = np.random.default_rng([n, num_classes])
    words: list[np.ndarray] = []
    for _ in range(max_tries):
        candidate = rng.random(n) < 0.5
        if not candidate.any() or candidate.all():
            continue
        if all(np.count_nonzero(candidate != w) >= distance for w in words):
            words.append(candidate)
            if len(words) == num_classes:
                return np.stack(words)
    raise SpecInfeasible(f"Could not find {num_classes} glyphs {distance} bits apart of length {n}")


def _glyph_tile(bits: np.ndarray) -> Image.Image:
    # Ink is black, paper is white
    return Image.fromarray(np.where(bits == 1, 0, 255).astype(np.uint8)).convert("RGB")


def scene_layout(spec: SceneSpec, seed: int) -> tuple[tuple[int, int], int, dict[tuple[int, int], int]]:
    """Target cell, gold class index and distractor classes for (spec, seed)."""
    rng = np.random.default_rng([spec.seed, seed])
    target = (int(rng.integers(spec.grid)), int(rng.integers(spec.grid)))
    gold_index = seed % spec.num_classes
    distractors = {}
    for row in range(spec.grid):
        for col in range(spec.grid):
            if (row, col) == target:
                continue
            if rng.random() < spec.distractor_density:
                distractors[(row, col)] = int(rng.integers(spec.num_classes))
    return target, gold_index, distractors


def render_query(spec: SceneSpec) -> str:
    return (
        "Which code word is written by the glyph inside the tinted cell? "
        f"Answer with one of: {', '.join(spec.labels)}."
    )


def generate_scene(spec: SceneSpec, seed: int) -> Scene:
    """Render the scene for (spec, seed); bit-identical across calls."""
    codebook = glyph_codebook(spec.glyph_size, spec.num_classes)
    target, gold_index, distractors = scene_layout(spec, seed)
    tiles = [_glyph_tile(bits) for bits in codebook]

    canvas = Image.new("RGB", (spec.canvas, spec.canvas), BACKGROUND_RGB)
    draw = ImageDraw.Draw(canvas)
    marker = spec.cell_bbox(*target)
    draw.rectangle([marker.x1, marker.y1, marker.x2 - 1, marker.y2 - 1], fill=MARKER_RGB)

    placed = dict(distractors)
    placed[target] = gold_index
    for (row, col), k in placed.items():
        glyph = spec.glyph_bbox(row, col)
        canvas.paste(tiles[k], (glyph.x1, glyph.y1))

    data = np.asarray(canvas, dtype=np.float32) / 255.0
    return Scene(
        image=ImageBuffer.from_array(data),
        target_cell=target,
        gold=spec.labels[gold_index],
        query=render_query(spec),
        marker_bbox=marker,
        spec=spec,
        seed=seed,
    )


# --- Decoding ---

@dataclass(frozen=True)
class GlyphReading:
    label: str
    margin: float
    cell: tuple[int, int]


def tint_map(data: np.ndarray) -> np.ndarray:
    """Per-pixel red tint R - (G + B) / 2; zero for non-RGB data."""
    if data.shape[2] < 3:
        return np.zeros(data.shape[:2], dtype=np.float32)
    return data[:, :, 0] - (data[:, :, 1] + data[:, :, 2]) / 2


def _view_span(lo: int, hi: int, origin: int, scale: float, limit: int) -> tuple[int, int]:
    start = min(max(int(math.floor((lo - origin) * scale)), 0), limit - 1)
    end = min(max(int(math.ceil((hi - origin) * scale)), start + 1), limit)
    return start, end


def read_target(view: ImageBuffer, source: BBox, spec: SceneSpec) -> Optional[GlyphReading]:
    """Decode the glyph of a tinted cell from a view of `source` (original frame).

    Uses only the view and the public layout, never the scene itself. Returns
    None when the view is below legible scale, shows no tinted cell, or no
    class wins by DECODE_MARGIN.
    """
    sx = view.width / source.width
    sy = view.height / source.height
    if min(sx, sy) < LEGIBLE_SCALE:
        return None

    codebook = glyph_codebook(spec.glyph_size, spec.num_classes)
    signs = codebook.reshape(spec.num_classes, -1).astype(np.float32) * 2 - 1
    labels = spec.labels
    tint = tint_map(view.data)
    luminance = view.data.mean(axis=2)
    offsets = np.arange(spec.glyph_size) + 0.5

    best: Optional[GlyphReading] = None
    for row in range(spec.grid):
        for col in range(spec.grid):
            glyph = spec.glyph_bbox(row, col)
            if not source.contains(glyph):
                continue
            region = spec.cell_bbox(row, col).intersection(source)
            x1, x2 = _view_span(region.x1, region.x2, source.x1, sx, view.width)
            y1, y2 = _view_span(region.y1, region.y2, source.y1, sy, view.height)
            if tint[y1:y2, x1:x2].mean() < MARKER_TINT / 2:
                continue

            xs = np.clip(((glyph.x1 - source.x1 + offsets) * sx).astype(int), 0, view.width - 1)
            ys = np.clip(((glyph.y1 - source.y1 + offsets) * sy).astype(int), 0, view.height - 1)
            signal = (1 - 2 * luminance[np.ix_(ys, xs)]).ravel()
            scores = signs @ signal / signal.size
            order = np.argsort(scores)[::-1]
            margin = float(scores[order[0]] - scores[order[1]])
            if margin >= DECODE_MARGIN and (best is None or margin > best.margin):
                best = GlyphReading(label=labels[int(order[0])], margin=margin, cell=(row, col))
    return best


def _full_frame(scene: Scene) -> BBox:
    return BBox(0, 0, scene.image.width, scene.image.height)


def decode_answer(scene: Scene, view: ImageBuffer, source: Optional[BBox] = None) -> Optional[str]:
    """Task oracle: the class label readable from `view`, or None.

    `source` is the region of scene.image the view was made from; omitted, the
    view is taken to cover the whole image.
    """
    reading = read_target(view, source or _full_frame(scene), scene.spec)
    return reading.label if reading else None


def legibility(scene: Scene, view: ImageBuffer, source: Optional[BBox] = None) -> Legibility:
    """Legible iff the target glyph is inside the view at scale >= LEGIBLE_SCALE."""
    source = source or _full_frame(scene)
    scale = min(view.width / source.width, view.height / source.height)
    glyph = scene.spec.glyph_bbox(*scene.target_cell)
    if source.contains(glyph) and scale >= LEGIBLE_SCALE:
        return Legibility.LEGIBLE
    return Legibility.ILLEGIBLE


# --- Scene sets ---

@dataclass(frozen=True)
class SceneSet:
    """A reproducible scene collection: a spec and an ordered tuple of seeds."""

    spec: SceneSpec
    seeds: tuple[int, ...]

    @classmethod
    def from_range(cls, spec: SceneSpec, start: int, count: int) -> "SceneSet":
        return cls(spec=spec, seeds=tuple(range(start, start + count)))

    def __len__(self) -> int:
        return len(self.seeds)

    def __iter__(self) -> Iterator[Scene]:
        for seed in self.seeds:
            yield generate_scene(self.spec, seed)

    def __getitem__(self, index: int) -> Scene:
        return generate_scene(self.spec, self.seeds[index])

    def records(self) -> list[dict]:
        """Manifest records, computed from the layout without rendering pixels."""
        labels = self.spec.labels
        records = []
        for seed in self.seeds:
            target, gold_index, _ = scene_layout(self.spec, seed)
            records.append({
                "spec": asdict(self.spec),
                "seed": seed,
                "gold": labels[gold_index],
                "target_cell": list(target),
            })
        return records


def write_manifest(scene_set: SceneSet, path: Path) -> Path:
    """Write one JSON line per scene (spec, seed, gold, target cell)."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for record in scene_set.records():
                f.write(json.dumps(record, sort_keys=True) + "\n")
    except OSError as e:
        raise IoFailure(f"Could not write manifest {path}: {e}") from e
    return path


def read_manifest(path: Path) -> SceneSet:
    """Rebuild a SceneSet from a manifest, checking every record against its layout."""
    path = Path(path)
    try:
        lines = [line for line in path.read_text().splitlines() if line.strip()]
    except OSError as e:
        raise IoFailure(f"Could not read manifest {path}: {e}") from e
    if not lines:
        raise IoFailure(f"Manifest {path} is empty")

    try:
        records = [json.loads(line) for line in lines]
        spec = SceneSpec(**records[0]["spec"])
        seeds = tuple(int(r["seed"]) for r in records)
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise IoFailure(f"Manifest {path} is malformed: {e}") from e

    scene_set = SceneSet(spec=spec, seeds=seeds)
    for stored, expected in zip(records, scene_set.records()):
        if stored != expected:
            raise LabError(f"Manifest record for seed {stored.get('seed')} does not match its regenerated scene")
    return scene_set
