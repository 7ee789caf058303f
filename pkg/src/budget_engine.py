"""
Visual token accounting and the budgeted view operator.
Counts patch tokens, derives the resolution-conditioned budget, downsamples
views with a box filter and crops regions out of the native-resolution image.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from PIL import Image

from src.errors import EmptyRegion, LabError


def round_half_away(value: float) -> int:
    """Round to the nearest integer, halves away from zero."""
    return int(math.copysign(math.floor(abs(value) + 0.5), value))


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """An owned pixel grid (rows x cols x channels, float32 in [0, 1]).

    Compared by identity; use pixel_equal() for content comparison.
    """

    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.channels < 1:
            raise LabError(f"Invalid image size {self.width}x{self.height}x{self.channels}")
        if self.data.shape != (self.height, self.width, self.channels):
            raise LabError(
                f"Pixel data shape {self.data.shape} does not match "
                f"{self.height}x{self.width}x{self.channels}"
            )
        self.data.flags.writeable = False

    @classmethod
    def from_array(cls, array: np.ndarray) -> "ImageBuffer":
        """Wrap an H x W (x C) array, copying it into float32."""
        data = np.array(array, dtype=np.float32)
        if data.ndim == 2:
            data = data[:, :, None]
        height, width, channels = data.shape
        return cls(width=width, height=height, channels=channels, data=data)

    @classmethod
    def blank(cls, width: int, height: int, channels: int = 3, value: float = 0.0) -> "ImageBuffer":
        return cls.from_array(np.full((height, width, channels), value, dtype=np.float32))

    def pixel_equal(self, other: "ImageBuffer") -> bool:
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def tokens(self, patch_size: int) -> int:
        return token_count(self.width, self.height, patch_size)

    def digest(self) -> str:
        """SHA-256 over shape and pixel bytes; names stored view assets."""
        h = hashlib.sha256(f"{self.height}x{self.width}x{self.channels}:".encode())
        h.update(np.ascontiguousarray(self.data).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class BudgetConfig:
    """Parameters of the budget law: compression rate and clip bounds."""

    gamma: float = 6.25
    b_min: int = 169
    b_max: int = 1337
    patch_size: int = 28

    def __post_init__(self):
        if not 0 < self.b_min <= self.b_max:
            raise LabError(f"Need 0 < b_min <= b_max, got {self.b_min}, {self.b_max}")
        if self.gamma <= 1:
            raise LabError(f"gamma must exceed 1, got {self.gamma}")
        if self.patch_size < 1:
            raise LabError(f"patch_size must be positive, got {self.patch_size}")


@dataclass(frozen=True)
class BBox:
    """Integer box [x1, y1, x2, y2) in the frame of some reference image."""

    x1: int
    y1: int
    x2: int
    y2: int

    @classmethod
    def from_list(cls, coords) -> "BBox":
        x1, y1, x2, y2 = coords
        return cls(int(x1), int(y1), int(x2), int(y2))

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    @property
    def area(self) -> int:
        return max(0, self.width) * max(0, self.height)

    def as_list(self) -> list[int]:
        return [self.x1, self.y1, self.x2, self.y2]

    def clamp(self, width: int, height: int) -> "BBox":
        return BBox(
            min(max(self.x1, 0), width),
            min(max(self.y1, 0), height),
            min(max(self.x2, 0), width),
            min(max(self.y2, 0), height),
        )

    def intersection(self, other: "BBox") -> "BBox":
        return BBox(
            max(self.x1, other.x1),
            max(self.y1, other.y1),
            min(self.x2, other.x2),
            min(self.y2, other.y2),
        )

    def contains(self, other: "BBox") -> bool:
        return (
            self.x1 <= other.x1 and self.y1 <= other.y1
            and other.x2 <= self.x2 and other.y2 <= self.y2
        )

    def scale(self, sx: float, sy: float) -> "BBox":
        """Map into another frame by scale factors, rounding half away from zero."""
        return BBox(
            round_half_away(self.x1 * sx),
            round_half_away(self.y1 * sy),
            round_half_away(self.x2 * sx),
            round_half_away(self.y2 * sy),
        )


def token_count(width: int, height: int, patch_size: int) -> int:
    """Visual tokens of a width x height view: floored area over patch area, at least 1."""
    return max(1, (width * height) // (patch_size * patch_size))


def budget_for_size(width: int, height: int, config: BudgetConfig) -> int:
    """Resolution-conditioned budget: clip(floor(|X| / gamma), b_min, b_max)."""
    native = token_count(width, height, config.patch_size)
    budget = math.floor(native / config.gamma)
    return min(max(budget, config.b_min), config.b_max)


def compute_budget(image: ImageBuffer, config: BudgetConfig) -> int:
    return budget_for_size(image.width, image.height, config)


def target_size(width: int, height: int, budget: int, patch_size: int) -> tuple[int, int]:
    """Patch-aligned, aspect-preserving dimensions whose token count fits the budget."""
    if token_count(width, height, patch_size) <= budget:
        return width, height

    scale = math.sqrt(budget * patch_size * patch_size / (width * height))
    # Small epsilon keeps exact multiples (e.g. 448 / 28 = 16) from flooring one patch short
    new_w = max(patch_size, math.floor(width * scale / patch_size + 1e-9) * patch_size)
    new_h = max(patch_size, math.floor(height * scale / patch_size + 1e-9) * patch_size)
    new_w, new_h = min(new_w, width), min(new_h, height)

    # Only reachable when a side was raised to one patch
    min_w, min_h = min(patch_size, width), min(patch_size, height)
    while token_count(new_w, new_h, patch_size) > budget:
        if new_w >= new_h and new_w > min_w:
            new_w = max(min_w, new_w - patch_size)
        elif new_h > min_h:
            new_h = max(min_h, new_h - patch_size)
        else:
            break
    return new_w, new_h


def _box_resize(data: np.ndarray, width: int, height: int) -> np.ndarray:
    """Area-average resize, one F-mode Pillow image per channel."""
    channels = []
    for c in range(data.shape[2]):
        plane = Image.fromarray(np.ascontiguousarray(data[:, :, c], dtype=np.float32))
        resized = plane.resize((width, height), Image.Resampling.BOX)
        channels.append(np.asarray(resized, dtype=np.float32))
    return np.clip(np.stack(channels, axis=2), 0.0, 1.0)


def downsample(image: ImageBuffer, budget: int, patch_size: int) -> ImageBuffer:
    """Deterministic box-filter downsampling D(view, B).

    Returns the input itself when it already fits the budget.
    """
    if budget < 1:
        raise LabError(f"budget must be at least 1, got {budget}")
    new_w, new_h = target_size(image.width, image.height, budget, patch_size)
    if (new_w, new_h) == (image.width, image.height):
        return image
    return ImageBuffer.from_array(_box_resize(image.data, new_w, new_h))


@lru_cache(maxsize=4)
def budgeted_view(image: ImageBuffer, budget: int, patch_size: int) -> ImageBuffer:
    """Memoized downsample keyed on the image object."""
    return downsample(image, budget, patch_size)


def crop(image: ImageBuffer, bbox: BBox) -> ImageBuffer:
    """Exact pixel sub-rectangle of the image after clamping bbox to its bounds."""
    box = bbox.clamp(image.width, image.height)
    if box.width <= 0 or box.height <= 0:
        raise EmptyRegion(f"Region {bbox.as_list()} is empty inside a {image.width}x{image.height} image")
    if box == BBox(0, 0, image.width, image.height):
        return image
    return ImageBuffer.from_array(image.data[box.y1:box.y2, box.x1:box.x2, :])
