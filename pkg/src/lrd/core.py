"""Geometry, label and task-sequence types shared across the package."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np


class ContractError(ValueError):
    """Raised when an input violates a documented precondition."""


SMALL_AREA = 0.03
LARGE_AREA = 0.15
DEFAULT_GRID = 3


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in normalized corner form."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) and 0.0 <= v <= 1.0 for v in vals):
            raise ContractError(f"box coordinates outside [0,1]: {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ContractError(f"degenerate box: {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        """Build a box from center/size, clipping to the unit square."""
        x1 = min(max(cx - w / 2, 0.0), 1.0)
        y1 = min(max(cy - h / 2, 0.0), 1.0)
        x2 = min(max(cx + w / 2, 0.0), 1.0)
        y2 = min(max(cy + h / 2, 0.0), 1.0)
        return cls(x1, y1, x2, y2)


class ScaleBucket(enum.IntEnum):
    SMALL = 0
    MEDIUM = 1
    LARGE = 2


@dataclass(frozen=True, order=True)
class GridCell:
    row: int
    col: int


@dataclass(frozen=True)
class ClassLabel:
    id: int

    def __post_init__(self):
        if self.id < 0:
            raise ContractError(f"negative class id {self.id}")


@dataclass
class GroundTruth:
    boxes: list[BBox] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.boxes) != len(self.labels):
            raise ContractError("boxes and labels must have equal length")

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    class_ids: frozenset[int]
    n_train: int
    n_test: int


def check_disjoint(tasks: list[TaskSpec]) -> None:
    seen: set[int] = set()
    for t in tasks:
        if seen & t.class_ids:
            raise ContractError(f"task {t.task_id} reuses classes {sorted(seen & t.class_ids)}")
        seen |= t.class_ids


def iou(a: BBox, b: BBox) -> float:
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU between two (N,4) / (M,4) corner-form arrays."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def grid_cell(b: BBox, G: int = DEFAULT_GRID) -> GridCell:
    if G < 1:
        raise ContractError(f"grid size must be >= 1, got {G}")
    cx, cy = b.center
    row = min(int(math.floor(cy * G)), G - 1)
    col = min(int(math.floor(cx * G)), G - 1)
    return GridCell(row, col)


def scale_bucket(b: BBox) -> ScaleBucket:
    area = b.area
    if area < SMALL_AREA:
        return ScaleBucket.SMALL
    if area > LARGE_AREA:
        return ScaleBucket.LARGE
    return ScaleBucket.MEDIUM
