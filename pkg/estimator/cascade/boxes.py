"""
Box geometry for the detection cascade: overlap, suppression, regression and
P-Net grid mapping.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from estimator.exceptions import InvalidBoxError

logger = logging.getLogger(__name__)

UNION = "union"
MIN = "min"

# P-Net geometry: 12x12 receptive field, output cells every 2 pixels
PNET_WINDOW = 12
PNET_STRIDE = 2

Point = Tuple[float, float]
Landmarks = Tuple[Point, Point, Point, Point, Point]


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InvalidBoxError(f"Degenerate box {self.as_tuple()}")
        if not 0.0 <= self.score <= 1.0:
            raise InvalidBoxError(f"Box score {self.score} outside [0, 1]")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def sort_key(self):
        """Descending score, then coordinates, so ordering never depends on arrival order."""
        return (-self.score, self.x1, self.y1, self.x2, self.y2)


class Stage(str, Enum):
    P = "P"
    R = "R"
    O = "O"


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    landmarks: Optional[Landmarks] = None
    stage: Stage = Stage.O

    def __post_init__(self):
        if (self.stage == Stage.O) != (self.landmarks is not None):
            raise ValueError("Only output-stage detections carry landmarks")


def iou(a: BoundingBox, b: BoundingBox, mode: str = UNION) -> float:
    """Intersection over union, or over the smaller area in "min" mode."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    if mode == UNION:
        denom = a.area + b.area - inter
    elif mode == MIN:
        denom = min(a.area, b.area)
    else:
        raise ValueError(f"Unknown overlap mode {mode!r}")
    return min(1.0, inter / denom) if denom > 0 else 0.0


def nms(boxes: Sequence[BoundingBox], threshold: float, mode: str = UNION) -> List[BoundingBox]:
    """
    Greedy non-maximum suppression.

    Repeatedly keeps the highest-scoring box and discards every remaining box
    whose overlap with it exceeds `threshold`.

    Args:
        boxes: Candidate boxes in any order
        threshold: Overlap above which a box is suppressed, in (0, 1)
        mode: "union" or "min"

    Returns:
        Kept boxes sorted by descending score
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"NMS threshold must be in (0, 1), got {threshold}")
    if mode not in (UNION, MIN):
        raise ValueError(f"Unknown overlap mode {mode!r}")
    ordered = sorted(boxes, key=BoundingBox.sort_key)
    if not ordered:
        return []

    coords = np.array([b.as_tuple() for b in ordered], dtype=np.float64)
    x1, y1, x2, y2 = coords.T
    areas = (x2 - x1) * (y2 - y1)

    keep = []
    order = np.arange(len(ordered))
    while order.size > 0:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        overlapping = (iw > 0) & (ih > 0)
        inter = np.where(overlapping, iw * ih, 0.0)
        if mode == UNION:
            denom = areas[i] + areas[rest] - inter
        else:
            denom = np.minimum(areas[i], areas[rest])
        with np.errstate(divide="ignore", invalid="ignore"):
            ovr = np.where(overlapping & (denom > 0), np.minimum(1.0, inter / denom), 0.0)
        order = rest[ovr <= threshold]
    return [ordered[i] for i in keep]


def apply_bbox_regression(box: BoundingBox, offsets: Sequence[float]) -> BoundingBox:
    """
    Shift each edge by its offset times the box width/height.

    Raises InvalidBoxError when the refined box is degenerate; callers drop it.
    """
    dx1, dy1, dx2, dy2 = (float(v) for v in offsets)
    w, h = box.width, box.height
    return BoundingBox(
        box.x1 + dx1 * w,
        box.y1 + dy1 * h,
        box.x2 + dx2 * w,
        box.y2 + dy2 * h,
        box.score,
    )


def map_pnet_cell(row: int, col: int, scale: float, score: float = 1.0) -> BoundingBox:
    """Image-space window of P-Net output cell (row, col) at pyramid `scale`."""
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return BoundingBox(
        col * PNET_STRIDE / scale,
        row * PNET_STRIDE / scale,
        (col * PNET_STRIDE + PNET_WINDOW) / scale,
        (row * PNET_STRIDE + PNET_WINDOW) / scale,
        score,
    )


def square_pad(box: BoundingBox) -> BoundingBox:
    """Grow the shorter side about the centre so the box is square."""
    side = max(box.width, box.height)
    cx = (box.x1 + box.x2) / 2
    cy = (box.y1 + box.y2) / 2
    if box.width == box.height:
        return box
    return BoundingBox(cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2, box.score)
