"""Box geometry, detection gating, region vectors and occupancy heatmaps.

Boxes are normalized to the image: ``(cx, cy)`` is the center as a fraction of
image width/height and ``(w, h)`` the size as a fraction of width/height.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

DEFAULT_IOU_MIN = 0.3
DEFAULT_HISTORY = 5
HEATMAP_SIDE = 32


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            val = float(getattr(self, name))
            if not (0.0 <= val <= 1.0) or not np.isfinite(val):
                raise ValueError(f"box {name}={val!r} outside [0, 1]")
            object.__setattr__(self, name, val)

    @classmethod
    def clipped(cls, cx, cy, w, h) -> "BoundingBox":
        """Build a box, clamping every field into [0, 1]."""
        vals = np.clip(np.nan_to_num(np.array([cx, cy, w, h], dtype=np.float64)), 0.0, 1.0)
        return cls(*(float(v) for v in vals))

    @classmethod
    def from_array(cls, arr) -> "BoundingBox":
        return cls.clipped(*np.asarray(arr, dtype=np.float64)[:4])

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 when the union has no area."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def mean_box(history: Iterable[BoundingBox]) -> BoundingBox:
    arr = np.array([b.as_array() for b in history])
    if arr.size == 0:
        raise ValueError("history is empty")
    return BoundingBox.from_array(arr.mean(axis=0))


def assign_detection(
    candidates: Sequence[BoundingBox],
    history: Sequence[BoundingBox],
    iou_min: float = DEFAULT_IOU_MIN,
) -> BoundingBox | None:
    """Pick the candidate overlapping the history mean the most.

    Returns None when there are no candidates or the best overlap is below
    ``iou_min``. Ties keep the earliest candidate.
    """
    if not history:
        raise ValueError("assignment needs at least one history box")
    if not candidates:
        return None
    ref = mean_box(history)
    best, best_iou = None, -1.0
    for cand in candidates:
        score = iou(cand, ref)
        if score > best_iou:
            best, best_iou = cand, score
    if best_iou < iou_min:
        return None
    return best


class GateHistory:
    """Short-term history of accepted boxes used as the gating reference."""

    def __init__(self, first: BoundingBox, length: int = DEFAULT_HISTORY, iou_min: float = DEFAULT_IOU_MIN):
        if length < 1:
            raise ValueError("history length must be >= 1")
        self.boxes: deque[BoundingBox] = deque([first], maxlen=length)
        self.iou_min = iou_min

    def assign(self, candidates: Sequence[BoundingBox]) -> BoundingBox | None:
        return assign_detection(candidates, list(self.boxes), self.iou_min)

    def push(self, box: BoundingBox) -> None:
        self.boxes.append(box)


def encode_region_vector(box: BoundingBox) -> np.ndarray:
    """Six-slot region vector with class label and confidence zeroed."""
    return np.array([0.0, box.cx, box.cy, box.w, box.h, 0.0], dtype=np.float64)


def decode_region_vector(vec) -> BoundingBox:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (6,):
        raise ValueError(f"region vector must have 6 entries, got {vec.shape}")
    return BoundingBox(*(float(v) for v in vec[1:5]))


def yolo_tensor_dims(S: int, B: int, C: int) -> tuple[tuple[int, int, int], int]:
    """Shape of a detector output grid with B boxes and C classes per cell."""
    if S < 1 or B < 1:
        raise ValueError(f"grid size and boxes per cell must be positive, got S={S}, B={B}")
    if C < 0:
        raise ValueError(f"class count must be non-negative, got C={C}")
    depth = B * 5 + C
    return (S, S, depth), S * S * depth


def heatmap_encode(box: BoundingBox, side: int = HEATMAP_SIDE) -> np.ndarray:
    """Binary occupancy grid: 1 where a cell's center falls inside the box."""
    if side < 1:
        raise ValueError("heatmap side must be >= 1")
    centers = (np.arange(side) + 0.5) / side
    x0, y0, x1, y1 = box.corners()
    cols = (centers >= x0) & (centers <= x1)
    rows = (centers >= y0) & (centers <= y1)
    grid = np.outer(rows, cols).astype(np.float64)
    if not grid.any() and box.area > 0:
        r = min(int(box.cy * side), side - 1)
        c = min(int(box.cx * side), side - 1)
        grid[r, c] = 1.0
    return grid


def heatmap_decode(H, floor: float = 0.1) -> BoundingBox | None:
    """Recover a box from the blob around the hottest cell.

    Cells at or above half the peak value form a mask; the 4-connected
    component holding the argmax gives the box extent.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim == 1:
        side = int(round(np.sqrt(H.size)))
        if side * side != H.size:
            raise ValueError(f"flat heatmap length {H.size} is not a square")
        H = H.reshape(side, side)
    side = H.shape[0]
    peak = float(H.max())
    if peak < floor or peak <= 0.0:
        return None
    labels, _ = ndimage.label(H >= 0.5 * peak)
    blob = labels == labels[np.unravel_index(int(np.argmax(H)), H.shape)]
    rows = np.flatnonzero(blob.any(axis=1))
    cols = np.flatnonzero(blob.any(axis=0))
    rmin, rmax, cmin, cmax = rows[0], rows[-1], cols[0], cols[-1]
    return BoundingBox.clipped(
        (cmin + cmax + 1) / (2 * side),
        (rmin + rmax + 1) / (2 * side),
        (cmax - cmin + 1) / side,
        (rmax - rmin + 1) / side,
    )


def write_pgm(path, H) -> None:
    """Dump a heatmap as an 8-bit binary PGM for eyeballing."""
    H = np.clip(np.asarray(H, dtype=np.float64), 0.0, 1.0)
    if H.ndim == 1:
        side = int(round(np.sqrt(H.size)))
        H = H.reshape(side, side)
    pixels = np.round(H * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
