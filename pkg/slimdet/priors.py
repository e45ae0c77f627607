import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from slimdet.config import PriorConfig
from slimdet.errors import ShapeError

CENTER_VARIANCE = 0.1
SIZE_VARIANCE = 0.2
BACKGROUND = -1


@dataclass(frozen=True)
class Annotation:
    """Ground-truth object: class id (1-based) and a normalized corner box."""

    class_id: int
    box: Tuple[float, float, float, float]

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.box
        if not (xmin < xmax and ymin < ymax):
            raise ShapeError(f"annotation box {self.box} has no area")


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: Tuple[float, float, float, float]
    prior_index: int = -1


@dataclass
class PriorBoxSet:
    """Default boxes in (cx, cy, w, h), level by level, row-major, ratio-major per cell."""

    boxes: np.ndarray
    level_offsets: List[int]

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def corners(self) -> np.ndarray:
        return center_to_corners(self.boxes)


def center_to_corners(boxes: np.ndarray) -> np.ndarray:
    half = boxes[..., 2:] / 2.0
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def corners_to_center(boxes: np.ndarray) -> np.ndarray:
    size = boxes[..., 2:] - boxes[..., :2]
    return np.concatenate([boxes[..., :2] + size / 2.0, size], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner boxes a[P,4] and b[T,4] -> [P,T]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def level_scales(config: PriorConfig) -> List[float]:
    """s_k for every level plus one trailing scale used by the last level's extra prior."""
    m = config.num_levels
    if m == 1:
        return [config.min_scale, config.max_scale]
    step = (config.max_scale - config.min_scale) / (m - 1)
    scales = [config.min_scale + step * k for k in range(m)]
    scales.append(min(1.0, config.max_scale + step))
    return scales


def generate_priors(config: PriorConfig) -> PriorBoxSet:
    """
    Tile default boxes over every detection level.

    Args:
        config: Per-level grid sizes, prior counts and scale range

    Returns:
        PriorBoxSet with exactly sum(f_k^2 * n_k) boxes
    """
    config.validate()
    scales = level_scales(config)
    rows = []
    offsets = []
    for k, (f, ratios) in enumerate(zip(config.feature_maps, config.aspect_ratios)):
        offsets.append(sum(len(r) for r in rows))
        s_k = scales[k]
        extra = math.sqrt(s_k * scales[k + 1])
        shapes = [(s_k * math.sqrt(ratios[0]), s_k / math.sqrt(ratios[0])), (extra, extra)]
        shapes += [(s_k * math.sqrt(r), s_k / math.sqrt(r)) for r in ratios[1:]]
        level = np.empty((f, f, len(shapes), 4), dtype=np.float64)
        centers = (np.arange(f) + 0.5) / f
        level[..., 0] = centers[None, :, None]
        level[..., 1] = centers[:, None, None]
        for a, (w, h) in enumerate(shapes):
            level[:, :, a, 2] = w
            level[:, :, a, 3] = h
        rows.append(level.reshape(-1, 4))
    return PriorBoxSet(boxes=np.concatenate(rows, axis=0), level_offsets=offsets)


def match_priors(priors: PriorBoxSet, truths: Sequence[Annotation], iou_threshold: float = 0.5) -> np.ndarray:
    """
    Assign each prior a truth index or BACKGROUND.

    Every truth is first force-matched to its best prior (lowest index on ties,
    falling back to its best prior not already force-matched); then every other
    prior whose best IoU reaches the threshold takes its best truth.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ShapeError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    assignment = np.full(len(priors), BACKGROUND, dtype=np.int64)
    if not truths:
        return assignment
    truth_boxes = np.array([t.box for t in truths], dtype=np.float64)
    overlaps = iou_matrix(priors.corners(), truth_boxes)
    best_truth = overlaps.argmax(axis=1)
    best_truth_iou = overlaps[np.arange(len(priors)), best_truth]
    positive = best_truth_iou >= iou_threshold
    assignment[positive] = best_truth[positive]

    forced = set()
    for j in range(len(truths)):
        column = overlaps[:, j]
        # descending IoU, ascending prior index on ties
        order = np.lexsort((np.arange(len(priors)), -column))
        for p in order:
            if p not in forced:
                forced.add(int(p))
                assignment[p] = j
                break
    return assignment


def encode_boxes(truths: np.ndarray, priors: np.ndarray) -> np.ndarray:
    """Corner truths [P,4] relative to centre-form priors [P,4] -> offsets [P,4]."""
    t = corners_to_center(np.asarray(truths, dtype=np.float64))
    p = np.asarray(priors, dtype=np.float64)
    return np.stack([
        (t[:, 0] - p[:, 0]) / (p[:, 2] * CENTER_VARIANCE),
        (t[:, 1] - p[:, 1]) / (p[:, 3] * CENTER_VARIANCE),
        np.log(t[:, 2] / p[:, 2]) / SIZE_VARIANCE,
        np.log(t[:, 3] / p[:, 3]) / SIZE_VARIANCE,
    ], axis=1)


def decode_boxes(offsets: np.ndarray, priors: np.ndarray) -> np.ndarray:
    """Inverse of encode_boxes; returns unclipped corner boxes."""
    d = np.asarray(offsets, dtype=np.float64)
    p = np.asarray(priors, dtype=np.float64)
    center = np.stack([
        p[:, 0] + d[:, 0] * CENTER_VARIANCE * p[:, 2],
        p[:, 1] + d[:, 1] * CENTER_VARIANCE * p[:, 3],
        p[:, 2] * np.exp(d[:, 2] * SIZE_VARIANCE),
        p[:, 3] * np.exp(d[:, 3] * SIZE_VARIANCE),
    ], axis=1)
    return center_to_corners(center)
