"""
Detection metrics: IoU, all-points average precision, mAP and AP restricted
to small / medium / large ground truths.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from slimdet.errors import ShapeError
from slimdet.priors import Annotation, Detection, iou_matrix

Box = Tuple[float, float, float, float]
# (image id, score, box)
ScoredBox = Tuple[int, float, Box]
# (image id, box)
TruthBox = Tuple[int, Box]

SMALL_AREA = 32 * 32
LARGE_AREA = 96 * 96
BUCKETS = ("small", "medium", "large")


def iou(a: Box, b: Box) -> float:
    for box in (a, b):
        if not (box[0] < box[2] and box[1] < box[3]):
            raise ShapeError(f"box {tuple(box)} has no area")
    return float(iou_matrix(np.asarray(a), np.asarray(b))[0, 0])


def size_bucket(area: float) -> str:
    if area < SMALL_AREA:
        return "small"
    if area < LARGE_AREA:
        return "medium"
    return "large"


def pixel_area(box: Box, image_size: Tuple[int, int]) -> int:
    """Area of a normalized box once its corners are snapped to whole pixels."""
    height, width = image_size
    x0, y0, x1, y1 = np.rint(np.asarray(box, dtype=np.float64) * [width, height, width, height]).astype(np.int64)
    return int((x1 - x0) * (y1 - y0))


def _match(detections: Sequence[ScoredBox], truths: Sequence[TruthBox], iou_threshold: float):
    """
    Greedy matching in score order.

    Returns:
        (detection order, index of the truth each detection matched or -1)
    """
    order = sorted(range(len(detections)), key=lambda k: (-detections[k][1], detections[k][0], k))
    truth_ids: Dict[int, List[int]] = {}
    for t, (image_id, _) in enumerate(truths):
        truth_ids.setdefault(image_id, []).append(t)
    det_ids: Dict[int, List[int]] = {}
    for k, (image_id, _, _) in enumerate(detections):
        det_ids.setdefault(image_id, []).append(k)

    # per detection: (candidate truth indices, IoU with each)
    overlaps: Dict[int, Tuple[List[int], np.ndarray]] = {}
    for image_id, ks in det_ids.items():
        ts = truth_ids.get(image_id, [])
        if not ts:
            continue
        table = iou_matrix(np.array([detections[k][2] for k in ks]), np.array([truths[t][1] for t in ts]))
        for row, k in enumerate(ks):
            overlaps[k] = (ts, table[row])

    taken = np.zeros(len(truths), dtype=bool)
    matched = []
    for k in order:
        best, best_iou = -1, iou_threshold
        ts, row = overlaps.get(k, ((), ()))
        for t, overlap in zip(ts, row):
            if taken[t]:
                continue
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = t, float(overlap)
        if best >= 0:
            taken[best] = True
        matched.append(best)
    return order, matched


def _area_under_pr(tp: np.ndarray, num_truths: int) -> float:
    if tp.size == 0:
        return 0.0
    hits = np.cumsum(tp)
    recall = hits / num_truths
    precision = hits / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    changes = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def average_precision(
    detections: Sequence[ScoredBox],
    truths: Sequence[TruthBox],
    iou_threshold: float = 0.5,
    counted: Optional[Sequence[bool]] = None,
) -> Optional[float]:
    """
    All-points interpolated AP for one class.

    Args:
        detections: (image id, score, box) per detection
        truths: (image id, box) per ground truth
        iou_threshold: Minimum IoU for a true positive
        counted: Optional per-truth flags; detections matched to an uncounted
            truth are ignored and uncounted truths do not add to recall

    Returns:
        AP in [0, 1], or None when no counted truth exists
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ShapeError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    counted = np.ones(len(truths), dtype=bool) if counted is None else np.asarray(counted, dtype=bool)
    num_truths = int(counted.sum())
    if num_truths == 0:
        return None
    _, matched = _match(detections, truths, iou_threshold)
    tp = [1.0 if m >= 0 else 0.0 for m in matched if m < 0 or counted[m]]
    return _area_under_pr(np.asarray(tp), num_truths)


@dataclass
class EvalResult:
    map: float
    per_class: Dict[int, Optional[float]]
    ap_small: Optional[float]
    ap_medium: Optional[float]
    ap_large: Optional[float]
    iou_threshold: float
    truth_counts: Dict[int, int] = field(default_factory=dict)
    bucket_counts: Dict[str, int] = field(default_factory=dict)

    def to_dict(self, class_names: Optional[Sequence[str]] = None) -> Dict[str, Any]:
        def name(class_id: int) -> str:
            return class_names[class_id - 1] if class_names else str(class_id)

        return {
            "map": self.map,
            "per_class": {name(c): ap for c, ap in self.per_class.items()},
            "ap_small": self.ap_small,
            "ap_medium": self.ap_medium,
            "ap_large": self.ap_large,
            "iou_threshold": self.iou_threshold,
            "truth_counts": {name(c): n for c, n in self.truth_counts.items()},
            "bucket_counts": dict(self.bucket_counts),
        }


def _mean_defined(values) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def evaluate_map(
    detections: Sequence[Sequence[Detection]],
    annotations: Sequence[Sequence[Annotation]],
    num_classes: int,
    image_size: Tuple[int, int],
    iou_threshold: float = 0.5,
) -> EvalResult:
    """
    Per-class AP, mAP and size-bucketed AP over a test set.

    Args:
        detections: Per image, the detector output
        annotations: Per image, the ground truth (same order)
        num_classes: Number of object classes (ids 1..num_classes)
        image_size: (height, width) in pixels, for the bucket areas
        iou_threshold: Matching threshold

    Returns:
        EvalResult; bucket APs average the classes that have truths in the bucket
    """
    if not annotations:
        raise ShapeError("evaluation set is empty")
    if len(detections) != len(annotations):
        raise ShapeError(f"{len(detections)} detection lists for {len(annotations)} images")

    per_class: Dict[int, Optional[float]] = {}
    truth_counts: Dict[int, int] = {}
    bucket_aps: Dict[str, List[Optional[float]]] = {b: [] for b in BUCKETS}
    bucket_counts = {b: 0 for b in BUCKETS}
    for class_id in range(1, num_classes + 1):
        scored = [(i, d.score, d.box) for i, dets in enumerate(detections) for d in dets if d.class_id == class_id]
        truths = [(i, a.box) for i, anns in enumerate(annotations) for a in anns if a.class_id == class_id]
        truth_counts[class_id] = len(truths)
        per_class[class_id] = average_precision(scored, truths, iou_threshold)
        buckets = [size_bucket(pixel_area(box, image_size)) for _, box in truths]
        for bucket in BUCKETS:
            flags = [b == bucket for b in buckets]
            bucket_counts[bucket] += sum(flags)
            bucket_aps[bucket].append(average_precision(scored, truths, iou_threshold, counted=flags))

    mean_ap = _mean_defined(per_class.values())
    return EvalResult(
        map=mean_ap if mean_ap is not None else 0.0,
        per_class=per_class,
        ap_small=_mean_defined(bucket_aps["small"]),
        ap_medium=_mean_defined(bucket_aps["medium"]),
        ap_large=_mean_defined(bucket_aps["large"]),
        iou_threshold=iou_threshold,
        truth_counts=truth_counts,
        bucket_counts=bucket_counts,
    )
