from typing import List, Sequence

import numpy as np

from slimdet.errors import NumericalError, ShapeError
from slimdet.priors import (Annotation, Detection, PriorBoxSet, decode_boxes, encode_boxes,
                            iou_matrix)
from slimdet.tensor import Tensor, emit_op


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def smooth_l1(diff: np.ndarray):
    """Elementwise value and derivative of the smooth-L1 penalty."""
    absolute = np.abs(diff)
    small = absolute < 1.0
    value = np.where(small, 0.5 * diff * diff, absolute - 0.5)
    grad = np.where(small, diff, np.sign(diff))
    return value, grad


def hard_negatives(background_loss: np.ndarray, positive: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` non-positive priors with the largest background loss."""
    candidates = np.flatnonzero(~positive)
    if count <= 0 or candidates.size == 0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((candidates, -background_loss[candidates]))
    return candidates[order[:count]]


def multibox_loss(
    loc_preds: Tensor,
    conf_logits: Tensor,
    priors: PriorBoxSet,
    assignments: Sequence[np.ndarray],
    truths: Sequence[Sequence[Annotation]],
    neg_pos_ratio: float = 3.0,
) -> Tensor:
    """
    Localisation plus confidence loss, averaged over matched priors.

    Args:
        loc_preds: Predicted offsets [N, P, 4]
        conf_logits: Class logits [N, P, classes + 1], column 0 is background
        priors: Default boxes the offsets are relative to
        assignments: Per image, the matched truth index of every prior (or -1)
        truths: Per image annotations
        neg_pos_ratio: Hard negatives kept per positive

    Returns:
        Scalar loss tensor; gradients flow to loc_preds and conf_logits
    """
    if loc_preds.ndim != 3 or loc_preds.shape[2] != 4:
        raise ShapeError(f"loc_preds must be [N, P, 4], got {loc_preds.shape}")
    if conf_logits.ndim != 3 or conf_logits.shape[:2] != loc_preds.shape[:2]:
        raise ShapeError(f"conf_logits must be [N, P, C+1] matching loc_preds, got {conf_logits.shape}")
    n, p, _ = loc_preds.shape
    if p != len(priors):
        raise ShapeError(f"predictions cover {p} priors, prior set has {len(priors)}")
    if len(assignments) != n or len(truths) != n:
        raise ShapeError("assignments and truths must have one entry per image")
    if not np.all(np.isfinite(conf_logits.data)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(conf_logits.data))[0])
        raise NumericalError(f"non-finite confidence logit at {bad}", index=bad)
    num_classes = conf_logits.shape[2] - 1

    loc = loc_preds.data.astype(np.float64)
    logits = conf_logits.data.astype(np.float64)
    grad_loc = np.zeros_like(loc)
    grad_conf = np.zeros_like(logits)
    total = 0.0
    matched = 0
    for i in range(n):
        assign = np.asarray(assignments[i])
        positive = assign >= 0
        num_pos = int(positive.sum())
        if num_pos == 0:
            continue
        matched += num_pos
        pos_idx = np.flatnonzero(positive)
        boxes = np.array([truths[i][j].box for j in assign[pos_idx]], dtype=np.float64)
        labels = np.zeros(p, dtype=np.int64)
        labels[pos_idx] = [truths[i][j].class_id for j in assign[pos_idx]]
        if labels.max() > num_classes or labels[pos_idx].min() < 1:
            raise ShapeError(f"class ids must lie in 1..{num_classes}")

        targets = encode_boxes(boxes, priors.boxes[pos_idx])
        value, slope = smooth_l1(loc[i, pos_idx] - targets)
        total += value.sum()
        grad_loc[i, pos_idx] = slope

        logp = log_softmax(logits[i])
        num_neg = int(min(neg_pos_ratio * num_pos, p - num_pos))
        neg_idx = hard_negatives(-logp[:, 0], positive, num_neg)
        selected = np.concatenate([pos_idx, neg_idx])
        total += -logp[selected, labels[selected]].sum()
        probs = np.exp(logp[selected])
        probs[np.arange(selected.size), labels[selected]] -= 1.0
        grad_conf[i, selected] = probs

    if matched == 0:
        loss = np.asarray(0.0, dtype=loc_preds.dtype)
        return emit_op("multibox_loss", loss, (loc_preds, conf_logits),
                       lambda g: (np.zeros_like(loc_preds.data), np.zeros_like(conf_logits.data)))

    scale = 1.0 / matched
    loss = np.asarray(total * scale, dtype=np.result_type(loc_preds.dtype, conf_logits.dtype))

    def backward(g):
        factor = np.asarray(g).item() * scale
        return ((grad_loc * factor).astype(loc_preds.dtype), (grad_conf * factor).astype(conf_logits.dtype))

    return emit_op("multibox_loss", loss, (loc_preds, conf_logits), backward)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> List[int]:
    """Greedy suppression; returns kept indices, best first (lower index wins ties)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] != scores.shape[0]:
        raise ShapeError(f"nms got {boxes.shape[0]} boxes and {scores.shape[0]} scores")
    order = np.lexsort((np.arange(scores.size), -scores))
    keep = []
    while order.size > 0:
        i = int(order[0])
        keep.append(i)
        rest = order[1:]
        if rest.size == 0:
            break
        overlaps = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
        order = rest[overlaps <= iou_threshold]
    return keep


def decode_detections(
    loc_preds: np.ndarray,
    conf_logits: np.ndarray,
    priors: PriorBoxSet,
    score_threshold: float = 0.05,
    nms_iou: float = 0.45,
    top_k: int = 100,
) -> List[Detection]:
    """
    Turn one image's raw head outputs into scored, clipped, de-duplicated boxes.

    Args:
        loc_preds: Offsets [P, 4]
        conf_logits: Logits [P, classes + 1]
        priors: Default boxes
        score_threshold: Minimum class probability kept
        nms_iou: Suppression overlap
        top_k: Maximum detections returned

    Returns:
        Detections sorted by descending score, then class id, then prior index
    """
    if not (0.0 < score_threshold < 1.0 and 0.0 < nms_iou < 1.0):
        raise ShapeError("score_threshold and nms_iou must lie in (0, 1)")
    loc = np.asarray(loc_preds.data if isinstance(loc_preds, Tensor) else loc_preds, dtype=np.float64)
    logits = np.asarray(conf_logits.data if isinstance(conf_logits, Tensor) else conf_logits, dtype=np.float64)
    boxes = np.clip(decode_boxes(loc, priors.boxes), 0.0, 1.0)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    scores = np.exp(log_softmax(logits))

    found = []
    for class_id in range(1, scores.shape[1]):
        candidates = np.flatnonzero(valid & (scores[:, class_id] >= score_threshold))
        if candidates.size == 0:
            continue
        kept = nms(boxes[candidates], scores[candidates, class_id], nms_iou)
        for k in kept:
            prior = int(candidates[k])
            found.append((-scores[prior, class_id], class_id, prior))
    found.sort()
    return [
        Detection(class_id=c, score=float(-s), box=tuple(float(v) for v in boxes[prior]), prior_index=prior)
        for s, c, prior in found[:top_k]
    ]
