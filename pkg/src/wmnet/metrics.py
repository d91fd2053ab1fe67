"""Box IoU and COCO-style mean average precision.

Matching is greedy in descending confidence: each prediction takes the
unmatched ground-truth box of its class in the same image with the highest
IoU, and counts as a true positive if that IoU reaches the threshold.
Average precision integrates the monotone precision envelope over every
recall point (all-point interpolation).
"""

from __future__ import annotations

from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from wmnet.bench import DetectionSet

COCO_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))


def compute_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two (x1, y1, x2, y2) boxes; zero-area boxes give 0."""
    return float(iou_matrix(np.asarray([a], float), np.asarray([b], float))[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    # a zero-area box never overlaps anything, even itself
    iou[(area_a[:, None] <= 0) | (area_b[None, :] <= 0)] = 0.0
    return iou


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from a confidence-sorted TP indicator."""
    if n_gt == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def match_class(preds: Sequence[DetectionSet], gts: Sequence[DetectionSet], cls: int,
                threshold: float) -> tuple[np.ndarray, int]:
    """Greedy confidence-ordered matching for one class; returns (sorted TP flags, GT count)."""
    entries = []
    for img, det in enumerate(preds):
        for j in np.nonzero(det.classes == cls)[0]:
            entries.append((-det.scores[j], img, j))
    # stable order: confidence, then image, then index
    entries.sort()
    gt_boxes = [g.boxes[g.classes == cls] for g in gts]
    taken = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    n_gt = sum(len(b) for b in gt_boxes)
    tp = np.zeros(len(entries))
    for k, (_, img, j) in enumerate(entries):
        if not len(gt_boxes[img]):
            continue
        ious = iou_matrix(preds[img].boxes[j], gt_boxes[img])[0]
        ious[taken[img]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= threshold:
            taken[img][best] = True
            tp[k] = 1.0
    return tp, n_gt


def compute_map(preds: Sequence[DetectionSet], gts: Sequence[DetectionSet],
                thresholds: Iterable[float] = COCO_THRESHOLDS,
                classes: Optional[Iterable[int]] = None) -> Dict:
    """Per-class AP at every threshold plus mAP@0.5 and the threshold-averaged mAP.

    Classes with neither predictions nor ground truth are skipped; a class
    with predictions but no ground truth scores 0.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction sets for {len(gts)} images")
    thresholds = tuple(float(t) for t in thresholds)
    if classes is None:
        present = set()
        for d in list(preds) + list(gts):
            present.update(int(c) for c in d.classes)
        classes = sorted(present)
    per_class = {}
    for cls in classes:
        aps = []
        for thr in thresholds:
            tp, n_gt = match_class(preds, gts, cls, thr)
            if n_gt == 0 and tp.size == 0:
                break
            aps.append(average_precision(tp, n_gt))
        if aps:
            per_class[int(cls)] = dict(zip(thresholds, aps))
    result = {"thresholds": list(thresholds), "per_class": per_class}
    if not per_class:
        result.update({"mAP@0.5": float("nan"), "mAP": float("nan")})
        return result
    table = np.array([[per_class[c][t] for t in thresholds] for c in per_class])
    if 0.5 in thresholds:
        result["mAP@0.5"] = float(table[:, thresholds.index(0.5)].mean())
    result["mAP"] = float(table.mean())
    return result
