"""Detection and segmentation evaluation: AP over IoU thresholds and mask IoU.

AP follows the COCO recipe: predictions pooled across images, ranked by
score, greedily matched (each ground truth at most once per threshold),
then the area under the monotone precision-recall envelope is taken with
101-point interpolation.  The headline detection number is the mean AP
over thresholds 0.50:0.05:0.95; segmentation reports the per-image mean
IoU of the moving class, skipping images where the union is empty.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

MAP_THRESHOLDS = tuple(k / 100.0 for k in range(50, 100, 5))
SEG_MOVING_CLASS = 1


@dataclass
class EvalRecord:
    """One image's ranked predictions and its ground truths (cxcywh, normalized)."""
    pred_boxes: np.ndarray
    scores: np.ndarray
    gt_boxes: np.ndarray

    def __post_init__(self):
        self.pred_boxes = np.asarray(self.pred_boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 4)


def _corners(boxes: np.ndarray):
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ax0, ay0, ax1, ay1 = (v[:, None] for v in _corners(a))
    bx0, by0, bx1, by1 = (v[None, :] for v in _corners(b))
    iw = np.maximum(0.0, np.minimum(ax1, bx1) - np.maximum(ax0, bx0))
    ih = np.maximum(0.0, np.minimum(ay1, by1) - np.maximum(ay0, by0))
    inter = iw * ih
    # areas from the same corner arithmetic so identical boxes give exactly 1
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


def box_iou(box_a, box_b) -> float:
    return float(iou_matrix(np.asarray(box_a), np.asarray(box_b))[0, 0])


def _ranked_predictions(records: list[EvalRecord]):
    """All predictions pooled, sorted by (score desc, image, rank) deterministically."""
    entries = []
    for img, rec in enumerate(records):
        for i in range(len(rec.scores)):
            entries.append((-rec.scores[i], img, i))
    entries.sort()
    return entries


def ap_at_threshold(records: list[EvalRecord], threshold: float) -> float:
    """Average precision at one IoU threshold (101-point interpolation)."""
    total_gt = sum(len(r.gt_boxes) for r in records)
    if total_gt == 0:
        warnings.warn("ap_at_threshold: no ground truths in any record; AP defined as 0")
        return 0.0
    entries = _ranked_predictions(records)
    if not entries:
        return 0.0

    gt_taken = [np.zeros(len(r.gt_boxes), dtype=bool) for r in records]
    ious = [iou_matrix(r.pred_boxes, r.gt_boxes) if len(r.gt_boxes) else None
            for r in records]
    tp = np.zeros(len(entries))
    for rank, (_, img, i) in enumerate(entries):
        iou_row = ious[img][i] if ious[img] is not None else None
        if iou_row is None:
            continue
        best_gt, best_iou = -1, threshold
        for j in range(iou_row.shape[0]):
            if not gt_taken[img][j] and iou_row[j] >= best_iou:
                # strictly better IoU wins; equal IoU keeps the earlier gt
                if best_gt == -1 or iou_row[j] > best_iou:
                    best_gt, best_iou = j, iou_row[j]
        if best_gt >= 0:
            gt_taken[img][best_gt] = True
            tp[rank] = 1.0

    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / total_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # monotone envelope from the right, then sample 101 recall points
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        idx = np.searchsorted(recall, r, side="left")
        ap += envelope[idx] if idx < len(envelope) else 0.0
    return ap / 101.0


def map_total(records: list[EvalRecord]) -> float:
    return float(np.mean([ap_at_threshold(records, t) for t in MAP_THRESHOLDS]))


def detection_metrics(records: list[EvalRecord]) -> dict:
    per_threshold = {f"ap{int(round(t * 100))}": ap_at_threshold(records, t)
                     for t in MAP_THRESHOLDS}
    out = {"map_total": float(np.mean(list(per_threshold.values())))}
    out.update(per_threshold)
    return out


def seg_iou(pred_mask: np.ndarray, gt_mask: np.ndarray,
            class_id: int = SEG_MOVING_CLASS) -> float:
    """Single-image IoU of one class; empty union yields NaN (caller skips)."""
    p = np.asarray(pred_mask) == class_id
    g = np.asarray(gt_mask) == class_id
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return float("nan")
    return float(np.logical_and(p, g).sum() / union)


def dataset_seg_iou(mask_pairs, class_id: int = SEG_MOVING_CLASS) -> float:
    """Mean over images of the moving-class IoU; empty-union images are skipped."""
    values = []
    for pred, gt in mask_pairs:
        v = seg_iou(pred, gt, class_id)
        if not np.isnan(v):
            values.append(v)
    if not values:
        warnings.warn("dataset_seg_iou: every image had an empty union; IoU defined as 0")
        return 0.0
    return float(np.mean(values))


def format_report(metrics: dict) -> str:
    lines = []
    for key, value in metrics.items():
        if value is None:
            lines.append(f"{key} = n/a")
        elif isinstance(value, float):
            lines.append(f"{key} = {value:.6f}")
        else:
            lines.append(f"{key} = {value}")
    return "\n".join(lines)


def write_report(metrics: dict, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
