"""Bipartite prediction-to-ground-truth matching and the set losses.

Boxes are (cx, cy, width, height), normalized to [0, 1].  The matching
cost combines class confidence, L1 box distance and generalized IoU; the
optimal injective assignment is found with a shortest-augmenting-path
solver (O(n^3)), with a deterministic lexicographic tie-break among
optimal assignments.  The training loss re-uses the matched pairing:
matched queries pay a moving-class cross-entropy plus box terms,
unmatched queries pay a down-weighted no-object cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError
from .heads import CLASS_MOVING, CLASS_NO_OBJECT


# ---------------------------------------------------------------------------
# generalized IoU


def _corners(boxes: np.ndarray):
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def giou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise GIoU in [-1, 1] between [N,4] and [M,4] cxcywh boxes.

    Zero-area boxes contribute IoU 0; their hull degenerates to the span
    of the centers, which is exactly what the corner formula yields.
    """
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ax0, ay0, ax1, ay1 = (v[:, None] for v in _corners(a))
    bx0, by0, bx1, by1 = (v[None, :] for v in _corners(b))

    inter_w = np.maximum(0.0, np.minimum(ax1, bx1) - np.maximum(ax0, bx0))
    inter_h = np.maximum(0.0, np.minimum(ay1, by1) - np.maximum(ay0, by0))
    inter = inter_w * inter_h
    # areas from corner arithmetic so identical boxes give exactly 1
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    union = area_a + area_b - inter
    iou = np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)

    hull = (np.maximum(ax1, bx1) - np.minimum(ax0, bx0)) * \
           (np.maximum(ay1, by1) - np.minimum(ay0, by0))
    penalty = np.where(hull > 0.0, (hull - union) / np.where(hull > 0.0, hull, 1.0), 0.0)
    return iou - penalty


def giou(box_a, box_b) -> float:
    return float(giou_matrix(np.asarray(box_a), np.asarray(box_b))[0, 0])


def giou_pairs(pred_boxes: Tensor, gt_boxes: np.ndarray) -> Tensor:
    """Differentiable per-row GIoU between [M,4] predictions and [M,4] targets."""
    g = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    cx = ad.slice_last_dim(pred_boxes, 0, 1)
    cy = ad.slice_last_dim(pred_boxes, 1, 2)
    w = ad.slice_last_dim(pred_boxes, 2, 3)
    h = ad.slice_last_dim(pred_boxes, 3, 4)
    half = ad.constant(0.5)
    ax0, ax1 = ad.sub(cx, ad.mul(w, half)), ad.add(cx, ad.mul(w, half))
    ay0, ay1 = ad.sub(cy, ad.mul(h, half)), ad.add(cy, ad.mul(h, half))

    gx0, gy0, gx1, gy1 = (ad.constant(v[:, None]) for v in _corners(g))
    gx0_, gy0_, gx1_, gy1_ = _corners(g)
    g_area = ad.constant(((gx1_ - gx0_) * (gy1_ - gy0_))[:, None])

    inter_w = ad.relu(ad.sub(ad.minimum(ax1, gx1), ad.maximum(ax0, gx0)))
    inter_h = ad.relu(ad.sub(ad.minimum(ay1, gy1), ad.maximum(ay0, gy0)))
    inter = ad.mul(inter_w, inter_h)
    p_area = ad.mul(ad.sub(ax1, ax0), ad.sub(ay1, ay0))
    union = ad.sub(ad.add(p_area, g_area), inter)
    iou = ad.div(inter, union)

    hull = ad.mul(ad.sub(ad.maximum(ax1, gx1), ad.minimum(ax0, gx0)),
                  ad.sub(ad.maximum(ay1, gy1), ad.minimum(ay0, gy0)))
    return ad.sub(iou, ad.div(ad.sub(hull, union), hull))


# ---------------------------------------------------------------------------
# cost matrix and assignment


@dataclass(frozen=True)
class LossWeights:
    lambda_class: float = 1.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    noobj_weight: float = 0.1


@dataclass(frozen=True)
class CostMatrix:
    matrix: np.ndarray  # [n_predictions, n_ground_truths]
    weights: LossWeights


@dataclass(frozen=True)
class Assignment:
    """Injective ground-truth -> prediction map plus its summed cost."""
    gt_to_pred: tuple[int, ...]
    total: float

    def pairs(self):
        """(prediction index, ground-truth index) sorted by prediction index."""
        return sorted((p, g) for g, p in enumerate(self.gt_to_pred))


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def build_cost_matrix(class_logits: np.ndarray, boxes: np.ndarray,
                      gt_boxes: np.ndarray, weights: LossWeights = LossWeights()
                      ) -> CostMatrix:
    """cost(i,j) = -λc p_i(moving) + λ1 |b_i - g_j|_1 + λg (1 - GIoU)."""
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n, m = boxes.shape[0], gt.shape[0]
    if m == 0:
        return CostMatrix(np.zeros((n, 0)), weights)
    p_moving = softmax_probs(np.asarray(class_logits))[:, CLASS_MOVING]
    l1 = np.abs(boxes[:, None, :] - gt[None, :, :]).sum(axis=2)
    g = giou_matrix(boxes, gt)
    cost = (-weights.lambda_class * p_moving[:, None]
            + weights.lambda_l1 * l1
            + weights.lambda_giou * (1.0 - g))
    return CostMatrix(cost, weights)


def _shortest_augmenting_paths(cost: np.ndarray):
    """Classic Jonker-Volgenant style solver on a rows >= cols matrix.

    Returns (col_to_row, row potentials, col potentials); potentials are
    dual-feasible, so reduced costs identify edges that can appear in an
    optimal assignment.
    """
    n_rows, n_cols = cost.shape
    u = np.zeros(n_cols + 1)          # potential per column (1-based)
    v = np.zeros(n_rows + 1)          # potential per row (1-based)
    match = np.zeros(n_rows + 1, dtype=np.intp)  # match[j] = column owned by row j
    way = np.zeros(n_rows + 1, dtype=np.intp)
    for col in range(1, n_cols + 1):
        match[0] = col
        j0 = 0
        minv = np.full(n_rows + 1, np.inf)
        used = np.zeros(n_rows + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cur = cost[:, i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    col_to_row = np.full(n_cols, -1, dtype=np.intp)
    for j in range(1, n_rows + 1):
        if match[j]:
            col_to_row[match[j] - 1] = j - 1
    return col_to_row, u, v


def _assignment_total(cost: np.ndarray, col_to_row) -> float:
    total = 0.0
    for c in range(len(col_to_row)):
        total += float(cost[col_to_row[c], c])
    return total


def hungarian(cost_like) -> Assignment:
    """Globally optimal assignment of every ground truth to a distinct prediction.

    Among cost-equal optima the lexicographically smallest gt -> pred
    tuple is returned, reconstructed column by column: a prediction is
    accepted for a ground truth only if some optimal completion exists,
    which is checked on the reduced-cost zeros certified by the duals.
    """
    cost = cost_like.matrix if isinstance(cost_like, CostMatrix) else np.asarray(cost_like, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n_rows, n_cols = cost.shape
    if n_cols == 0:
        return Assignment((), 0.0)
    if n_cols > n_rows:
        raise ContractError(
            f"cannot assign {n_cols} ground truths to {n_rows} predictions injectively")
    if not np.isfinite(cost).all():
        raise NumericError("cost matrix contains non-finite entries")

    col_to_row, u, v = _shortest_augmenting_paths(cost)
    best_total = _assignment_total(cost, col_to_row)
    tol = 1e-9 * (1.0 + float(np.abs(cost).max()) * n_cols)
    reduced = cost - u[1:][None, :] - v[1:][:, None]

    chosen: list[int] = []
    used = np.zeros(n_rows, dtype=bool)
    for c in range(n_cols):
        fixed = sum(float(cost[r, cc]) for cc, r in enumerate(chosen))
        candidates = [r for r in range(n_rows) if not used[r] and reduced[r, c] <= tol]
        if not candidates:
            # numerically degenerate duals: fall back to the best unused edge
            free = [r for r in range(n_rows) if not used[r]]
            candidates = [min(free, key=lambda r: (reduced[r, c], r))]
        picked = candidates[0]
        if len(candidates) > 1:
            rest_cols = list(range(c + 1, n_cols))
            for r in candidates:
                if not rest_cols:
                    if abs(fixed + float(cost[r, c]) - best_total) <= tol:
                        picked = r
                        break
                    continue
                rows_left = [rr for rr in range(n_rows) if not used[rr] and rr != r]
                sub = cost[np.ix_(rows_left, rest_cols)]
                sub_rows, _, _ = _shortest_augmenting_paths(sub)
                sub_total = _assignment_total(sub, sub_rows)
                if abs(fixed + float(cost[r, c]) + sub_total - best_total) <= tol:
                    picked = r
                    break
        chosen.append(picked)
        used[picked] = True

    total = 0.0
    for c, r in enumerate(chosen):
        total += float(cost[r, c])
    return Assignment(tuple(chosen), total)


# ---------------------------------------------------------------------------
# losses


def detection_set_loss(class_logits: Tensor, boxes: Tensor, gt_boxes: np.ndarray,
                       assignment: Assignment, weights: LossWeights = LossWeights()
                       ) -> Tensor:
    """Per-query mean of matched (CE + box terms) and unmatched no-object CE."""
    n_queries = class_logits.shape[0]
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    targets = np.full(n_queries, CLASS_NO_OBJECT, dtype=np.intp)
    ce_weights = np.full(n_queries, weights.noobj_weight)
    pairs = assignment.pairs()
    for pred_idx, _ in pairs:
        targets[pred_idx] = CLASS_MOVING
        ce_weights[pred_idx] = 1.0

    loss = ad.cross_entropy_rows(class_logits, targets, ce_weights, reduction="sum")
    if pairs:
        pred_idx = np.array([p for p, _ in pairs], dtype=np.intp)
        gt_ordered = gt[[g for _, g in pairs]]
        matched = ad.gather_rows(boxes, pred_idx)
        l1 = ad.sum_all(ad.absolute(ad.sub(matched, ad.constant(gt_ordered))))
        g = giou_pairs(matched, gt_ordered)
        giou_term = ad.sum_all(ad.sub(ad.constant(np.ones_like(g.data)), g))
        loss = ad.add(loss, ad.add(ad.mul(l1, ad.constant(weights.lambda_l1)),
                                   ad.mul(giou_term, ad.constant(weights.lambda_giou))))
    return ad.mul(loss, ad.constant(1.0 / n_queries))


def match_and_loss(class_logits: Tensor, boxes: Tensor, gt_boxes: np.ndarray,
                   weights: LossWeights = LossWeights()) -> tuple[Tensor, Assignment]:
    """Matching runs on detached values; the loss is differentiable."""
    cost = build_cost_matrix(class_logits.data, boxes.data, gt_boxes, weights)
    assignment = hungarian(cost)
    return detection_set_loss(class_logits, boxes, gt_boxes, assignment, weights), assignment


def segmentation_loss(mask_logits: Tensor, gt_mask: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy of [C,H,W] logits against integer labels."""
    n_classes = mask_logits.shape[0]
    gt = np.asarray(gt_mask)
    if gt.shape != mask_logits.shape[1:]:
        raise ContractError(f"mask {gt.shape} vs logits {mask_logits.shape}")
    flat = ad.transpose2d(ad.reshape(mask_logits, (n_classes, gt.size)))
    return ad.cross_entropy_rows(flat, gt.reshape(-1).astype(np.intp), reduction="mean")


def mtl_loss(det_loss: Tensor | None, seg_loss: Tensor | None,
             w_det: float = 1.0, w_seg: float = 1.0) -> Tensor:
    terms = []
    if det_loss is not None:
        terms.append(ad.mul(det_loss, ad.constant(w_det)))
    if seg_loss is not None:
        terms.append(ad.mul(seg_loss, ad.constant(w_seg)))
    if not terms:
        raise ContractError("mtl_loss needs at least one task loss")
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total
