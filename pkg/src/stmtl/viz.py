"""Attention-map and prediction overlays exported as plain PGM/PPM images.

For a sample the exporter writes, per query group: the most confident
detection query's cross-attention map and one map per class query
(background, moving).  Maps are grid-shaped rows of the final decoder
layer's head-averaged cross-attention, bilinearly upscaled to image size
and min-max normalized to 8 bits.  A companion overlay shows predicted
boxes (score > 0.5) and the predicted mask tinted on the last frame.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .attention import ROW_SUM_TOL
from .data import MASK_MOVING, write_pgm, write_ppm
from .errors import NumericError
from .heads import _interp_matrix


def attention_to_image(row: np.ndarray, grid_h: int, grid_w: int,
                       out_h: int, out_w: int) -> np.ndarray:
    """One attention row -> grid -> upscaled, min-max normalized uint8 image."""
    if abs(float(row.sum()) - 1.0) > ROW_SUM_TOL:
        raise NumericError(f"attention row sums to {row.sum():.6f}, expected 1")
    grid = row.reshape(grid_h, grid_w)
    ry = _interp_matrix(grid_h, out_h)
    rx = _interp_matrix(grid_w, out_w)
    big = ry @ grid @ rx.T
    lo, hi = big.min(), big.max()
    scaled = (big - lo) / (hi - lo) if hi > lo else np.zeros_like(big)
    return np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)


def draw_overlay(frame: np.ndarray, boxes: np.ndarray, scores: np.ndarray,
                 mask: np.ndarray | None, score_threshold: float = 0.5) -> np.ndarray:
    """Predicted boxes outlined in red, mask tinted green, on a [3,H,W] frame."""
    out = frame.copy()
    h, w = out.shape[1], out.shape[2]
    if mask is not None:
        moving = mask == MASK_MOVING
        out[1][moving] = 0.5 * out[1][moving] + 0.5
    for box, score in zip(boxes, scores):
        if score <= score_threshold:
            continue
        x0 = int(np.clip(round((box[0] - box[2] / 2) * w), 0, w - 1))
        x1 = int(np.clip(round((box[0] + box[2] / 2) * w), 0, w - 1))
        y0 = int(np.clip(round((box[1] - box[3] / 2) * h), 0, h - 1))
        y1 = int(np.clip(round((box[1] + box[3] / 2) * h), 0, h - 1))
        out[0, y0, x0:x1 + 1] = 1.0
        out[0, y1, x0:x1 + 1] = 1.0
        out[0, y0:y1 + 1, x0] = 1.0
        out[0, y0:y1 + 1, x1] = 1.0
        out[1:, y0, x0:x1 + 1] = 0.0
        out[1:, y1, x0:x1 + 1] = 0.0
        out[1:, y0:y1 + 1, x0] = 0.0
        out[1:, y0:y1 + 1, x1] = 0.0
    return out


SEG_CLASS_NAMES = {0: "background", 1: "moving"}


def export_sample_visualization(prediction: dict, last_frame: np.ndarray,
                                grid_h: int, grid_w: int, out_dir) -> list[str]:
    """Write attention maps + overlay for one predicted sample; returns filenames."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h, w = last_frame.shape[1], last_frame.shape[2]
    written: list[str] = []

    if "det_attention" in prediction:
        best = int(np.argmax(prediction["scores"]))
        img = attention_to_image(prediction["det_attention"][best],
                                 grid_h, grid_w, h, w)
        name = f"attn_det_query{best}.pgm"
        write_pgm(out_dir / name, img)
        written.append(name)

    if "seg_attention" in prediction:
        for c, row in enumerate(prediction["seg_attention"]):
            label = SEG_CLASS_NAMES.get(c, f"class{c}")
            img = attention_to_image(row, grid_h, grid_w, h, w)
            name = f"attn_seg_{label}.pgm"
            write_pgm(out_dir / name, img)
            written.append(name)

    overlay = draw_overlay(last_frame,
                           prediction.get("boxes", np.zeros((0, 4))),
                           prediction.get("scores", np.zeros(0)),
                           prediction.get("mask"))
    write_ppm(out_dir / "overlay.ppm", overlay)
    written.append("overlay.ppm")
    return written
