"""Task heads: per-query box/class prediction and mask reconstruction.

The detection head is a 3-layer feed-forward network shared across query
rows: two hidden ReLU layers, then a box branch (4 sigmoids, normalized
cx/cy/width/height) and a class branch (2 logits: moving vs no-object).

The segmentation head requires the hidden width to equal the number of
coarse grid cells so each class-query row can be reshaped into a grid,
bilinearly upsampled to image resolution and refined by one 3x3 conv.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import conv2d
from .errors import ConfigError, DimensionError

CLASS_MOVING = 0
CLASS_NO_OBJECT = 1


@lru_cache(maxsize=32)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row r maps output index r to source coordinate r * n_in / n_out.

    This convention preserves corner samples and puts 2x-upsampled
    midpoints exactly halfway between neighbours.
    """
    m = np.zeros((n_out, n_in))
    for dst in range(n_out):
        src = dst * n_in / n_out
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[dst, lo] += 1.0 - frac
        m[dst, hi] += frac
    return m


def bilinear_upsample2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resample [C,H,W] to [C,out_h,out_w]; linear, so backward is the transpose."""
    if x.ndim != 3:
        raise DimensionError(f"bilinear_upsample2d needs [C,H,W], got {x.shape}")
    ry = _interp_matrix(x.shape[1], out_h)
    rx = _interp_matrix(x.shape[2], out_w)
    out_data = np.einsum("ph,qw,chw->cpq", ry, rx, x.data, optimize=True)

    def bw(out: Tensor):
        x.grad += np.einsum("ph,qw,cpq->chw", ry, rx, out.grad, optimize=True)

    return ad._result(out_data, (x,), bw)


class DetectionHead:
    """Shared-weight per-query predictor of (class logits, sigmoid box)."""

    def __init__(self, rng, feat_dim: int, hidden_dim: int | None = None):
        hidden = hidden_dim or feat_dim
        self.w1 = ad.uniform_init(rng, (feat_dim, hidden), feat_dim)
        self.b1 = ad.uniform_init(rng, (hidden,), feat_dim)
        self.w2 = ad.uniform_init(rng, (hidden, hidden), hidden)
        self.b2 = ad.uniform_init(rng, (hidden,), hidden)
        self.w_box = ad.uniform_init(rng, (hidden, 4), hidden)
        self.b_box = ad.uniform_init(rng, (4,), hidden)
        self.w_cls = ad.uniform_init(rng, (hidden, 2), hidden)
        self.b_cls = ad.uniform_init(rng, (2,), hidden)

    def __call__(self, queries: Tensor) -> tuple[Tensor, Tensor]:
        h = ad.relu(ad.add(ad.matmul(queries, self.w1), self.b1))
        h = ad.relu(ad.add(ad.matmul(h, self.w2), self.b2))
        class_logits = ad.add(ad.matmul(h, self.w_cls), self.b_cls)
        boxes = ad.sigmoid(ad.add(ad.matmul(h, self.w_box), self.b_box))
        return class_logits, boxes

    def named_parameters(self, prefix: str):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2
        yield f"{prefix}.w_box", self.w_box
        yield f"{prefix}.b_box", self.b_box
        yield f"{prefix}.w_cls", self.w_cls
        yield f"{prefix}.b_cls", self.b_cls


class SegmentationHead:
    """Class-query rows -> coarse grids -> upsampled, conv-refined logits."""

    def __init__(self, rng, n_classes: int, grid_h: int, grid_w: int,
                 out_h: int, out_w: int):
        self.n_classes = n_classes
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.out_h = out_h
        self.out_w = out_w
        fan_in = n_classes * 9
        self.conv_w = ad.uniform_init(rng, (n_classes, n_classes, 3, 3), fan_in)
        self.conv_b = ad.uniform_init(rng, (n_classes,), fan_in)

    def __call__(self, class_features: Tensor) -> Tensor:
        n, d = class_features.shape
        if n != self.n_classes:
            raise DimensionError(f"expected {self.n_classes} class rows, got {n}")
        if d != self.grid_h * self.grid_w:
            raise ConfigError(
                f"segmentation needs feature width d == grid cells: d={d}, "
                f"grid={self.grid_h}x{self.grid_w}={self.grid_h * self.grid_w}")
        grids = ad.reshape(class_features, (n, self.grid_h, self.grid_w))
        upsampled = bilinear_upsample2d(grids, self.out_h, self.out_w)
        return conv2d(upsampled, self.conv_w, self.conv_b, stride=1, padding=1)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.conv.weight", self.conv_w
        yield f"{prefix}.conv.bias", self.conv_b
