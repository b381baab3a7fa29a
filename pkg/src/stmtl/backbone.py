"""Small convolutional feature extractor for RGB frames and flow maps.

Two separate stride-2 conv stems (appearance and motion) run on each time
step; their channel stacks are concatenated at the coarse grid and a 1x1
projection maps them to the hidden width.  The coarse map is flattened
row-major (position p = row * grid_w + col), which the segmentation head
relies on when it reshapes query rows back into grids.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [C,H,W] input with [C_out,C,kh,kw] kernels.

    Output spatial size is floor((H + 2p - k) / s) + 1.  Implemented via
    im2col so forward and backward are single matrix products.
    """
    if x.ndim != 3 or weight.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape} must be 3-D and weight {weight.shape} 4-D")
    c_out, c_in, kh, kw = weight.shape
    if x.shape[0] != c_in:
        raise DimensionError(f"conv2d: input channels {x.shape} vs kernel channels {weight.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias {bias.shape} must be ({c_out},)")
    h, w = x.shape[1], x.shape[2]
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError(f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    out_h = (hp - kh) // stride + 1
    out_w = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c_in * kh * kw, out_h * out_w)
    w2d = weight.data.reshape(c_out, c_in * kh * kw)
    out_flat = w2d @ cols
    if bias is not None:
        out_flat = out_flat + bias.data[:, None]
    out_data = out_flat.reshape(c_out, out_h, out_w)

    def bw(out: Tensor):
        g = out.grad.reshape(c_out, out_h * out_w)
        if weight.requires_grad:
            weight.grad += (g @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            bias.grad += g.sum(axis=1)
        if x.requires_grad:
            dcols = (w2d.T @ g).reshape(c_in, kh, kw, out_h, out_w)
            dxp = np.zeros((c_in, hp, wp))
            for u in range(kh):
                for v in range(kw):
                    dxp[:, u:u + stride * out_h:stride,
                        v:v + stride * out_w:stride] += dcols[:, u, v]
            if padding:
                dxp = dxp[:, padding:-padding, padding:-padding]
            x.grad += dxp

    parents = (x, weight) if bias is None else (x, weight, bias)
    return ad._result(out_data, parents, bw)


class ConvStem:
    """Chain of 3x3 stride-2 convolutions with ReLU, halving each spatial dim."""

    def __init__(self, rng, in_channels: int, widths: tuple[int, ...]):
        self.widths = tuple(widths)
        self.weights = []
        self.biases = []
        prev = in_channels
        for width in widths:
            fan_in = prev * 9
            self.weights.append(ad.uniform_init(rng, (width, prev, 3, 3), fan_in))
            self.biases.append(ad.uniform_init(rng, (width,), fan_in))
            prev = width

    @property
    def total_stride(self) -> int:
        return 2 ** len(self.widths)

    def __call__(self, x: Tensor) -> Tensor:
        for w, b in zip(self.weights, self.biases):
            x = ad.relu(conv2d(x, w, b, stride=2, padding=1))
        return x

    def named_parameters(self, prefix: str):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.{i}.weight", w
            yield f"{prefix}.{i}.bias", b


class Backbone:
    """RGB stem + flow stem, channel-concatenated, projected to the hidden width."""

    def __init__(self, rng, image_h: int, image_w: int, feat_dim: int,
                 rgb_widths=(16, 32, 64), flow_widths=(8, 16, 32)):
        self.rgb_stem = ConvStem(rng, 3, rgb_widths)
        self.flow_stem = ConvStem(rng, 2, flow_widths)
        if self.rgb_stem.total_stride != self.flow_stem.total_stride:
            raise ConfigError("rgb and flow stems must share a total stride")
        stride = self.rgb_stem.total_stride
        if image_h % stride or image_w % stride:
            raise ConfigError(
                f"image {image_h}x{image_w} must be a multiple of the total stride {stride}")
        self.grid_h = image_h // stride
        self.grid_w = image_w // stride
        self.feat_dim = feat_dim
        fused = rgb_widths[-1] + flow_widths[-1]
        self.proj_w = ad.uniform_init(rng, (feat_dim, fused, 1, 1), fused)
        self.proj_b = ad.uniform_init(rng, (feat_dim,), fused)

    def __call__(self, rgb: Tensor, flow: Tensor) -> Tensor:
        """One frame + its flow map to a flattened [grid_h*grid_w, feat_dim] tensor."""
        if rgb.shape[1:] != flow.shape[1:]:
            raise DimensionError(f"rgb {rgb.shape} and flow {flow.shape} spatial dims differ")
        fused = ad.concat_rows([self.rgb_stem(rgb), self.flow_stem(flow)])
        projected = conv2d(fused, self.proj_w, self.proj_b)
        flat = ad.reshape(projected, (self.feat_dim, self.grid_h * self.grid_w))
        return ad.transpose2d(flat)

    def named_parameters(self, prefix: str):
        yield from self.rgb_stem.named_parameters(f"{prefix}.rgb")
        yield from self.flow_stem.named_parameters(f"{prefix}.flow")
        yield f"{prefix}.proj.weight", self.proj_w
        yield f"{prefix}.proj.bias", self.proj_b


def extract_frame_features(backbone: Backbone, rgb: np.ndarray, flow: np.ndarray) -> Tensor:
    """Convenience wrapper taking raw arrays for one time step."""
    return backbone(ad.constant(rgb), ad.constant(flow))
