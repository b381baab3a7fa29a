"""Fixed sinusoidal positional encodings for the spatial grid and for time steps.

Both tables are parameter-free and deterministic.  The spatial table
splits the channel budget between the row and column coordinates; the
temporal table is a plain 1-D sinusoid whose row t is broadcast over all
grid positions of time step t, added just before traces are aggregated.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class SpatialPE:
    table: np.ndarray  # [H*W, d]
    grid_h: int
    grid_w: int


@dataclass(frozen=True)
class TemporalPE:
    table: np.ndarray  # [T, d]
    steps: int


def _sinusoid(positions: np.ndarray, channels: int) -> np.ndarray:
    """Classic sin/cos interleave: channel 2i is sin, 2i+1 is cos."""
    pairs = channels // 2
    freqs = 1.0 / (10000.0 ** (2.0 * np.arange(pairs) / channels))
    angles = positions[:, None] * freqs[None, :]
    out = np.empty((positions.size, channels))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def build_spatial_pe(grid_h: int, grid_w: int, dim: int) -> SpatialPE:
    """Encode each grid cell (row index in the first half of the channels,
    column index in the second), flattened row-major to [H*W, d]."""
    if dim % 4 != 0:
        raise ConfigError(f"spatial encoding needs dim divisible by 4, got {dim}")
    half = dim // 2
    rows = _sinusoid(np.arange(grid_h, dtype=np.float64), half)
    cols = _sinusoid(np.arange(grid_w, dtype=np.float64), half)
    table = np.empty((grid_h * grid_w, dim))
    table[:, :half] = np.repeat(rows, grid_w, axis=0)
    table[:, half:] = np.tile(cols, (grid_h, 1))
    return SpatialPE(table, grid_h, grid_w)


def build_temporal_pe(steps: int, dim: int) -> TemporalPE:
    if dim % 2 != 0:
        raise ConfigError(f"temporal encoding needs even dim, got {dim}")
    return TemporalPE(_sinusoid(np.arange(steps, dtype=np.float64), dim), steps)


def apply_pe(features: ad.Tensor, spe: SpatialPE, tpe_row: np.ndarray) -> ad.Tensor:
    """features + spatial table + broadcast time-step row (all additive)."""
    if features.shape != spe.table.shape:
        raise DimensionError(
            f"apply_pe: features {features.shape} vs spatial table {spe.table.shape}")
    if tpe_row.shape != (spe.table.shape[1],):
        raise DimensionError(
            f"apply_pe: temporal row {tpe_row.shape} vs width {spe.table.shape[1]}")
    return ad.add(ad.add(features, ad.constant(spe.table)), ad.constant(tpe_row))
