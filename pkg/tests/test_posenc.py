"""Positional encoding tables and their distinguishability guarantees."""

import numpy as np
import pytest

from stmtl import autodiff as ad
from stmtl.errors import ConfigError
from stmtl.posenc import apply_pe, build_spatial_pe, build_temporal_pe


def test_origin_cell_is_alternating_zeros_and_ones():
    pe = build_spatial_pe(4, 4, 16)
    row = pe.table[0]
    assert np.array_equal(row[0::2], np.zeros(8))   # all sin channels
    assert np.array_equal(row[1::2], np.ones(8))    # all cos channels


def test_single_cell_grid():
    pe = build_spatial_pe(1, 1, 8)
    assert pe.table.shape == (1, 8)


def test_entry_range():
    pe = build_spatial_pe(8, 8, 64)
    assert pe.table.min() >= -1.0 and pe.table.max() <= 1.0


def test_formula_oracle_for_one_cell():
    # independently coded closed form for grid cell (3, 5) of an 8x8 / d=64 table
    h, w, d = 8, 8, 64
    pe = build_spatial_pe(h, w, d)
    row_idx, col_idx = 3, 5
    got = pe.table[row_idx * w + col_idx]
    half = d // 2
    expected = np.empty(d)
    for i in range(half // 2):
        freq = 1.0 / 10000.0 ** (2.0 * i / half)
        expected[2 * i] = np.sin(row_idx * freq)
        expected[2 * i + 1] = np.cos(row_idx * freq)
        expected[half + 2 * i] = np.sin(col_idx * freq)
        expected[half + 2 * i + 1] = np.cos(col_idx * freq)
    assert np.allclose(got, expected, atol=1e-15)


def test_injectivity_at_desk_dims():
    pe = build_spatial_pe(8, 8, 64)
    rounded = {tuple(np.round(row, 12)) for row in pe.table}
    assert len(rounded) == 64


def test_dim_not_divisible_by_four_rejected():
    with pytest.raises(ConfigError):
        build_spatial_pe(4, 4, 18)


def test_temporal_step_zero_pattern():
    pe = build_temporal_pe(4, 8)
    assert np.array_equal(pe.table[0], np.array([0.0, 1.0] * 4))


def test_two_steps_differ_by_lowest_frequency():
    pe = build_temporal_pe(2, 8)
    assert abs(pe.table[1, 0] - pe.table[0, 0]) >= np.sin(1.0) - 1e-12


def test_single_step_degenerate():
    pe = build_temporal_pe(1, 8)
    assert pe.table.shape == (1, 8)


def test_rows_pairwise_distinct_linf():
    # the reason the temporal code exists: identical frames at different
    # steps must stay distinguishable
    for d in (8, 16, 64):
        pe = build_temporal_pe(8, d)
        for a in range(8):
            for b in range(a + 1, 8):
                gap = np.abs(pe.table[a] - pe.table[b]).max()
                assert gap >= 0.5, (d, a, b, gap)


def test_tables_are_deterministic():
    a = build_spatial_pe(8, 8, 64)
    b = build_spatial_pe(8, 8, 64)
    assert np.array_equal(a.table, b.table)


class TestApplyPE:
    def setup_method(self):
        self.spe = build_spatial_pe(2, 2, 8)
        self.tpe = build_temporal_pe(2, 8)

    def test_zero_features_yield_tables(self):
        out = apply_pe(ad.constant(np.zeros((4, 8))), self.spe, self.tpe.table[0])
        assert np.array_equal(out.data, self.spe.table + self.tpe.table[0])

    def test_identical_frames_at_different_steps_differ(self):
        feats = np.random.default_rng(0).normal(size=(4, 8))
        a = apply_pe(ad.constant(feats), self.spe, self.tpe.table[0]).data
        b = apply_pe(ad.constant(feats), self.spe, self.tpe.table[1]).data
        assert np.abs(a - b).max() >= 0.5

    def test_additivity(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
        lhs = apply_pe(ad.constant(a + b), self.spe, self.tpe.table[0]).data
        rhs = apply_pe(ad.constant(a), self.spe, self.tpe.table[0]).data
        assert np.allclose(lhs - rhs, b, atol=1e-12)
