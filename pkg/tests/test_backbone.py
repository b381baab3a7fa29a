"""Convolution semantics and the two-stem fused feature extractor."""

import numpy as np
import pytest

from stmtl import autodiff as ad
from stmtl.backbone import Backbone, ConvStem, conv2d
from stmtl.errors import ConfigError, DimensionError


def t(data):
    return ad.Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class TestConv2d:
    def test_one_by_one_identity(self):
        rng = np.random.default_rng(0)
        x = t(rng.normal(size=(3, 5, 5)))
        w = t(np.eye(3).reshape(3, 3, 1, 1))
        out = conv2d(x, w)
        assert np.allclose(out.data, x.data, atol=1e-15)

    def test_all_ones_kernel_counts_taps(self):
        x = t(np.ones((1, 5, 5)))
        w = t(np.ones((1, 1, 3, 3)))
        out = conv2d(x, w, stride=1, padding=1)
        assert out.data[0, 2, 2] == 9.0       # interior: all nine taps
        assert out.data[0, 0, 0] == 4.0       # corner: four taps survive padding

    def test_stride_two_output_size(self):
        x = t(np.zeros((2, 64, 64)))
        w = t(np.zeros((4, 2, 3, 3)))
        assert conv2d(x, w, stride=2, padding=1).shape == (4, 32, 32)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d(t(np.zeros((3, 4, 4))), t(np.zeros((1, 2, 3, 3))))

    def test_grad_check_input(self):
        rng = np.random.default_rng(1)
        x = t(rng.normal(size=(2, 5, 5)))
        w = ad.constant(rng.normal(size=(3, 2, 3, 3)))
        b = ad.constant(rng.normal(size=3))
        mix = ad.constant(rng.normal(size=(3, 3, 3)))
        err = ad.grad_check(
            lambda v: ad.sum_all(ad.mul(conv2d(v, w, b, stride=2, padding=1), mix)),
            x, h=1e-6)
        assert err <= 1e-5

    def test_grad_check_weight_and_bias(self):
        rng = np.random.default_rng(2)
        x = ad.constant(rng.normal(size=(2, 5, 5)))
        w = t(rng.normal(size=(3, 2, 3, 3)))
        b = t(rng.normal(size=3))
        mix = ad.constant(rng.normal(size=(3, 5, 5)))
        err_w = ad.grad_check(
            lambda v: ad.sum_all(ad.mul(conv2d(x, v, b, stride=1, padding=1), mix)), w)
        err_b = ad.grad_check(
            lambda v: ad.sum_all(ad.mul(conv2d(x, w, v, stride=1, padding=1), mix)), b)
        assert err_w <= 1e-5 and err_b <= 1e-5


class TestBackbone:
    def make(self, seed=0):
        return Backbone(np.random.default_rng(seed), 64, 64, 64)

    def test_zero_inputs_with_zero_biases_give_zero_features(self):
        bb = self.make()
        for stem in (bb.rgb_stem, bb.flow_stem):
            for b in stem.biases:
                b.data[...] = 0.0
        bb.proj_b.data[...] = 0.0
        out = bb(ad.constant(np.zeros((3, 64, 64))), ad.constant(np.zeros((2, 64, 64))))
        assert np.allclose(out.data, 0.0, atol=1e-15)

    def test_shape_contract_64_to_8x8(self):
        out = self.make()(ad.constant(np.random.default_rng(3).random((3, 64, 64))),
                          ad.constant(np.zeros((2, 64, 64))))
        assert out.shape == (64, 64)   # 8*8 grid cells by feat_dim

    def test_statelessness(self):
        bb = self.make()
        rng = np.random.default_rng(4)
        rgb_a, rgb_b = rng.random((3, 64, 64)), rng.random((3, 64, 64))
        flow = rng.normal(size=(2, 64, 64))
        first = bb(ad.constant(rgb_a), ad.constant(flow)).data
        _ = bb(ad.constant(rgb_b), ad.constant(flow))
        again = bb(ad.constant(rgb_a), ad.constant(flow)).data
        assert np.array_equal(first, again)

    def test_grid_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            Backbone(np.random.default_rng(0), 60, 60, 64)

    def test_translation_covariance_up_to_stride(self):
        bb = self.make(seed=5)
        stride = bb.rgb_stem.total_stride
        rgb = np.zeros((3, 64, 64))
        rgb[:, 24:32, 24:32] = 1.0
        shifted = np.zeros((3, 64, 64))
        shifted[:, 24 + stride:32 + stride, 24:32] = 1.0
        flow = np.zeros((2, 64, 64))
        a = bb(ad.constant(rgb), ad.constant(flow)).data.reshape(8, 8, 64)
        b = bb(ad.constant(shifted), ad.constant(flow)).data.reshape(8, 8, 64)
        # interior rows shift by exactly one grid cell
        assert np.allclose(b[2:7], a[1:6], atol=1e-12)

    def test_flatten_is_row_major(self):
        # position p = row * grid_w + col: light up one coarse cell and check
        bb = self.make(seed=6)
        for stem in (bb.rgb_stem, bb.flow_stem):
            for b in stem.biases:
                b.data[...] = 0.0
        bb.proj_b.data[...] = 0.0
        rgb = np.zeros((3, 64, 64))
        row_cell, col_cell = 2, 5
        rgb[:, row_cell * 8:(row_cell + 1) * 8, col_cell * 8:(col_cell + 1) * 8] = 1.0
        feats = bb(ad.constant(rgb), ad.constant(np.zeros((2, 64, 64)))).data
        energies = np.abs(feats).sum(axis=1)
        assert energies.argmax() == row_cell * 8 + col_cell


def test_conv_stem_parameter_names():
    stem = ConvStem(np.random.default_rng(0), 3, (4, 8))
    names = [n for n, _ in stem.named_parameters("rgb")]
    assert names == ["rgb.0.weight", "rgb.0.bias", "rgb.1.weight", "rgb.1.bias"]
