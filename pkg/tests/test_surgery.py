"""Masks, pruning, shrinking, alignment invariants, and size accounting."""

import numpy as np
import pytest

from qnnprune import engine, zoo
from qnnprune.errors import MaskError
from qnnprune.network import (account, apply_filter_prune, apply_kernel_prune,
                              channel_spaces, shrink, validate)


def _rand_input(shape, seed=0):
    return np.random.default_rng(seed).normal(0, 1, shape).astype(np.float32)


class TestFilterPrune:
    def test_empty_prune_set_is_identity(self):
        net = zoo.desk4(seed=1)
        before = net.layer("conv2").out_mask.copy()
        apply_filter_prune(net, "conv2", [])
        assert np.array_equal(net.layer("conv2").out_mask, before)

    def test_consumer_in_mask_cleared(self):
        net = zoo.desk4(seed=1)
        apply_filter_prune(net, "conv2", [1])
        assert not net.layer("conv2").out_mask[1]
        assert not net.layer("conv3").in_mask[1]
        assert not net.layer("bn2").out_mask[1]

    def test_fc_block_columns_cleared(self):
        net = zoo.desk4(seed=1)
        apply_filter_prune(net, "conv4", [0, 5])
        fc = net.layer("fc")
        assert not fc.in_mask[0] and not fc.in_mask[5]
        assert fc.in_mask.sum() == 62

    def test_residual_tie_group(self):
        net = zoo.desk_residual(seed=1)
        apply_filter_prune(net, "conv3", [2, 3])
        assert not net.layer("convd").out_mask[2]
        assert not net.layer("bnd").out_mask[3]
        assert not net.layer("fc").in_mask[2]
        validate(net)

    def test_prune_all_filters_rejected(self):
        net = zoo.desk4(seed=1)
        with pytest.raises(MaskError):
            apply_filter_prune(net, "conv2", list(range(32)))

    def test_double_prune_rejected(self):
        net = zoo.desk4(seed=1)
        apply_filter_prune(net, "conv2", [3])
        with pytest.raises(MaskError):
            apply_filter_prune(net, "conv2", [3])

    def test_misaligned_masks_detected(self):
        net = zoo.desk_residual(seed=1)
        net.layer("conv3").out_mask[4] = False  # bypassing apply_filter_prune
        with pytest.raises(MaskError):
            validate(net)


class TestKernelPrune:
    def test_zeroes_weights_and_counts(self):
        net = zoo.desk4(seed=1)
        bits_before = account(net).total_bits
        apply_kernel_prune(net, "conv2", [(0, 1), (3, 2)])
        l = net.layer("conv2")
        assert np.all(l.weight[1, 0] == 0)
        assert not l.kernel_mask[1, 0] and not l.kernel_mask[2, 3]
        assert account(net).total_bits == bits_before - 2 * 9  # 3x3, 1-bit

    def test_empty_set_identical_outputs(self):
        net = zoo.desk4(seed=1)
        x = _rand_input((2, 3, 32, 32))
        ref, _ = engine.run_forward(net, x)
        apply_kernel_prune(net, "conv3", [])
        out, _ = engine.run_forward(net, x)
        assert np.array_equal(ref, out)

    def test_prune_whole_filter_leaves_bias_only_map(self):
        net = zoo.desk_residual(seed=1)
        l = net.layer("conv2")
        l.bias = np.full(16, 0.25, dtype=np.float32)
        apply_kernel_prune(net, "conv2", [(c, 0) for c in range(8)])
        x = _rand_input((2, 3, 16, 16))
        out, _ = engine.run_forward(net, x)  # graph still consistent
        y, _ = engine.conv_forward(l, _rand_input((2, 8, 8, 8), seed=3))
        assert np.allclose(y[:, 0], 0.25)

    def test_non_conv_rejected(self):
        net = zoo.desk4(seed=1)
        with pytest.raises(MaskError):
            apply_kernel_prune(net, "fc", [(0, 0)])


class TestShrink:
    def test_all_true_masks_identity(self):
        net = zoo.desk4(seed=2)
        x = _rand_input((3, 3, 32, 32))
        ref, _ = engine.run_forward(net, x)
        out, _ = engine.run_forward(shrink(net), x)
        np.testing.assert_array_equal(ref, out)

    def test_idempotent(self):
        net = zoo.desk_residual(seed=2)
        apply_filter_prune(net, "conv2", [0, 1])
        s1 = shrink(net)
        s2 = shrink(s1)
        for a, b in zip(s1.layers, s2.layers):
            if a.weight is not None:
                np.testing.assert_array_equal(a.weight, b.weight)

    @pytest.mark.parametrize("seed", range(6))
    def test_masked_forward_equals_shrunk(self, seed):
        rng = np.random.default_rng(seed)
        net = zoo.desk_residual(seed=seed)
        for lid, n_units in (("conv1", 8), ("conv2", 16), ("conv3", 16)):
            k = rng.integers(0, n_units // 2)
            if k:
                live = net.layer(lid).live_out()
                prune = rng.choice(live, size=k, replace=False)
                apply_filter_prune(net, lid, prune)
        validate(net)
        x = _rand_input((4, 3, 16, 16), seed=seed)
        masked, _ = engine.run_forward(net, x)
        shrunk, _ = engine.run_forward(shrink(net), x)
        assert np.abs(masked - shrunk).max() <= 1e-5

    def test_shrunk_shapes(self):
        net = zoo.desk4(seed=3)
        apply_filter_prune(net, "conv3", [0, 1, 2, 3])
        s = shrink(net)
        assert s.layer("conv3").weight.shape[0] == 44
        assert s.layer("conv4").weight.shape[1] == 44
        assert s.layer("bn3").gamma.shape[0] == 44
        assert all(s.layer("conv3").out_mask)


class TestAccount:
    def test_table_rows_resnet18(self):
        net = zoo.resnet18_imagenet("xnor")
        rep = account(net)
        conv1 = rep.layer_row("conv1")
        assert conv1.params == 9408
        assert abs(conv1.size_mib - 0.035) <= 0.001
        fc = rep.layer_row("fc")
        assert fc.params == 513000
        assert abs(fc.size_mib - 1.956) <= 0.001
        conv15 = rep.layer_row("conv15")
        assert conv15.params == 2359296
        assert abs(conv15.size_mib - 0.281) <= 0.001

    def test_bit_rule(self):
        net = zoo.desk4("bnn", seed=1)
        rep = account(net)
        conv2 = rep.layer_row("conv2")   # 32 x 16 x 3 x 3 at 1 bit, no bias
        assert conv2.bits == 32 * 16 * 9
        bn2 = rep.layer_row("bn2")       # gamma, beta, mean, var at 32 bits
        assert bn2.bits == 4 * 32 * 32
        fc = rep.layer_row("fc")         # full precision weights + bias
        assert fc.bits == (64 * 10 + 10) * 32

    def test_xnor_scales_in_totals_not_conv_rows(self):
        bnn_rep = account(zoo.desk4("bnn", seed=1))
        xnor_rep = account(zoo.desk4("xnor", seed=1))
        assert (xnor_rep.layer_row("conv2").bits
                == bnn_rep.layer_row("conv2").bits)
        # alpha rows for the three quantized convs (conv1 stays fp)
        scale_bits = 32 * (32 + 48 + 64)
        assert xnor_rep.total_bits == bnn_rep.total_bits + scale_bits
        assert xnor_rep.layer_row("conv2.alpha").bits == 32 * 32

    def test_masked_bits_subtract_exactly(self):
        net = zoo.desk_residual(seed=4)
        base = account(net)
        apply_filter_prune(net, "conv2", [0, 1, 2])
        masked = account(net)
        # conv2 loses 3 filters of 8x3x3 one-bit kernels; conv3 loses
        # 3 input channels of 16 3x3 kernels; bn2 loses 3 channels.
        expected = 3 * 8 * 9 + 3 * 16 * 9 + 3 * 4 * 32
        assert base.total_bits - masked.total_bits == expected
        shrunk = account(shrink(net))
        assert shrunk.total_bits == masked.total_bits

    def test_network_ratio_in_bits(self):
        net = zoo.desk4(seed=5)
        base = account(net)
        apply_filter_prune(net, "conv4", list(range(32)))
        after = account(net)
        assert after.pruned_pct == pytest.approx(
            100.0 * (1 - after.total_bits / base.total_bits), abs=1e-9)

    def test_runtime_under_one_second(self):
        import time
        t0 = time.perf_counter()
        net = zoo.resnet18_imagenet("xnor")
        account(net)
        assert time.perf_counter() - t0 < 1.0


class TestChannelSpaces:
    def test_residual_groups_merge(self):
        net = zoo.desk_residual(seed=0)
        space_of, spaces = channel_spaces(net)
        i3 = net.index_of("conv3")
        idd = net.index_of("convd")
        assert space_of[i3] == space_of[idd]
        sp = spaces[space_of[i3]]
        assert sorted(net.layers[p].id for p in sp.producers) == ["conv3", "convd"]
        assert net.index_of("fc") in sp.consumers

    def test_chain_spaces_distinct(self):
        net = zoo.desk4(seed=0)
        space_of, _ = channel_spaces(net)
        ids = [net.index_of(f"conv{i}") for i in range(1, 5)]
        assert len({space_of[i] for i in ids}) == 4
