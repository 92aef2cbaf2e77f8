"""Quantizer codebooks, scales, idempotence, and STE gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qnnprune import quantize
from qnnprune.bitpack import unpack
from qnnprune.errors import QnnError
from qnnprune.quantize import (dequantize_weights, quantize_act_values,
                               quantize_weight_values, quantize_weights,
                               scheme_from_name, ste_backward)

BNN = scheme_from_name("bnn")
BC = scheme_from_name("binaryconnect")
XNOR = scheme_from_name("xnor")
DOREFA = scheme_from_name("dorefa2")


class TestWeightQuantization:
    def test_bnn_sign(self):
        w = np.array([0.3, -0.4, 1.2, -0.1])
        assert quantize_weight_values(w, BNN).tolist() == [1, -1, 1, -1]

    def test_sign_zero_positive(self):
        assert quantize_weight_values(np.array([0.0]), BNN)[0] == 1.0

    def test_xnor_scale_is_mean_abs(self):
        w = np.array([[0.3, -0.4, 1.2, -0.1]])  # one filter
        vals = quantize_weight_values(w, XNOR)
        assert vals[0].tolist() == [0.5, -0.5, 0.5, -0.5]
        assert quantize.filter_scales(w)[0] == pytest.approx(0.5)

    def test_sign_fixed_point(self):
        w = np.array([1.0, -1.0, 1.0])
        assert np.array_equal(quantize_weight_values(w, BNN), w)

    def test_dorefa_levels(self):
        w = np.random.default_rng(0).normal(size=200)
        vals = quantize_weight_values(w, DOREFA)
        assert set(np.round(vals, 6)) <= {-1.0, -0.333333, 0.333333, 1.0}

    def test_dorefa_extremes_hit_endpoints(self):
        w = np.array([-5.0, 5.0, 0.0])
        vals = quantize_weight_values(w, DOREFA)
        assert vals[0] == -1.0 and vals[1] == 1.0

    @pytest.mark.parametrize("scheme", [BNN, BC, XNOR, DOREFA])
    def test_idempotent_on_codebook(self, scheme):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(6, 4)).astype(np.float32)
        q1 = quantize_weight_values(w, scheme)
        q2 = quantize_weight_values(q1, scheme)
        np.testing.assert_allclose(q2, q1, atol=1e-6)

    def test_pack_round_trip_codes(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
        for scheme in (BNN, XNOR, DOREFA):
            packed = quantize_weights(w, scheme)
            vals = dequantize_weights(packed, scheme)
            np.testing.assert_allclose(vals, quantize_weight_values(w, scheme),
                                       atol=1e-6)

    def test_xnor_scale_nonnegative_zero_only_for_zero_filter(self):
        w = np.array([[0.0, 0.0], [0.5, -0.25]])
        scales = quantize.filter_scales(w)
        assert scales[0] == 0.0
        assert scales[1] > 0.0

    def test_dorefa_codes_ascending_levels(self):
        w = np.array([-2.0, -0.1, 0.1, 2.0])
        packed = quantize_weights(w, DOREFA)
        codes = unpack(packed)
        vals = quantize.DOREFA2_WEIGHT_LEVELS[codes]
        np.testing.assert_allclose(vals, quantize_weight_values(w, DOREFA))


class TestActivationQuantization:
    def test_binaryconnect_identity(self):
        a = np.array([0.2, -3.0, 7.5])
        assert quantize_act_values(a, BC) is a

    def test_bnn_sign(self):
        a = np.array([0.2, -0.7])
        assert quantize_act_values(a, BNN).tolist() == [1.0, -1.0]

    def test_dorefa_round_half_even(self):
        # 0.5 -> 3x = 1.5 -> rounds to 2 (half to even) -> 2/3
        a = np.array([0.5])
        assert quantize_act_values(a, DOREFA)[0] == pytest.approx(2.0 / 3.0)

    def test_dorefa_clip_and_levels(self):
        a = np.array([-1.0, 0.1, 0.4, 0.9, 2.0])
        vals = quantize_act_values(a, DOREFA)
        assert set(np.round(vals, 6)) <= {0.0, 0.333333, 0.666667, 1.0}
        assert vals[0] == 0.0 and vals[-1] == 1.0


class TestSte:
    def test_inside_clip_passes(self):
        g = ste_backward(np.array([2.0]), np.array([0.5]), BNN)
        assert g[0] == 2.0

    def test_outside_clip_zero(self):
        g = ste_backward(np.array([2.0]), np.array([1.5]), BNN)
        assert g[0] == 0.0

    def test_dorefa_activation_clip_window(self):
        pre = np.array([-0.5, 0.3, 1.2])
        g = ste_backward(np.ones(3), pre, DOREFA, role="activation")
        assert g.tolist() == [0.0, 1.0, 0.0]

    def test_binaryconnect_activation_identity(self):
        g = ste_backward(np.array([3.0]), np.array([9.0]), BC, role="activation")
        assert g[0] == 3.0

    @given(st.integers(0, 2**32))
    @settings(max_examples=30, deadline=None)
    def test_matches_clipped_identity_finite_difference(self, seed):
        # surrogate: f(x) = clip(x, -1, 1); STE gradient should match df/dx
        rng = np.random.default_rng(seed)
        pre = rng.uniform(-2, 2, size=50)
        pre = pre[np.abs(np.abs(pre) - 1.0) > 1e-3]  # keep away from the kink
        g_up = rng.normal(size=pre.size)
        h = 1e-6
        fd = (np.clip(pre + h, -1, 1) - np.clip(pre - h, -1, 1)) / (2 * h)
        expected = g_up * fd
        got = ste_backward(g_up, pre, BNN)
        np.testing.assert_allclose(got, expected, rtol=1e-4, atol=1e-9)

    def test_unknown_role(self):
        with pytest.raises(QnnError):
            ste_backward(np.ones(1), np.ones(1), BNN, role="bias")


def test_unknown_scheme_name():
    with pytest.raises(QnnError):
        scheme_from_name("int8")


def test_scheme_bit_widths():
    assert (BC.weight_bits, BC.act_bits) == (1, 32)
    assert (BNN.weight_bits, BNN.act_bits) == (1, 1)
    assert (XNOR.weight_bits, XNOR.act_bits) == (1, 1)
    assert (DOREFA.weight_bits, DOREFA.act_bits) == (2, 2)
    assert scheme_from_name("bnn-fully").fully_binarized
