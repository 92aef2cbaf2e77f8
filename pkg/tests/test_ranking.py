"""Kernel/filter rankings against naive double-loop re-computation."""

import numpy as np
import pytest

from qnnprune import ranking
from qnnprune.errors import ShapeError
from qnnprune.quantize import quantize_weight_values, scheme_from_name

BNN = scheme_from_name("bnn")
XNOR = scheme_from_name("xnor")


def _naive_angle(v, q):
    v = v.reshape(-1).astype(np.float64)
    q = q.reshape(-1).astype(np.float64)
    phi = (v @ q) / (np.linalg.norm(v) * np.linalg.norm(q))
    return float(np.arccos(np.clip(phi, -1.0, 1.0)))


def _naive_euclid(v, q):
    return float(np.linalg.norm(v.reshape(-1) - q.reshape(-1)))


class TestKernelRanking:
    def test_codebook_kernel_ranked_last(self):
        w = np.ones((1, 2, 2, 2), dtype=np.float32)
        w[0, 0] = [[1.0, -1.0], [1.0, -1.0]]       # exactly on the codebook
        w[0, 1] = [[0.3, -0.2], [0.9, 0.1]]
        res = ranking.rank_kernels(w, BNN, "angle")
        assert res.scores[(0, 0)] == pytest.approx(0.0, abs=1e-7)
        assert res.order[-1] == (0, 0)

    def test_two_kernel_hand_order(self):
        w = np.zeros((2, 1, 1, 2), dtype=np.float32)
        w[0, 0, 0] = [3.0, -4.0]
        w[1, 0, 0] = [1.0, -1.0]
        res = ranking.rank_kernels(w, BNN, "angle")
        assert res.scores[(0, 1)] == pytest.approx(0.0, abs=1e-7)
        assert res.order[0] == (0, 0)   # larger angle pruned first
        assert res.order[-1] == (0, 1)

    @pytest.mark.parametrize("metric,oracle",
                             [("angle", _naive_angle), ("euclid", _naive_euclid)])
    def test_matches_naive_double_loop(self, metric, oracle):
        rng = np.random.default_rng(11)
        w = rng.normal(size=(8, 4, 3, 3))
        q = quantize_weight_values(w, BNN)
        res = ranking.rank_kernels(w, BNN, metric)
        for k in range(8):
            for c in range(4):
                assert res.scores[(c, k)] == oracle(w[k, c], q[k, c])

    def test_rejects_non_conv(self):
        with pytest.raises(ShapeError):
            ranking.rank_kernels(np.zeros((4, 6)), BNN, "angle")

    def test_prune_first_is_descending_with_index_ties(self):
        rng = np.random.default_rng(12)
        w = rng.normal(size=(3, 2, 2, 2))
        res = ranking.rank_kernels(w, BNN, "euclid")
        scores = [res.scores[u] for u in res.order]
        assert scores == sorted(scores, reverse=True)
        resorted = sorted(res.scores, key=lambda u: (-res.scores[u], u))
        assert res.order == resorted


class TestOwnFilterRanking:
    def test_single_filter(self):
        w = np.random.default_rng(0).normal(size=(1, 3, 2, 2))
        res = ranking.rank_filters_own(w, BNN, "angle")
        assert res.order == [0]

    def test_codebook_filter_distance_zero(self):
        w = np.sign(np.random.default_rng(1).normal(size=(2, 2, 3, 3)))
        res = ranking.rank_filters_own(w, BNN, "euclid")
        assert all(res.scores[k] == 0.0 for k in (0, 1))

    @pytest.mark.parametrize("metric,oracle",
                             [("angle", _naive_angle), ("euclid", _naive_euclid)])
    def test_matches_naive(self, metric, oracle):
        rng = np.random.default_rng(13)
        w = rng.normal(size=(4, 2, 3, 3))
        q = quantize_weight_values(w, BNN)
        res = ranking.rank_filters_own(w, BNN, metric)
        for k in range(4):
            assert res.scores[k] == oracle(w[k], q[k])

    def test_fc_layer_supported(self):
        rng = np.random.default_rng(14)
        w = rng.normal(size=(5, 7))
        res = ranking.rank_filters_own(w, BNN, "angle")
        assert set(res.scores) == set(range(5))


class TestInteractionRanking:
    def test_single_next_filter_is_its_kernel_distance(self):
        rng = np.random.default_rng(15)
        w_next = rng.normal(size=(1, 3, 3, 3))
        q = quantize_weight_values(w_next, BNN)
        res = ranking.rank_filters_interaction(w_next, BNN, "angle")
        for k in range(3):
            assert res.scores[k] == pytest.approx(_naive_angle(w_next[0, k], q[0, k]))

    def test_codebook_channel_ranked_keep_most(self):
        rng = np.random.default_rng(16)
        w_next = rng.normal(size=(4, 3, 2, 2))
        w_next[:, 0] = np.sign(w_next[:, 0])  # channel 0 exactly quantized
        res = ranking.rank_filters_interaction(w_next, BNN, "euclid")
        assert res.scores[0] == 0.0
        assert res.order[-1] == 0

    @pytest.mark.parametrize("metric,oracle",
                             [("angle", _naive_angle), ("euclid", _naive_euclid)])
    def test_matches_naive_double_loop(self, metric, oracle):
        rng = np.random.default_rng(17)
        w_next = rng.normal(size=(6, 8, 3, 3))
        q = quantize_weight_values(w_next, BNN)
        res = ranking.rank_filters_interaction(w_next, BNN, metric)
        for k in range(8):
            expected = np.mean([oracle(w_next[j, k], q[j, k]) for j in range(6)])
            assert res.scores[k] == pytest.approx(expected, abs=1e-12)

    def test_invariant_to_next_filter_permutation(self):
        rng = np.random.default_rng(18)
        w_next = rng.normal(size=(6, 4, 3, 3))
        res1 = ranking.rank_filters_interaction(w_next, BNN, "angle")
        res2 = ranking.rank_filters_interaction(w_next[rng.permutation(6)],
                                                BNN, "angle")
        for k in range(4):
            assert res1.scores[k] == pytest.approx(res2.scores[k], abs=1e-12)
        assert res1.order == res2.order

    def test_angle_order_scale_invariant(self):
        rng = np.random.default_rng(19)
        w_next = rng.normal(size=(5, 6, 3, 3))
        res1 = ranking.rank_filters_interaction(w_next, BNN, "angle")
        res2 = ranking.rank_filters_interaction(3.7 * w_next, BNN, "angle")
        assert res1.order == res2.order

    def test_fc_next_layer_as_1x1_kernels(self):
        rng = np.random.default_rng(20)
        w_next = rng.normal(size=(10, 6))
        res = ranking.rank_filters_interaction(w_next, BNN, "euclid")
        q = quantize_weight_values(w_next, BNN)
        for k in range(6):
            expected = np.mean(np.abs(w_next[:, k] - q[:, k]))
            assert res.scores[k] == pytest.approx(expected, abs=1e-12)

    def test_xnor_scale_inside_euclid(self):
        rng = np.random.default_rng(21)
        w_next = rng.normal(size=(3, 4, 3, 3))
        q = quantize_weight_values(w_next, XNOR)  # includes per-filter alpha
        res = ranking.rank_filters_interaction(w_next, XNOR, "euclid")
        for k in range(4):
            expected = np.mean([_naive_euclid(w_next[j, k], q[j, k])
                                for j in range(3)])
            assert res.scores[k] == pytest.approx(expected, abs=1e-12)
