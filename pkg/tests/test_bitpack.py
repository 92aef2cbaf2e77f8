"""Bit packing, unpacking, and the xnor/popcount dot product."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qnnprune import bitpack
from qnnprune.bitpack import flatten_filter, pack, popcount_dot, unpack
from qnnprune.errors import ShapeError


class TestFlattenFilter:
    def test_row_major_order(self):
        t = np.array([[[[1.0, 2.0]]], [[[3.0, 4.0]]]])  # 2x1x1x2
        assert flatten_filter(t, 1).tolist() == [3.0, 4.0]

    def test_round_trip_identity(self):
        rng = np.random.default_rng(0)
        t = rng.normal(size=(5, 3, 2, 2))
        v = flatten_filter(t, 2)
        assert np.array_equal(v.reshape(3, 2, 2), t[2])

    def test_conv1_filter_length(self):
        t = np.zeros((64, 3, 7, 7))
        assert flatten_filter(t, 0).size == 147  # 3*7*7

    def test_out_of_range(self):
        with pytest.raises(ShapeError):
            flatten_filter(np.zeros((4, 2, 3, 3)), 4)
        with pytest.raises(ShapeError):
            flatten_filter(np.zeros((4, 2, 3, 3)), -1)


class TestPack:
    def test_all_ones_single_word(self):
        p = pack(np.ones(64, dtype=np.uint8), 1)
        assert len(p.words) == 1
        assert p.words[0] == np.uint64(0xFFFFFFFFFFFFFFFF)

    def test_lsb_first(self):
        p = pack(np.array([1, 0, 1], dtype=np.uint8), 1)
        assert p.words[0] == np.uint64(0b101)

    def test_padding_codes_zero(self):
        p = pack(np.ones(3, dtype=np.uint8), 1)
        assert p.words[0] >> np.uint64(3) == 0

    def test_code_out_of_range(self):
        with pytest.raises(ShapeError):
            pack(np.array([2]), 1)
        with pytest.raises(ShapeError):
            pack(np.array([4]), 2)

    def test_word_count_invariant(self):
        for n in (1, 63, 64, 65, 1000):
            p = pack(np.zeros(n, dtype=np.uint8), 1)
            assert len(p.words) == (n + 63) // 64
            p2 = pack(np.zeros(n, dtype=np.uint8), 2)
            assert len(p2.words) == (2 * n + 63) // 64

    @given(st.integers(1, 2), st.integers(1, 300), st.integers(0, 2**32))
    @settings(max_examples=60, deadline=None)
    def test_round_trip(self, bits, n, seed):
        rng = np.random.default_rng(seed)
        codes = rng.integers(0, 2**bits, size=n)
        assert np.array_equal(unpack(pack(codes, bits)), codes)

    def test_round_trip_1000_codes(self):
        rng = np.random.default_rng(1)
        codes = rng.integers(0, 2, size=(10, 10, 10))
        out = unpack(pack(codes, 1))
        assert out.shape == (10, 10, 10)
        assert np.array_equal(out, codes)


def _pm1(codes):
    return np.where(np.asarray(codes) == 1, 1, -1)


class TestPopcountDot:
    def test_hand_example(self):
        a = pack(np.array([1, 0, 1]), 1)  # +1 -1 +1
        b = pack(np.array([1, 1, 0]), 1)  # +1 +1 -1
        assert popcount_dot(a, b) == -1

    def test_self_dot_is_length(self):
        rng = np.random.default_rng(2)
        for n in (1, 7, 64, 130):
            codes = rng.integers(0, 2, size=n)
            p = pack(codes, 1)
            assert popcount_dot(p, p) == n

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            popcount_dot(pack(np.ones(3, dtype=np.uint8), 1),
                         pack(np.ones(4, dtype=np.uint8), 1))

    def test_requires_one_bit(self):
        with pytest.raises(ShapeError):
            popcount_dot(pack(np.zeros(4, dtype=np.uint8), 2),
                         pack(np.zeros(4, dtype=np.uint8), 2))

    def test_exhaustive_small(self):
        # every (a, b) pair for n <= 8
        for n in range(1, 9):
            grid = np.arange(2**n, dtype=np.uint64)
            codes = (grid[:, None] >> np.arange(n, dtype=np.uint64)) & 1
            packed = [pack(c, 1) for c in codes]
            vals = _pm1(codes)
            for i in range(2**n):
                expected = vals @ vals[i]
                got = [popcount_dot(packed[i], pj) for pj in packed]
                assert np.array_equal(got, expected)

    @given(st.integers(9, 200), st.integers(0, 2**32))
    @settings(max_examples=80, deadline=None)
    def test_matches_float_dot(self, n, seed):
        rng = np.random.default_rng(seed)
        a = rng.integers(0, 2, size=n)
        b = rng.integers(0, 2, size=n)
        expected = float(_pm1(a).astype(np.float64) @ _pm1(b).astype(np.float64))
        assert popcount_dot(pack(a, 1), pack(b, 1)) == expected

    def test_padding_never_contributes(self):
        # identical logical content, different garbage beyond length
        a = pack(np.array([1, 0, 1, 1, 0]), 1)
        b = pack(np.array([0, 0, 1, 1, 1]), 1)
        expected = popcount_dot(a, b)
        a2 = bitpack.PackedTensor((5,), 1, a.words | np.uint64(0xFFFFFFFF00000000))
        b2 = bitpack.PackedTensor((5,), 1, b.words | np.uint64(0xFFFFFFFF00000000))
        assert popcount_dot(a2, b2) == expected


class TestPopcountDotMany:
    def test_matches_scalar_version(self):
        rng = np.random.default_rng(3)
        n = 70
        w = rng.integers(0, 2, size=(4, n))
        p = rng.integers(0, 2, size=(6, n))
        w_words = np.stack([pack(r, 1).words for r in w])
        p_words = np.stack([pack(r, 1).words for r in p])
        got = bitpack.popcount_dot_many(w_words, p_words, n)
        for i in range(4):
            for j in range(6):
                assert got[i, j] == popcount_dot(pack(w[i], 1), pack(p[j], 1))

    def test_validity_mask_excludes_positions(self):
        n = 10
        a = pack(np.ones(n, dtype=np.uint8), 1)
        b = pack(np.ones(n, dtype=np.uint8), 1)
        valid = pack(np.array([1] * 6 + [0] * 4), 1).words[None, :]
        got = bitpack.popcount_dot_many(a.words[None, :], b.words[None, :],
                                        n, valid)
        assert got[0, 0] == 6
