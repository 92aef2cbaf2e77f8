"""Bit-packed code tensors and the xnor/popcount dot product.

Dense real tensors are plain ``numpy`` float arrays throughout the package.
Quantized tensors are stored as :class:`PackedTensor`: little-endian 64-bit
words, codes packed LSB-first in row-major element order, padded with zero
codes up to a word boundary.  For 1-bit codes the convention is

    code 1 <-> +1,    code 0 <-> -1

so that the integer dot product of two +-1 vectors of length n is exactly
``2 * popcount(xnor(a, b)) - n``.  2-bit codes index a quantizer's level set
in ascending order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from qnnprune.errors import ShapeError

WORD_BITS = 64


def _num_words(n_codes: int, bits_per_code: int) -> int:
    return (n_codes * bits_per_code + WORD_BITS - 1) // WORD_BITS


@dataclass
class PackedTensor:
    """Bit-packed code tensor plus optional per-filter scale factors."""

    shape: tuple
    bits_per_code: int
    words: np.ndarray  # uint64, little-endian
    scales: np.ndarray | None = field(default=None)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.bits_per_code not in (1, 2):
            raise ShapeError(f"unsupported bits_per_code {self.bits_per_code}")
        expected = _num_words(self.size, self.bits_per_code)
        if len(self.words) != expected:
            raise ShapeError(
                f"word count {len(self.words)} != ceil({self.size}*"
                f"{self.bits_per_code}/64) = {expected}"
            )


def pack(codes: np.ndarray, bits_per_code: int, scales: np.ndarray | None = None) -> PackedTensor:
    """Pack an integer code tensor into 64-bit words, LSB-first.

    Every code must fit in ``bits_per_code`` bits; padding positions beyond
    the last element hold zero codes.
    """
    codes = np.asarray(codes)
    flat = codes.reshape(-1).astype(np.uint64)
    if flat.size and int(flat.max(initial=0)) >= (1 << bits_per_code):
        raise ShapeError(f"code out of range for {bits_per_code}-bit packing")
    n = flat.size
    nwords = _num_words(n, bits_per_code)
    # Scatter each code into its word via shifts; vectorized over elements.
    positions = np.arange(n, dtype=np.uint64) * np.uint64(bits_per_code)
    word_idx = (positions // WORD_BITS).astype(np.int64)
    bit_off = (positions % WORD_BITS).astype(np.uint64)
    words = np.zeros(nwords, dtype=np.uint64)
    np.bitwise_or.at(words, word_idx, flat << bit_off)
    return PackedTensor(shape=codes.shape, bits_per_code=bits_per_code,
                        words=words, scales=scales)


def unpack(t: PackedTensor) -> np.ndarray:
    """Inverse of :func:`pack`; returns the integer code tensor."""
    n = t.size
    bits = t.bits_per_code
    positions = np.arange(n, dtype=np.uint64) * np.uint64(bits)
    word_idx = (positions // WORD_BITS).astype(np.int64)
    bit_off = (positions % WORD_BITS).astype(np.uint64)
    mask = np.uint64((1 << bits) - 1)
    codes = (t.words[word_idx] >> bit_off) & mask
    return codes.astype(np.int64).reshape(t.shape)


def flatten_filter(t: np.ndarray, k: int) -> np.ndarray:
    """Return filter ``k`` of a weight tensor as a flat row-major vector.

    The leading axis indexes filters; a conv weight of shape (K, C, h, w)
    yields a vector of length C*h*w.
    """
    t = np.asarray(t)
    if t.ndim < 1:
        raise ShapeError("weight tensor must have a filter axis")
    if not 0 <= k < t.shape[0]:
        raise ShapeError(f"filter index {k} out of range for {t.shape[0]} filters")
    return t[k].reshape(-1)


def _valid_mask_words(n: int, nwords: int) -> np.ndarray:
    """Word mask that zeroes padding bits beyond the first n 1-bit codes."""
    mask = np.full(nwords, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    rem = n % WORD_BITS
    if rem and nwords:
        mask[n // WORD_BITS] = np.uint64((1 << rem) - 1)
        mask[n // WORD_BITS + 1:] = np.uint64(0)
    return mask


def popcount_dot(a: PackedTensor, b: PackedTensor) -> int:
    """Integer dot product of two +-1 vectors held as 1-bit packed rows.

    Computes ``2 * popcount(xnor(a, b)) - n`` over the n valid positions,
    which equals sum(a_i * b_i) exactly.  Padding bits never contribute.
    """
    if a.bits_per_code != 1 or b.bits_per_code != 1:
        raise ShapeError("popcount_dot requires 1-bit codes")
    if a.size != b.size:
        raise ShapeError(f"length mismatch: {a.size} != {b.size}")
    n = a.size
    agree = ~(a.words ^ b.words) & _valid_mask_words(n, len(a.words))
    pop = int(np.bitwise_count(agree).sum())
    return 2 * pop - n


def popcount_dot_many(weights: np.ndarray, patches: np.ndarray, n: int,
                      valid: np.ndarray | None = None) -> np.ndarray:
    """Batched xnor/popcount dot: each packed weight row against each patch row.

    ``weights`` is (K, W) uint64, ``patches`` is (P, W) uint64, both packing n
    1-bit codes per row.  ``valid`` optionally marks live positions per patch
    (packed the same way); excluded positions contribute zero, which is how
    zero-padded convolution borders are handled.  Returns a (K, P) int32
    matrix of +-1 dot products.
    """
    if weights.ndim != 2 or patches.ndim != 2 or weights.shape[1] != patches.shape[1]:
        raise ShapeError("packed row shapes disagree")
    tail = _valid_mask_words(n, weights.shape[1])
    if valid is None:
        valid = tail[None, :]
        n_valid = np.array([n], dtype=np.int64)
    else:
        valid = valid & tail
        n_valid = np.bitwise_count(valid).sum(axis=1, dtype=np.int64)
    agree = ~(weights[:, None, :] ^ patches[None, :, :]) & valid[None, :, :]
    pop = np.bitwise_count(agree).sum(axis=2, dtype=np.int64)
    return (2 * pop - n_valid[None, :]).astype(np.int32)
