"""Pointwise quantizers for weights and activations.

Supported schemes:

* ``binaryconnect`` : 1-bit weights (sign), full-precision activations.
* ``bnn``           : 1-bit weights and activations (sign both).
* ``bnn-fully``     : as ``bnn`` but first and last layers quantized too.
* ``xnor``          : 1-bit sign weights with a per-filter scale equal to
                      the mean absolute weight of the filter; sign activations.
* ``dorefa2``       : 2-bit weights and activations.  Weights use the
                      tanh-normalized map ``2*q(tanh(w)/(2*max|tanh(w)|)+1/2)-1``
                      with ``q(x) = round(3x)/3`` (half-to-even), giving the
                      level set {-1, -1/3, 1/3, 1}.  Activations use
                      ``q(clip(a, 0, 1))`` with levels {0, 1/3, 2/3, 1}.

All quantizers are deterministic; ``sign(0) = +1``.  Rounding is
half-to-even everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from qnnprune import bitpack
from qnnprune.bitpack import PackedTensor
from qnnprune.errors import QnnError, ShapeError

# Weight levels for the 2-bit scheme, indexed by ascending code.
DOREFA2_WEIGHT_LEVELS = np.array([-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0])
DOREFA2_ACT_LEVELS = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])


@dataclass(frozen=True)
class QuantScheme:
    """Quantization behaviour of one layer family."""

    name: str          # identifier used in config files and model headers
    kind: str          # one of binaryconnect / bnn / xnor / dorefa
    weight_bits: int   # 1 or 2
    act_bits: int      # 1, 2, or 32 (full precision)
    fully_binarized: bool = False


SCHEMES = {
    "binaryconnect": QuantScheme("binaryconnect", "binaryconnect", 1, 32),
    "bnn": QuantScheme("bnn", "bnn", 1, 1),
    "bnn-fully": QuantScheme("bnn-fully", "bnn", 1, 1, fully_binarized=True),
    "xnor": QuantScheme("xnor", "xnor", 1, 1),
    "dorefa2": QuantScheme("dorefa2", "dorefa", 2, 2),
}


def scheme_from_name(name: str) -> QuantScheme:
    try:
        return SCHEMES[name]
    except KeyError:
        raise QnnError(f"unknown quantization scheme '{name}' "
                       f"(known: {', '.join(sorted(SCHEMES))})") from None


def _sign(x: np.ndarray) -> np.ndarray:
    # sign(0) = +1 for determinism
    return np.where(x >= 0, 1.0, -1.0).astype(x.dtype)


def _dorefa_weight_codes(w: np.ndarray) -> np.ndarray:
    t = np.tanh(w)
    m = np.abs(t).max()  # over the whole layer
    if m == 0.0:
        normed = np.full_like(w, 0.5)
    else:
        normed = t / (2.0 * m) + 0.5
    return np.round(3.0 * normed).astype(np.int64)


def quantize_weight_values(w: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    """Quantized weights as real values of the same shape as ``w``."""
    w = np.asarray(w)
    if not np.all(np.isfinite(w)):
        raise ShapeError("weights must be finite")
    if scheme.kind in ("binaryconnect", "bnn"):
        return _sign(w)
    if scheme.kind == "xnor":
        scales = filter_scales(w)
        shape = (-1,) + (1,) * (w.ndim - 1)
        return (_sign(w) * scales.reshape(shape)).astype(w.dtype)
    if scheme.kind == "dorefa":
        codes = _dorefa_weight_codes(w)
        return DOREFA2_WEIGHT_LEVELS[codes].astype(w.dtype)
    raise QnnError(f"unsupported scheme kind '{scheme.kind}'")


def filter_scales(w: np.ndarray) -> np.ndarray:
    """Per-filter xnor scale: mean absolute weight over each leading slice."""
    w = np.asarray(w)
    return np.abs(w.reshape(w.shape[0], -1)).mean(axis=1)


def quantize_weights(w: np.ndarray, scheme: QuantScheme) -> PackedTensor:
    """Quantize and bit-pack a weight tensor for storage or binary inference."""
    w = np.asarray(w)
    if scheme.weight_bits == 1:
        codes = (w >= 0).astype(np.uint8)
        scales = filter_scales(w) if scheme.kind == "xnor" else None
        return bitpack.pack(codes, 1, scales=scales)
    if scheme.weight_bits == 2:
        return bitpack.pack(_dorefa_weight_codes(w), 2)
    raise QnnError(f"unsupported weight bit width {scheme.weight_bits}")


def dequantize_weights(packed: PackedTensor, scheme: QuantScheme,
                       dtype=np.float32) -> np.ndarray:
    """Real-valued weights encoded by a packed code tensor."""
    codes = bitpack.unpack(packed)
    if scheme.weight_bits == 1:
        vals = np.where(codes == 1, 1.0, -1.0).astype(dtype)
        if scheme.kind == "xnor" and packed.scales is not None:
            shape = (-1,) + (1,) * (vals.ndim - 1)
            vals = vals * packed.scales.reshape(shape).astype(dtype)
        return vals
    return DOREFA2_WEIGHT_LEVELS[codes].astype(dtype)


def quantize_act_values(a: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    """Quantized activations as real values (identity for full precision)."""
    a = np.asarray(a)
    if scheme.act_bits == 32:
        return a
    if scheme.kind in ("bnn", "xnor"):
        return _sign(a)
    if scheme.kind == "dorefa":
        clipped = np.clip(a, 0.0, 1.0)
        return (np.round(3.0 * clipped) / 3.0).astype(a.dtype)
    raise QnnError(f"unsupported scheme kind '{scheme.kind}'")


def quantize_activations(a: np.ndarray, scheme: QuantScheme):
    """Quantize activations; packed for 1/2-bit schemes, identity otherwise."""
    a = np.asarray(a)
    if scheme.act_bits == 32:
        return a
    if scheme.act_bits == 1:
        return bitpack.pack((a >= 0).astype(np.uint8), 1)
    codes = np.round(3.0 * np.clip(a, 0.0, 1.0)).astype(np.int64)
    return bitpack.pack(codes, 2)


def ste_backward(grad_out: np.ndarray, pre_quant: np.ndarray,
                 scheme: QuantScheme, role: str = "weight") -> np.ndarray:
    """Straight-through gradient of a quantizer.

    The gradient is passed where the clipped-identity surrogate of the
    quantizer is active and zeroed elsewhere: ``|x| <= 1`` for sign
    quantizers, ``0 <= x <= 1`` for the 2-bit activation clip.  The 2-bit
    weight map has no clip, so its surrogate passes everything.
    """
    grad_out = np.asarray(grad_out)
    pre_quant = np.asarray(pre_quant)
    if grad_out.shape != pre_quant.shape:
        raise ShapeError("gradient and pre-quantization shapes differ")
    if role == "weight":
        if scheme.weight_bits == 1:
            return grad_out * (np.abs(pre_quant) <= 1.0)
        return grad_out.copy()
    if role == "activation":
        if scheme.act_bits == 32:
            return grad_out.copy()
        if scheme.kind in ("bnn", "xnor"):
            return grad_out * (np.abs(pre_quant) <= 1.0)
        return grad_out * ((pre_quant >= 0.0) & (pre_quant <= 1.0))
    raise QnnError(f"unknown STE role '{role}'")
