"""QPRN model files and the shadow-weight sidecar.

Layout (all integers little-endian):

    magic "QPRN" | u16 version | u32 layer_count
    per layer:
      u16 len | id utf-8
      u8 kind tag              (conv 0, fc 1, bn 2, prelu 3,
                                residual_add 4, pool 5, softmax 6)
      u16 len | scheme string  ("fp32" for full precision)
      u8 flags                 (bit0 quantize_input, bit1 is_shortcut)
      u8 n_inputs | i32 each   (-1 = network input)
      u8 n_extents | u32 each  (conv K,C,fh,fw; fc K,C; bn/prelu C)
      conv: u32 stride | u32 padding
      pool: u8 pool tag (max 0, avg 1, gap 2) | u32 size | u32 stride | u32 pad
      mask bitsets             (conv: out,in,kernel; fc: out,in; bn/prelu: out)
        each: u32 logical_len | u32 n_words | u64 words (1-bit packed)
      weight payload: u8 tag
        0 none
        1 raw fp32:  u32 count | f32 data
        2 packed:    u8 bits | u32 count | u32 n_words | u64 words
                     | u8 has_scales | [u32 n | f32 scales]
      u8 n_aux; each: u8 role | u32 count | f32 data
        roles: bias 0, gamma 1, beta 2, run_mean 3, run_var 4, slope 5

Quantized layers store their packed codes (plus xnor scales); loading
without the sidecar reconstructs the code values as real weights, which is
a fixed point of every quantizer, so save -> load -> save is byte-stable.
The sidecar ``<model>.shadow`` keeps the real-valued training weights in
the same tensor layout at full precision.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from qnnprune import bitpack, quantize
from qnnprune.bitpack import PackedTensor
from qnnprune.errors import FormatError
from qnnprune.network import Layer, NetworkDef

MAGIC = b"QPRN"
SHADOW_MAGIC = b"QPRS"
VERSION = 1

_KIND_TAGS = {"conv": 0, "fc": 1, "bn": 2, "prelu": 3,
              "residual_add": 4, "pool": 5, "softmax": 6}
_KIND_NAMES = {v: k for k, v in _KIND_TAGS.items()}
_POOL_TAGS = {"max": 0, "avg": 1, "gap": 2}
_POOL_NAMES = {v: k for k, v in _POOL_TAGS.items()}
_AUX_ROLES = ("bias", "gamma", "beta", "run_mean", "run_var", "slope")


class _Writer:
    def __init__(self):
        self.parts = []

    def raw(self, b: bytes):
        self.parts.append(b)

    def u8(self, v): self.raw(struct.pack("<B", v))
    def u16(self, v): self.raw(struct.pack("<H", v))
    def u32(self, v): self.raw(struct.pack("<I", v))
    def i32(self, v): self.raw(struct.pack("<i", v))

    def string(self, s: str):
        b = s.encode("utf-8")
        self.u16(len(b))
        self.raw(b)

    def f32s(self, arr):
        a = np.ascontiguousarray(arr, dtype="<f4")
        self.u32(a.size)
        self.raw(a.tobytes())

    def words(self, arr):
        a = np.ascontiguousarray(arr, dtype="<u8")
        self.u32(a.size)
        self.raw(a.tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated model file")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def u8(self): return struct.unpack("<B", self.raw(1))[0]
    def u16(self): return struct.unpack("<H", self.raw(2))[0]
    def u32(self): return struct.unpack("<I", self.raw(4))[0]
    def i32(self): return struct.unpack("<i", self.raw(4))[0]

    def string(self) -> str:
        return self.raw(self.u16()).decode("utf-8")

    def f32s(self) -> np.ndarray:
        n = self.u32()
        return np.frombuffer(self.raw(4 * n), dtype="<f4").astype(np.float32)

    def words(self) -> np.ndarray:
        n = self.u32()
        return np.frombuffer(self.raw(8 * n), dtype="<u8").copy()


def _write_mask(w: _Writer, mask: np.ndarray):
    flat = np.asarray(mask, dtype=np.uint8).reshape(-1)
    packed = bitpack.pack(flat, 1)
    w.u32(flat.size)
    w.words(packed.words)


def _read_mask(r: _Reader, shape) -> np.ndarray:
    n = r.u32()
    words = r.words()
    packed = PackedTensor(shape=(n,), bits_per_code=1, words=words)
    return bitpack.unpack(packed).astype(bool).reshape(shape)


def _layer_extents(l: Layer):
    if l.kind in ("conv", "fc"):
        return l.weight.shape
    if l.kind in ("bn", "prelu"):
        return (l.n_out,)
    return ()


def save_model(net: NetworkDef, path, shadow: bool = True):
    """Write a QPRN file; also writes ``<path>.shadow`` when any layer is
    quantized and ``shadow`` is true."""
    w = _Writer()
    w.raw(MAGIC)
    w.u16(VERSION)
    w.u32(len(net.layers))
    any_quantized = False
    for l in net.layers:
        w.string(l.id)
        w.u8(_KIND_TAGS[l.kind])
        w.string(l.scheme if l.scheme is not None else "fp32")
        w.u8((1 if l.quantize_input else 0) | (2 if l.is_shortcut else 0))
        w.u8(len(l.inputs))
        for j in l.inputs:
            w.i32(j)
        extents = _layer_extents(l)
        w.u8(len(extents))
        for e in extents:
            w.u32(e)
        if l.kind == "conv":
            w.u32(l.stride)
            w.u32(l.padding)
        if l.kind == "pool":
            w.u8(_POOL_TAGS[l.pool_kind])
            w.u32(l.pool_size)
            w.u32(l.pool_stride)
            w.u32(l.pool_pad)
        if l.kind == "conv":
            _write_mask(w, l.out_mask)
            _write_mask(w, l.in_mask)
            _write_mask(w, l.kernel_mask)
        elif l.kind == "fc":
            _write_mask(w, l.out_mask)
            _write_mask(w, l.in_mask)
        elif l.kind in ("bn", "prelu"):
            _write_mask(w, l.out_mask)
        if l.kind in ("conv", "fc"):
            if l.scheme is None:
                w.u8(1)
                w.f32s(l.weight.reshape(-1))
            else:
                any_quantized = True
                scheme = quantize.scheme_from_name(l.scheme)
                packed = quantize.quantize_weights(l.weight, scheme)
                w.u8(2)
                w.u8(packed.bits_per_code)
                w.u32(packed.size)
                w.words(packed.words)
                if packed.scales is not None:
                    w.u8(1)
                    w.f32s(packed.scales)
                else:
                    w.u8(0)
        else:
            w.u8(0)
        aux = [(role, getattr(l, role)) for role in _AUX_ROLES
               if getattr(l, role) is not None]
        w.u8(len(aux))
        for role, arr in aux:
            w.u8(_AUX_ROLES.index(role))
            w.f32s(arr)
    path = Path(path)
    path.write_bytes(w.getvalue())
    if shadow and any_quantized:
        save_shadow(net, shadow_path(path))


def load_model(path) -> NetworkDef:
    """Read a QPRN file; quantized weights come back as their code values."""
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.raw(4) != MAGIC:
        raise FormatError(f"{path}: not a QPRN model")
    version = r.u16()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported QPRN version {version}")
    n_layers = r.u32()
    layers = []
    for _ in range(n_layers):
        lid = r.string()
        kind = _KIND_NAMES.get(r.u8())
        if kind is None:
            raise FormatError(f"{path}: unknown layer kind tag")
        scheme = r.string()
        scheme = None if scheme == "fp32" else scheme
        flags = r.u8()
        inputs = [r.i32() for _ in range(r.u8())]
        extents = tuple(r.u32() for _ in range(r.u8()))
        l = Layer(id=lid, kind=kind, inputs=inputs, scheme=scheme,
                  quantize_input=bool(flags & 1), is_shortcut=bool(flags & 2))
        if kind == "conv":
            l.stride = r.u32()
            l.padding = r.u32()
        if kind == "pool":
            l.pool_kind = _POOL_NAMES[r.u8()]
            l.pool_size = r.u32()
            l.pool_stride = r.u32()
            l.pool_pad = r.u32()
        if kind == "conv":
            l.out_mask = _read_mask(r, (extents[0],))
            l.in_mask = _read_mask(r, (extents[1],))
            l.kernel_mask = _read_mask(r, (extents[0], extents[1]))
        elif kind == "fc":
            l.out_mask = _read_mask(r, (extents[0],))
            l.in_mask = _read_mask(r, (extents[1],))
        elif kind in ("bn", "prelu"):
            l.out_mask = _read_mask(r, (extents[0],))
        tag = r.u8()
        if tag == 1:
            l.weight = r.f32s().reshape(extents)
        elif tag == 2:
            bits = r.u8()
            count = r.u32()
            words = r.words()
            has_scales = r.u8()
            scales = r.f32s() if has_scales else None
            if count != int(np.prod(extents)):
                raise FormatError(f"{path}: packed weight count mismatch")
            packed = PackedTensor(shape=extents, bits_per_code=bits,
                                  words=words, scales=scales)
            l.weight = quantize.dequantize_weights(
                packed, quantize.scheme_from_name(scheme))
        elif tag != 0:
            raise FormatError(f"{path}: unknown weight payload tag {tag}")
        for _ in range(r.u8()):
            role = _AUX_ROLES[r.u8()]
            setattr(l, role, r.f32s())
        layers.append(l)
    if r.pos != len(data):
        raise FormatError(f"{path}: trailing bytes")
    return NetworkDef(layers, _infer_in_channels(layers))


def _infer_in_channels(layers) -> int:
    for l in layers:
        if -1 in l.inputs and l.kind in ("conv", "fc"):
            return len(l.in_mask)
    raise FormatError("cannot infer input channel count")


def shadow_path(model_path) -> Path:
    return Path(str(model_path) + ".shadow")


def save_shadow(net: NetworkDef, path):
    """Sidecar with the real-valued weights of quantized layers."""
    w = _Writer()
    w.raw(SHADOW_MAGIC)
    w.u16(VERSION)
    w.u32(len(net.layers))
    for l in net.layers:
        w.string(l.id)
        if l.kind in ("conv", "fc") and l.scheme is not None:
            w.u8(1)
            w.f32s(l.weight.reshape(-1))
        else:
            w.u8(0)
    Path(path).write_bytes(w.getvalue())


def load_shadow(net: NetworkDef, path):
    """Replace quantized layers' weights with their sidecar real values."""
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.raw(4) != SHADOW_MAGIC:
        raise FormatError(f"{path}: not a shadow sidecar")
    if r.u16() != VERSION:
        raise FormatError(f"{path}: unsupported sidecar version")
    n = r.u32()
    if n != len(net.layers):
        raise FormatError(f"{path}: layer count mismatch")
    for l in net.layers:
        lid = r.string()
        if lid != l.id:
            raise FormatError(f"{path}: layer order mismatch at '{lid}'")
        if r.u8():
            vals = r.f32s()
            if vals.size != l.weight.size:
                raise FormatError(f"{path}: weight size mismatch at '{lid}'")
            l.weight = vals.reshape(l.weight.shape)
    return net
