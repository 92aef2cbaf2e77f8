"""Network graph, dual boolean masks, structural surgery, and size accounting.

A :class:`NetworkDef` is an ordered list of layer records forming a chain
with optional residual edges (plain CNNs, VGG-style stacks, ResNet basic
blocks).  Every conv/fc layer carries two boolean masks: ``out_mask`` over
its output units and ``in_mask`` over its input channels (columns for fc).
Batch-norm and PReLU layers carry the channel mask of the conv they follow.

Masked units are skipped during computation, so a masked forward pass is
exactly the forward pass of the physically shrunk network.  ``shrink``
removes masked units for real; ``account`` reports live parameters and
bits, where quantized weights cost ``weight_bits`` each and biases,
batch-norm parameters, PReLU slopes and xnor scales cost 32 bits.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from qnnprune.errors import MaskError, ShapeError
from qnnprune.quantize import scheme_from_name

BN_EPS = 1e-5

LAYER_KINDS = ("conv", "fc", "bn", "prelu", "pool", "residual_add", "softmax")
POOL_KINDS = ("max", "avg", "gap")

# Token for the network-input channel space.
INPUT_SPACE = -1


@dataclass
class Layer:
    id: str
    kind: str
    inputs: list = field(default_factory=lambda: [-1])
    scheme: str | None = None          # None = full precision
    quantize_input: bool = False       # quantize input activations per scheme
    is_shortcut: bool = False          # downsample branch of a residual block
    weight: np.ndarray | None = None   # conv: (K,C,fh,fw); fc: (K,C_in)
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    pool_kind: str | None = None
    pool_size: int = 2
    pool_stride: int = 2
    pool_pad: int = 0
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    run_mean: np.ndarray | None = None
    run_var: np.ndarray | None = None
    slope: np.ndarray | None = None    # prelu, per channel
    out_mask: np.ndarray | None = None
    in_mask: np.ndarray | None = None
    kernel_mask: np.ndarray | None = None  # conv, (K, C)

    @property
    def n_out(self) -> int:
        if self.kind in ("conv", "fc"):
            return self.weight.shape[0]
        if self.kind == "bn":
            return self.gamma.shape[0]
        if self.kind == "prelu":
            return self.slope.shape[0]
        raise ShapeError(f"layer kind '{self.kind}' has no unit count")

    def live_out(self) -> np.ndarray:
        return np.flatnonzero(self.out_mask)

    def live_in(self) -> np.ndarray:
        return np.flatnonzero(self.in_mask)

    def weight_bits(self) -> int:
        if self.scheme is None:
            return 32
        return scheme_from_name(self.scheme).weight_bits


class NetworkDef:
    """Ordered layer graph; evaluation order is list order."""

    def __init__(self, layers: list[Layer], in_channels: int):
        self.layers = layers
        self.in_channels = in_channels
        self._check_ids()

    def _check_ids(self):
        ids = [l.id for l in self.layers]
        if len(set(ids)) != len(ids):
            raise ShapeError("duplicate layer ids")

    def index_of(self, layer_id: str) -> int:
        for i, l in enumerate(self.layers):
            if l.id == layer_id:
                return i
        raise ShapeError(f"no layer with id '{layer_id}'")

    def layer(self, layer_id: str) -> Layer:
        return self.layers[self.index_of(layer_id)]

    def copy(self) -> "NetworkDef":
        return copy.deepcopy(self)

    def conv_fc_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind in ("conv", "fc")]

    def save_masks(self) -> dict:
        snap = {}
        for i, l in enumerate(self.layers):
            snap[i] = tuple(None if m is None else m.copy()
                            for m in (l.out_mask, l.in_mask, l.kernel_mask))
        return snap

    def restore_masks(self, snap: dict):
        for i, (om, im, km) in snap.items():
            l = self.layers[i]
            l.out_mask = None if om is None else om.copy()
            l.in_mask = None if im is None else im.copy()
            l.kernel_mask = None if km is None else km.copy()


class _UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra
        return ra


@dataclass
class ChannelSpace:
    """One set of tied output channels (merged across residual adds)."""

    root: int
    channels: int
    producers: list  # conv/fc layer indices whose out_mask lives here
    members: list    # bn/prelu layer indices carrying this mask
    consumers: list  # conv/fc layer indices whose in_mask reads this space


def channel_spaces(net: NetworkDef) -> tuple[list[int], dict]:
    """Map every layer's output to a channel space and collect tie groups.

    Returns (space_of_layer_output, {root: ChannelSpace}).  The network
    input occupies the reserved space ``INPUT_SPACE``.
    """
    uf = _UnionFind()
    space_of = [None] * len(net.layers)

    def out_space(idx: int) -> int:
        return INPUT_SPACE if idx == -1 else space_of[idx]

    for i, l in enumerate(net.layers):
        if l.kind in ("conv", "fc"):
            space_of[i] = uf.find(i)
        elif l.kind == "residual_add":
            if len(l.inputs) != 2:
                raise ShapeError(f"residual_add '{l.id}' needs exactly 2 inputs")
            space_of[i] = uf.union(out_space(l.inputs[0]), out_space(l.inputs[1]))
        else:
            space_of[i] = uf.find(out_space(l.inputs[0]))

    spaces: dict[int, ChannelSpace] = {}

    def get(root: int) -> ChannelSpace:
        if root not in spaces:
            spaces[root] = ChannelSpace(root, 0, [], [], [])
        return spaces[root]

    for i, l in enumerate(net.layers):
        root = uf.find(space_of[i]) if space_of[i] != INPUT_SPACE else INPUT_SPACE
        space_of[i] = root
        if l.kind in ("conv", "fc"):
            sp = get(root)
            sp.producers.append(i)
            sp.channels = l.n_out
            in_root = out_space(l.inputs[0])
            in_root = uf.find(in_root) if in_root != INPUT_SPACE else INPUT_SPACE
            get(in_root).consumers.append(i)
        elif l.kind in ("bn", "prelu"):
            get(root).members.append(i)
    if INPUT_SPACE in spaces:
        spaces[INPUT_SPACE].channels = net.in_channels
    return space_of, spaces


def _fc_block(layer: Layer, channels: int) -> int:
    """Columns of an fc layer consumed per input channel (flatten factor)."""
    cols = layer.weight.shape[1]
    if channels <= 0 or cols % channels:
        raise MaskError(
            f"fc '{layer.id}' with {cols} inputs cannot map onto "
            f"{channels} producer channels")
    return cols // channels


def validate(net: NetworkDef):
    """Check every mask-consistency invariant; raises MaskError on failure."""
    space_of, spaces = channel_spaces(net)
    for root, sp in spaces.items():
        if root == INPUT_SPACE:
            mask = np.ones(sp.channels, dtype=bool)
        else:
            ref = None
            for p in sp.producers:
                l = net.layers[p]
                if l.n_out != sp.channels:
                    raise MaskError(
                        f"residual-tied producers disagree on channel count "
                        f"at '{l.id}'")
                if ref is None:
                    ref = l.out_mask
                elif not np.array_equal(ref, l.out_mask):
                    raise MaskError(
                        f"residual-tied out_masks differ at '{l.id}'")
            mask = ref
            if mask is None or len(mask) != sp.channels:
                raise MaskError("producer out_mask missing or mis-sized")
            if not mask.any():
                raise MaskError("a channel space has no live units")
        for m in sp.members:
            l = net.layers[m]
            if l.out_mask is None or not np.array_equal(l.out_mask, mask):
                raise MaskError(f"bn/prelu mask of '{l.id}' does not match "
                                f"its conv")
        for c in sp.consumers:
            l = net.layers[c]
            if l.kind == "conv":
                if not np.array_equal(l.in_mask, mask):
                    raise MaskError(f"in_mask of '{l.id}' misaligned with its "
                                    f"producer")
            else:
                s = _fc_block(l, sp.channels)
                expect = np.repeat(mask, s)
                if not np.array_equal(l.in_mask, expect):
                    raise MaskError(f"fc in_mask of '{l.id}' misaligned")
    for l in net.layers:
        if l.kind == "conv" and l.kernel_mask is not None:
            if l.kernel_mask.shape != l.weight.shape[:2]:
                raise MaskError(f"kernel_mask shape wrong at '{l.id}'")


def apply_filter_prune(net: NetworkDef, layer_id: str, prune_set) -> NetworkDef:
    """Clear the output mask of a layer's filters and realign the graph.

    ``prune_set`` holds absolute filter indices of the layer.  The same
    channels are cleared for every producer tied to the layer through
    residual adds (downsample branches included), for the bn/prelu layers
    carrying the mask, and for the input masks of all consumers.
    """
    idx = net.index_of(layer_id)
    layer = net.layers[idx]
    if layer.kind not in ("conv", "fc"):
        raise MaskError(f"cannot filter-prune a '{layer.kind}' layer")
    prune = sorted(set(int(k) for k in prune_set))
    if not prune:
        return net
    if prune and (prune[0] < 0 or prune[-1] >= layer.n_out):
        raise MaskError(f"filter index out of range for '{layer_id}'")
    if not all(layer.out_mask[k] for k in prune):
        raise MaskError("prune set contains an already-pruned filter")

    space_of, spaces = channel_spaces(net)
    sp = spaces[space_of[idx]]
    live_after = int(layer.out_mask.sum()) - len(prune)
    if live_after < 1:
        raise MaskError(f"pruning all live filters of '{layer_id}'")

    for p in sp.producers:
        net.layers[p].out_mask[prune] = False
    for m in sp.members:
        net.layers[m].out_mask[prune] = False
    for c in sp.consumers:
        consumer = net.layers[c]
        if consumer.kind == "conv":
            consumer.in_mask[prune] = False
        else:
            s = _fc_block(consumer, sp.channels)
            for k in prune:
                consumer.in_mask[k * s:(k + 1) * s] = False
    return net


def apply_kernel_prune(net: NetworkDef, layer_id: str, prune_set) -> NetworkDef:
    """Zero individual (c, k) kernels of a conv layer.

    Pruned kernels are excluded from parameter and bit counts but cause no
    structural mask change; the tensors stay dense.
    """
    layer = net.layer(layer_id)
    if layer.kind != "conv":
        raise MaskError("kernel pruning applies to conv layers only")
    for c, k in prune_set:
        if not (0 <= k < layer.weight.shape[0] and 0 <= c < layer.weight.shape[1]):
            raise MaskError(f"kernel ({c},{k}) out of range for '{layer_id}'")
        layer.kernel_mask[k, c] = False
        layer.weight[k, c] = 0.0
    return net


def shrink(net: NetworkDef) -> NetworkDef:
    """Physically remove masked units; returns a new network.

    Kernel-pruned entries stay as zeroed kernels (no sparse storage); only
    whole masked filters/channels are cut out.  Idempotent.
    """
    validate(net)
    out = net.copy()
    space_of, spaces = channel_spaces(out)

    def space_live(root: int) -> np.ndarray:
        if root == INPUT_SPACE:
            return np.arange(out.in_channels)
        return net.layers[spaces[root].producers[0]].live_out()

    for i, l in enumerate(out.layers):
        if l.kind == "conv":
            lo = l.live_out()
            li = l.live_in()
            l.weight = l.weight[np.ix_(lo, li)]
            l.kernel_mask = l.kernel_mask[np.ix_(lo, li)]
            if l.bias is not None:
                l.bias = l.bias[lo]
            l.out_mask = np.ones(len(lo), dtype=bool)
            l.in_mask = np.ones(len(li), dtype=bool)
        elif l.kind == "fc":
            lo = l.live_out()
            li = l.live_in()
            l.weight = l.weight[np.ix_(lo, li)]
            if l.bias is not None:
                l.bias = l.bias[lo]
            l.out_mask = np.ones(len(lo), dtype=bool)
            l.in_mask = np.ones(len(li), dtype=bool)
        elif l.kind in ("bn", "prelu"):
            lo = l.live_out()
            for name in ("gamma", "beta", "run_mean", "run_var", "slope"):
                arr = getattr(l, name)
                if arr is not None:
                    setattr(l, name, arr[lo])
            l.out_mask = np.ones(len(lo), dtype=bool)
    return out


@dataclass
class LayerSize:
    id: str
    kind: str
    params: int
    bits: int
    size_mib: float
    pruned_ratio_pct: float


@dataclass
class SizeReport:
    layers: list
    total_params: int
    total_bits: int
    total_mib: float
    pruned_pct: float  # bits masked away, relative to the mask-free network

    def layer_row(self, layer_id: str) -> LayerSize:
        for row in self.layers:
            if row.id == layer_id:
                return row
        raise ShapeError(f"no accounting row for '{layer_id}'")


def _layer_counts(l: Layer, masked: bool) -> tuple[int, int]:
    """(params, bits) of one layer; ``masked=False`` counts the full layer."""
    if l.kind == "conv":
        out_m = l.out_mask if masked else np.ones_like(l.out_mask)
        in_m = l.in_mask if masked else np.ones_like(l.in_mask)
        kern = l.kernel_mask if masked else np.ones_like(l.kernel_mask)
        live_kernels = int((kern & out_m[:, None] & in_m[None, :]).sum())
        n_w = live_kernels * l.weight.shape[2] * l.weight.shape[3]
        wbits = l.weight_bits()
        params = n_w
        bits = n_w * wbits
        k_live = int(out_m.sum())
        if l.bias is not None:
            params += k_live
            bits += 32 * k_live
        return params, bits
    if l.kind == "fc":
        out_m = l.out_mask if masked else np.ones_like(l.out_mask)
        in_m = l.in_mask if masked else np.ones_like(l.in_mask)
        n_w = int(out_m.sum()) * int(in_m.sum())
        wbits = l.weight_bits()
        params = n_w
        bits = n_w * wbits
        if l.bias is not None:
            params += int(out_m.sum())
            bits += 32 * int(out_m.sum())
        return params, bits
    if l.kind == "bn":
        c = int(l.out_mask.sum()) if masked else len(l.out_mask)
        return 4 * c, 4 * c * 32  # gamma, beta, running mean, running var
    if l.kind == "prelu":
        c = int(l.out_mask.sum()) if masked else len(l.out_mask)
        return c, c * 32
    return 0, 0


def account(net: NetworkDef) -> SizeReport:
    """Live parameter/bit/size accounting, per layer and for the whole net.

    Quantized weights cost ``weight_bits`` each; biases, batch-norm
    parameters, PReLU slopes and xnor scale vectors cost 32 bits.  The
    per-filter xnor scales get their own ``<layer>.alpha`` rows so conv/fc
    rows list weight-and-bias storage alone.  Network-wide pruned ratio is
    measured in bits, not parameter count.
    """
    rows = []
    total_params = total_bits = full_bits = 0
    for l in net.layers:
        params, bits = _layer_counts(l, masked=True)
        _, fbits = _layer_counts(l, masked=False)
        ratio = 100.0 * (1.0 - bits / fbits) if fbits else 0.0
        rows.append(LayerSize(l.id, l.kind, params, bits,
                              bits / 8 / 2**20, ratio))
        total_params += params
        total_bits += bits
        full_bits += fbits
        if l.kind in ("conv", "fc") and l.scheme == "xnor":
            k_live = int(l.out_mask.sum())
            k_full = len(l.out_mask)
            sbits = 32 * k_live
            sratio = 100.0 * (1.0 - k_live / k_full) if k_full else 0.0
            rows.append(LayerSize(f"{l.id}.alpha", "scale", k_live, sbits,
                                  sbits / 8 / 2**20, sratio))
            total_params += k_live
            total_bits += sbits
            full_bits += 32 * k_full
    pruned = 100.0 * (1.0 - total_bits / full_bits) if full_bits else 0.0
    return SizeReport(rows, total_params, total_bits,
                      total_bits / 8 / 2**20, pruned)
