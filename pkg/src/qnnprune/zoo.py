"""Network builders: desk-scale test nets and the ResNet-18 descriptor.

Weight initialization is He fan-in scaling on the shadow weights.  Conv
layers are bias-free (batch norm follows each one); classifiers carry a
bias.  Quantized layers sign-binarize their input activations except the
first layer, which always consumes real-valued inputs.
"""

from __future__ import annotations

import numpy as np

from qnnprune.network import Layer, NetworkDef
from qnnprune.quantize import scheme_from_name


class NetBuilder:
    def __init__(self, in_channels: int, dtype=np.float32):
        self.layers: list[Layer] = []
        self.in_channels = in_channels
        self.dtype = dtype
        self.prev = -1

    def add(self, layer: Layer, inputs=None) -> int:
        layer.inputs = [self.prev] if inputs is None else list(inputs)
        self.layers.append(layer)
        self.prev = len(self.layers) - 1
        return self.prev

    def conv(self, id, in_ch, out_ch, ksize, stride=1, padding=0, scheme=None,
             quantize_input=False, bias=False, rng=None, inputs=None,
             is_shortcut=False) -> int:
        shape = (out_ch, in_ch, ksize, ksize)
        if rng is None:
            w = np.zeros(shape, dtype=self.dtype)
        else:
            std = np.sqrt(2.0 / (in_ch * ksize * ksize))
            w = rng.normal(0.0, std, shape).astype(self.dtype)
        return self.add(Layer(
            id=id, kind="conv", scheme=scheme, quantize_input=quantize_input,
            is_shortcut=is_shortcut, weight=w,
            bias=np.zeros(out_ch, dtype=self.dtype) if bias else None,
            stride=stride, padding=padding,
            out_mask=np.ones(out_ch, dtype=bool),
            in_mask=np.ones(in_ch, dtype=bool),
            kernel_mask=np.ones((out_ch, in_ch), dtype=bool)), inputs)

    def fc(self, id, in_features, out_features, scheme=None,
           quantize_input=False, bias=True, rng=None, inputs=None) -> int:
        shape = (out_features, in_features)
        if rng is None:
            w = np.zeros(shape, dtype=self.dtype)
        else:
            std = np.sqrt(2.0 / in_features)
            w = rng.normal(0.0, std, shape).astype(self.dtype)
        return self.add(Layer(
            id=id, kind="fc", scheme=scheme, quantize_input=quantize_input,
            weight=w,
            bias=np.zeros(out_features, dtype=self.dtype) if bias else None,
            out_mask=np.ones(out_features, dtype=bool),
            in_mask=np.ones(in_features, dtype=bool)), inputs)

    def bn(self, id, channels, inputs=None) -> int:
        return self.add(Layer(
            id=id, kind="bn",
            gamma=np.ones(channels, dtype=self.dtype),
            beta=np.zeros(channels, dtype=self.dtype),
            run_mean=np.zeros(channels, dtype=self.dtype),
            run_var=np.ones(channels, dtype=self.dtype),
            out_mask=np.ones(channels, dtype=bool)), inputs)

    def prelu(self, id, channels, inputs=None) -> int:
        return self.add(Layer(
            id=id, kind="prelu",
            slope=np.full(channels, 0.25, dtype=self.dtype),
            out_mask=np.ones(channels, dtype=bool)), inputs)

    def pool(self, id, kind="max", size=2, stride=2, pad=0, inputs=None) -> int:
        return self.add(Layer(id=id, kind="pool", pool_kind=kind,
                              pool_size=size, pool_stride=stride,
                              pool_pad=pad), inputs)

    def add_residual(self, id, a, b) -> int:
        return self.add(Layer(id=id, kind="residual_add"), inputs=[a, b])

    def softmax(self, id="softmax", inputs=None) -> int:
        return self.add(Layer(id=id, kind="softmax"), inputs)

    def build(self) -> NetworkDef:
        return NetworkDef(self.layers, self.in_channels)


def desk4(scheme_name: str = "bnn", channels=(16, 32, 48, 64), classes=10,
          in_channels=3, seed=0, dtype=np.float32) -> NetworkDef:
    """4-conv quantized CNN for 32x32 inputs (the reference desk net).

    The first conv strides by 2 so the deeper feature maps stay small
    enough for quick CPU training.
    """
    scheme = scheme_from_name(scheme_name)
    fully = scheme.fully_binarized
    rng = np.random.default_rng(seed)
    c0, c1, c2, c3 = channels
    b = NetBuilder(in_channels, dtype)
    b.conv("conv1", in_channels, c0, 3, stride=2, padding=1,
           scheme=scheme_name if fully else None, rng=rng)
    b.bn("bn1", c0)
    b.prelu("act1", c0)
    b.pool("pool1")
    b.conv("conv2", c0, c1, 3, padding=1, scheme=scheme_name,
           quantize_input=True, rng=rng)
    b.bn("bn2", c1)
    b.pool("pool2")
    b.conv("conv3", c1, c2, 3, padding=1, scheme=scheme_name,
           quantize_input=True, rng=rng)
    b.bn("bn3", c2)
    b.conv("conv4", c2, c3, 3, padding=1, scheme=scheme_name,
           quantize_input=True, rng=rng)
    b.bn("bn4", c3)
    b.pool("gap", kind="gap")
    b.fc("fc", c3, classes, scheme=scheme_name if fully else None,
         quantize_input=fully, rng=rng)
    if fully:
        b.bn("bn_out", classes)
    b.softmax()
    return b.build()


def desk_residual(scheme_name: str = "bnn", classes=10, in_channels=3,
                  seed=0, dtype=np.float32) -> NetworkDef:
    """4-conv net with one residual block (identity via 1x1 downsample)."""
    rng = np.random.default_rng(seed)
    b = NetBuilder(in_channels, dtype)
    b.conv("conv1", in_channels, 8, 3, padding=1, rng=rng)
    b.bn("bn1", 8)
    b.prelu("act1", 8)
    entry = b.pool("pool1")
    b.conv("conv2", 8, 16, 3, padding=1, scheme=scheme_name,
           quantize_input=True, rng=rng)
    b.bn("bn2", 16)
    b.conv("conv3", 16, 16, 3, padding=1, scheme=scheme_name,
           quantize_input=True, rng=rng)
    main = b.bn("bn3", 16)
    b.conv("convd", 8, 16, 1, scheme=scheme_name, quantize_input=True,
           rng=rng, inputs=[entry], is_shortcut=True)
    side = b.bn("bnd", 16)
    b.add_residual("add1", main, side)
    b.prelu("act2", 16)
    b.pool("gap", kind="gap")
    b.fc("fc", 16, classes, rng=rng)
    b.softmax()
    return b.build()


def mlp(in_features: int, hidden: int, classes: int,
        scheme_name: str | None = "bnn", seed=0, dtype=np.float32) -> NetworkDef:
    """2-layer MLP; quantized weights when a scheme is given."""
    rng = np.random.default_rng(seed)
    b = NetBuilder(in_features, dtype)
    b.fc("fc1", in_features, hidden, scheme=scheme_name, rng=rng)
    b.bn("bn1", hidden)
    b.fc("fc2", hidden, classes, scheme=scheme_name,
         quantize_input=scheme_name is not None, rng=rng)
    b.softmax()
    return b.build()


def _basic_block(b: NetBuilder, prefix_idx: int, entry: int, in_ch: int,
                 out_ch: int, stride: int, scheme: str,
                 shortcut_id: str | None):
    """Two 3x3 convs plus identity or 1x1 downsample shortcut."""
    b.conv(f"conv{prefix_idx}", in_ch, out_ch, 3, stride=stride,
           padding=1, scheme=scheme, quantize_input=True)
    b.bn(f"bn{prefix_idx}", out_ch)
    b.prelu(f"act{prefix_idx}", out_ch)
    b.conv(f"conv{prefix_idx + 1}", out_ch, out_ch, 3, padding=1,
           scheme=scheme, quantize_input=True)
    main = b.bn(f"bn{prefix_idx + 1}", out_ch)
    if shortcut_id is not None:
        b.conv(shortcut_id, in_ch, out_ch, 1, stride=stride, scheme=scheme,
               quantize_input=True, inputs=[entry], is_shortcut=True)
        side = b.bn(f"bn_{shortcut_id}", out_ch)
    else:
        side = entry
    b.add_residual(f"add{prefix_idx}", main, side)
    b.prelu(f"act{prefix_idx + 1}", out_ch)
    return b.prev


def resnet18_imagenet(scheme_name: str = "xnor",
                      dtype=np.float32) -> NetworkDef:
    """ImageNet ResNet-18 descriptor (zero weights; for size accounting).

    Conv layers are numbered conv1..conv17 in chain order with the three
    stage-entry downsample convs named residual1..residual3, matching the
    usual layer-wise reporting for this architecture.  First and last
    layers stay full precision; every other conv is quantized.
    """
    b = NetBuilder(3, dtype)
    b.conv("conv1", 3, 64, 7, stride=2, padding=3)
    b.bn("bn_conv1", 64)
    b.prelu("act_conv1", 64)
    entry = b.pool("pool1", kind="max", size=3, stride=2, pad=1)
    widths = (64, 128, 256, 512)
    conv_idx = 2
    shortcut_idx = 1
    in_ch = 64
    for stage, width in enumerate(widths):
        for block in range(2):
            stride = 2 if (stage > 0 and block == 0) else 1
            needs_shortcut = in_ch != width
            sid = f"residual{shortcut_idx}" if needs_shortcut else None
            entry = _basic_block(b, conv_idx, entry, in_ch, width, stride,
                                 scheme_name, sid)
            if needs_shortcut:
                shortcut_idx += 1
            conv_idx += 2
            in_ch = width
    b.pool("gap", kind="gap")
    b.fc("fc", 512, 1000, bias=True)
    b.softmax()
    return b.build()


TABLE_RATIOS_XNOR_RESNET18 = {
    # Published layer-wise pruning percentages for the xnor ResNet-18 run;
    # downsample convs follow their tie group (marked by the star rule).
    "conv8": 1.41, "conv9": 1.46, "conv11": 1.1, "conv12": 25.53,
    "conv13": 9.13, "conv14": 26.29, "conv15": 1.8, "conv16": 40.0,
    "conv17": 0.5,
}
