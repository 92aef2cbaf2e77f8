"""Forward inference and backpropagation for quantized networks.

The engine computes the *live* sub-network directly: masked filters and
channels are sliced away before any arithmetic, so a masked forward pass is
bit-for-bit the forward pass of the shrunk network and its cost scales with
the live unit count.

Convolution is im2col plus a dense matmul.  For 1-bit layers whose weight
scale factors exist (xnor), the sign weights are accumulated first and the
per-filter scale is applied to the accumulated integer result, which keeps
the float path exactly equal to the xnor/popcount path on +-1 inputs.

Training-mode forward caches what backpropagation needs; gradients for
quantized tensors use the straight-through estimator.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from qnnprune import bitpack, quantize
from qnnprune.errors import ShapeError
from qnnprune.network import BN_EPS, NetworkDef
from qnnprune.quantize import scheme_from_name


def im2col(x: np.ndarray, fh: int, fw: int, stride: int, pad: int):
    """Patch matrix of shape (N*OH*OW, C*fh*fw) in row-major patch order."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = x.shape[2], x.shape[3]
    oh = (hp - fh) // stride + 1
    ow = (wp - fw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (fh, fw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * oh * ow, c * fh * fw), oh, ow


def col2im(dcols: np.ndarray, x_shape, fh: int, fw: int, stride: int, pad: int):
    """Scatter-add patch gradients back onto the input tensor."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - fh) // stride + 1
    ow = (wp - fw) // stride + 1
    d6 = dcols.reshape(n, oh, ow, c, fh, fw).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    for i in range(fh):
        for j in range(fw):
            dxp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += d6[:, :, i, j]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def _live_conv_weights(layer):
    """(w_live, kernel_live, scheme) with masked filters/channels sliced off."""
    lo = layer.live_out()
    li = layer.live_in()
    w = layer.weight[np.ix_(lo, li)]
    km = layer.kernel_mask[np.ix_(lo, li)]
    return w, km, lo, li


def _conv_effective(layer, dtype):
    """Quantize, kernel-zero and factor out xnor scales for the live slice.

    Returns (w_eff, scale, w_shadow, scheme).  ``w_eff`` already has pruned
    kernels zeroed; for xnor the scale is returned separately so callers
    multiply it into the accumulated output.
    """
    w, km, lo, li = _live_conv_weights(layer)
    scale = None
    scheme = None
    if layer.scheme is not None:
        scheme = scheme_from_name(layer.scheme)
        if scheme.kind == "xnor":
            scale = quantize.filter_scales(w).astype(dtype)
            w_eff = np.where(w >= 0, 1.0, -1.0).astype(dtype)
        else:
            w_eff = quantize.quantize_weight_values(w, scheme).astype(dtype)
    else:
        w_eff = w.astype(dtype, copy=True)
    if not km.all():
        w_eff = w_eff * km[..., None, None] if w_eff.ndim == 4 else w_eff * km
    return w_eff, scale, w, scheme


def _quantize_input(layer, x):
    scheme = scheme_from_name(layer.scheme) if layer.scheme else None
    if layer.quantize_input and scheme is not None and scheme.act_bits != 32:
        return quantize.quantize_act_values(x, scheme), scheme
    return x, scheme


def conv_forward(layer, x, training=False):
    """Direct convolution of the live sub-layer; returns (out, cache)."""
    li = layer.live_in()
    if x.shape[1] != len(li):
        raise ShapeError(
            f"conv '{layer.id}' expects {len(li)} live input channels, "
            f"got {x.shape[1]}")
    xq, scheme = _quantize_input(layer, x)
    w_eff, scale, w_shadow, _ = _conv_effective(layer, x.dtype)
    k_live, c_live, fh, fw = w_eff.shape
    cols, oh, ow = im2col(xq, fh, fw, layer.stride, layer.padding)
    w_mat = w_eff.reshape(k_live, -1)
    out = cols @ w_mat.T
    if scale is not None:
        out *= scale
    if layer.bias is not None:
        out += layer.bias[layer.live_out()].astype(x.dtype)
    n = x.shape[0]
    out = out.reshape(n, oh, ow, k_live).transpose(0, 3, 1, 2)
    cache = None
    if training:
        cache = dict(cols=cols, w_mat=w_mat, scale=scale, w_shadow=w_shadow,
                     x_shape=xq.shape, x_pre=x if layer.quantize_input else None,
                     scheme=scheme, oh=oh, ow=ow)
    return np.ascontiguousarray(out), cache


def conv_backward(layer, cache, dout):
    """Gradients of a conv layer; weight/bias grads are full-shape arrays."""
    n, k_live, oh, ow = dout.shape
    dmat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, k_live)
    scale = cache["scale"]
    if scale is not None:
        dmat = dmat * scale
    dw_mat = dmat.T @ cache["cols"]
    dcols = dmat @ cache["w_mat"]
    fh, fw = layer.weight.shape[2], layer.weight.shape[3]
    dx = col2im(dcols, cache["x_shape"], fh, fw, layer.stride, layer.padding)
    scheme = cache["scheme"]
    dw_live = dw_mat.reshape(cache["w_shadow"].shape)
    if scheme is not None:
        dw_live = quantize.ste_backward(dw_live, cache["w_shadow"], scheme, "weight")
    lo, li = layer.live_out(), layer.live_in()
    dw = np.zeros_like(layer.weight)
    dw[np.ix_(lo, li)] = dw_live * layer.kernel_mask[np.ix_(lo, li)][..., None, None]
    grads = {"weight": dw}
    if layer.bias is not None:
        db = np.zeros_like(layer.bias)
        db[lo] = dout.sum(axis=(0, 2, 3))
        grads["bias"] = db
    if cache["x_pre"] is not None:
        dx = quantize.ste_backward(dx, cache["x_pre"], scheme, "activation")
    return dx, grads


def fc_forward(layer, x, training=False):
    n = x.shape[0]
    x_flat = x.reshape(n, -1)
    li = layer.live_in()
    if x_flat.shape[1] != len(li):
        raise ShapeError(
            f"fc '{layer.id}' expects {len(li)} live inputs, got {x_flat.shape[1]}")
    xq, scheme = _quantize_input(layer, x_flat)
    lo = layer.live_out()
    w_shadow = layer.weight[np.ix_(lo, li)]
    scale = None
    if scheme is not None:
        if scheme.kind == "xnor":
            scale = quantize.filter_scales(w_shadow).astype(x.dtype)
            w_eff = np.where(w_shadow >= 0, 1.0, -1.0).astype(x.dtype)
        else:
            w_eff = quantize.quantize_weight_values(w_shadow, scheme).astype(x.dtype)
    else:
        w_eff = w_shadow.astype(x.dtype, copy=True)
    out = xq @ w_eff.T
    if scale is not None:
        out *= scale
    if layer.bias is not None:
        out += layer.bias[lo].astype(x.dtype)
    cache = None
    if training:
        cache = dict(xq=xq, w_eff=w_eff, scale=scale, w_shadow=w_shadow,
                     x_pre=x_flat if layer.quantize_input else None,
                     scheme=scheme, x_shape=x.shape)
    return out, cache


def fc_backward(layer, cache, dout):
    scale = cache["scale"]
    dmat = dout * scale if scale is not None else dout
    dw_live = dmat.T @ cache["xq"]
    dx = dmat @ cache["w_eff"]
    scheme = cache["scheme"]
    if scheme is not None:
        dw_live = quantize.ste_backward(dw_live, cache["w_shadow"], scheme, "weight")
    lo, li = layer.live_out(), layer.live_in()
    dw = np.zeros_like(layer.weight)
    dw[np.ix_(lo, li)] = dw_live
    grads = {"weight": dw}
    if layer.bias is not None:
        db = np.zeros_like(layer.bias)
        db[lo] = dout.sum(axis=0)
        grads["bias"] = db
    if cache["x_pre"] is not None:
        dx = quantize.ste_backward(dx, cache["x_pre"], scheme, "activation")
    return dx.reshape(cache["x_shape"]), grads


def bn_forward(layer, x, training=False, momentum=0.1):
    lo = layer.live_out()
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    gamma = layer.gamma[lo].astype(x.dtype).reshape(shape)
    beta = layer.beta[lo].astype(x.dtype).reshape(shape)
    if training:
        mean = x.mean(axis=axes)
        xc = x - mean.reshape(shape)
        var = np.mean(xc * xc, axis=axes)
        layer.run_mean[lo] = (1 - momentum) * layer.run_mean[lo] + momentum * mean
        layer.run_var[lo] = (1 - momentum) * layer.run_var[lo] + momentum * var
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = xc
        xhat *= inv_std.reshape(shape)
    else:
        mean = layer.run_mean[lo].astype(x.dtype)
        var = layer.run_var[lo].astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma * xhat + beta
    cache = None
    if training:
        cache = dict(xhat=xhat, inv_std=inv_std, gamma=gamma, axes=axes, shape=shape)
    return out.astype(x.dtype), cache


def bn_backward(layer, cache, dout):
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    axes, shape = cache["axes"], cache["shape"]
    m = dout.size / xhat.shape[1] if dout.ndim == 2 else \
        dout.shape[0] * dout.shape[2] * dout.shape[3]
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * cache["gamma"]
    dx = (inv_std.reshape(shape) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(shape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape))
    lo = layer.live_out()
    dg = np.zeros_like(layer.gamma)
    db = np.zeros_like(layer.beta)
    dg[lo] = dgamma
    db[lo] = dbeta
    return dx.astype(dout.dtype), {"gamma": dg, "beta": db}


def prelu_forward(layer, x, training=False):
    lo = layer.live_out()
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    a = layer.slope[lo].astype(x.dtype).reshape(shape)
    neg = x < 0
    out = np.where(neg, a * x, x)
    cache = dict(x=x, neg=neg, a=a, shape=shape) if training else None
    return out, cache


def prelu_backward(layer, cache, dout):
    neg, x, a = cache["neg"], cache["x"], cache["a"]
    axes = tuple(i for i in range(dout.ndim) if i != 1)
    da_live = (dout * x * neg).sum(axis=axes)
    dx = dout * np.where(neg, a, np.array(1.0, dtype=dout.dtype))
    da = np.zeros_like(layer.slope)
    da[layer.live_out()] = da_live
    return dx, {"slope": da}


def pool_forward(layer, x, training=False):
    kind = layer.pool_kind
    if kind == "gap":
        out = x.mean(axis=(2, 3), keepdims=True)
        cache = dict(x_shape=x.shape) if training else None
        return out.astype(x.dtype), cache
    s, st, pad = layer.pool_size, layer.pool_stride, layer.pool_pad
    if pad:
        fill = -np.inf if kind == "max" else 0.0
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                    constant_values=fill)
    else:
        xp = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (s, s), axis=(2, 3))
    win = win[:, :, ::st, ::st]
    flat = win.reshape(win.shape[:4] + (s * s,))
    if kind == "max":
        arg = flat.argmax(axis=4)
        out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]
        cache = dict(arg=arg, x_shape=x.shape, xp_shape=xp.shape) if training else None
    elif kind == "avg":
        out = flat.mean(axis=4)
        cache = dict(x_shape=x.shape, xp_shape=xp.shape) if training else None
    else:
        raise ShapeError(f"unknown pool kind '{kind}'")
    return np.ascontiguousarray(out.astype(x.dtype)), cache


def pool_backward(layer, cache, dout):
    kind = layer.pool_kind
    if kind == "gap":
        n, c, h, w = cache["x_shape"]
        return np.broadcast_to(dout / (h * w), cache["x_shape"]).astype(dout.dtype), {}
    s, st, pad = layer.pool_size, layer.pool_stride, layer.pool_pad
    n, c, hp, wp = cache["xp_shape"]
    oh, ow = dout.shape[2], dout.shape[3]
    dxp = np.zeros((n, c, hp, wp), dtype=dout.dtype)
    if kind == "max":
        arg = cache["arg"]
        di, dj = np.divmod(arg, s)
        oi = np.arange(oh)[None, None, :, None] * st
        oj = np.arange(ow)[None, None, None, :] * st
        rows = (oi + di).reshape(n, c, -1)
        colx = (oj + dj).reshape(n, c, -1)
        ni = np.arange(n)[:, None, None]
        ci = np.arange(c)[None, :, None]
        np.add.at(dxp, (ni, ci, rows, colx), dout.reshape(n, c, -1))
    else:
        g = dout / (s * s)
        for i in range(s):
            for j in range(s):
                dxp[:, :, i:i + oh * st:st, j:j + ow * st:st] += g
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp, {}


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def run_forward(net: NetworkDef, x: np.ndarray, training: bool = False):
    """Evaluate the whole network; returns (final output, per-layer caches).

    The final output of a net ending in a softmax layer is the class
    probability matrix; the cache of that layer stores its input logits.
    """
    outs: dict[int, np.ndarray] = {}
    caches: list = [None] * len(net.layers)
    out = x
    for i, layer in enumerate(net.layers):
        ins = [x if j == -1 else outs[j] for j in layer.inputs]
        if layer.kind == "conv":
            out, caches[i] = conv_forward(layer, ins[0], training)
        elif layer.kind == "fc":
            out, caches[i] = fc_forward(layer, ins[0], training)
        elif layer.kind == "bn":
            out, caches[i] = bn_forward(layer, ins[0], training)
        elif layer.kind == "prelu":
            out, caches[i] = prelu_forward(layer, ins[0], training)
        elif layer.kind == "pool":
            out, caches[i] = pool_forward(layer, ins[0], training)
        elif layer.kind == "residual_add":
            if ins[0].shape != ins[1].shape:
                raise ShapeError(f"residual_add '{layer.id}' input shapes "
                                 f"{ins[0].shape} vs {ins[1].shape}")
            out = ins[0] + ins[1]
        elif layer.kind == "softmax":
            caches[i] = {"logits": ins[0]}
            out = softmax(ins[0])
        else:
            raise ShapeError(f"unknown layer kind '{layer.kind}'")
        outs[i] = out
    return out, caches


def run_backward(net: NetworkDef, caches: list, dlogits: np.ndarray) -> dict:
    """Backpropagate from the softmax-input gradient; returns grads by index.

    The trailing softmax layer is folded into the loss gradient, so the walk
    starts at the layer feeding it.
    """
    if net.layers[-1].kind != "softmax":
        raise ShapeError("backward expects a trailing softmax layer")
    douts: dict[int, np.ndarray] = {net.layers[-1].inputs[0]: dlogits}
    grads: dict[int, dict] = {}

    def push(idx, grad):
        if idx == -1:
            return
        if idx in douts:
            douts[idx] = douts[idx] + grad
        else:
            douts[idx] = grad

    for i in range(len(net.layers) - 2, -1, -1):
        layer = net.layers[i]
        if i not in douts:
            continue
        dout = douts.pop(i)
        if layer.kind == "conv":
            dx, g = conv_backward(layer, caches[i], dout)
            grads[i] = g
            push(layer.inputs[0], dx)
        elif layer.kind == "fc":
            dx, g = fc_backward(layer, caches[i], dout)
            grads[i] = g
            push(layer.inputs[0], dx)
        elif layer.kind == "bn":
            dx, g = bn_backward(layer, caches[i], dout)
            grads[i] = g
            push(layer.inputs[0], dx)
        elif layer.kind == "prelu":
            dx, g = prelu_backward(layer, caches[i], dout)
            grads[i] = g
            push(layer.inputs[0], dx)
        elif layer.kind == "pool":
            dx, _ = pool_backward(layer, caches[i], dout)
            push(layer.inputs[0], dx)
        elif layer.kind == "residual_add":
            push(layer.inputs[0], dout)
            push(layer.inputs[1], dout)
    return grads


def binary_conv_forward(layer, x: np.ndarray) -> np.ndarray:
    """xnor/popcount fast path for a fully binary conv layer.

    ``x`` holds real pre-activations; they are sign-binarized, packed, and
    convolved against the packed sign weights with integer popcount
    arithmetic.  Matches :func:`conv_forward` exactly on the +-1 values.
    """
    if layer.scheme is None:
        raise ShapeError("binary path requires a quantized layer")
    scheme = scheme_from_name(layer.scheme)
    if scheme.weight_bits != 1 or scheme.act_bits != 1:
        raise ShapeError("binary path requires 1-bit weights and activations")
    w, km, lo, li = _live_conv_weights(layer)
    if not km.all():
        raise ShapeError("binary path cannot represent zeroed kernels")
    if x.shape[1] != len(li):
        raise ShapeError("live input channel mismatch")
    k_live, c_live, fh, fw = w.shape
    codes = (x >= 0).astype(np.uint8)
    cols, oh, ow = im2col(codes, fh, fw, layer.stride, layer.padding)
    n_codes = cols.shape[1]
    w_codes = (w >= 0).reshape(k_live, -1).astype(np.uint8)
    w_words = np.stack([bitpack.pack(row, 1).words for row in w_codes])
    p_words = _pack_rows(cols)
    valid = None
    if layer.padding:
        ones = np.ones((1,) + x.shape[1:], dtype=np.uint8)
        vcols, _, _ = im2col(ones, fh, fw, layer.stride, layer.padding)
        per_image = _pack_rows(vcols)
        valid = np.tile(per_image, (x.shape[0], 1))
    dots = bitpack.popcount_dot_many(w_words, p_words, n_codes, valid)  # (K, P)
    out = dots.T.astype(x.dtype)
    if scheme.kind == "xnor":
        out = out * quantize.filter_scales(w).astype(x.dtype)
    if layer.bias is not None:
        out = out + layer.bias[lo].astype(x.dtype)
    n = x.shape[0]
    return np.ascontiguousarray(out.reshape(n, oh, ow, k_live).transpose(0, 3, 1, 2))


def _pack_rows(rows: np.ndarray) -> np.ndarray:
    """Pack each row of a (P, n) 0/1 matrix into 64-bit words."""
    p, n = rows.shape
    nwords = (n + 63) // 64
    padded = np.zeros((p, nwords * 64), dtype=np.uint8)
    padded[:, :n] = rows
    bits = padded.reshape(p, nwords, 8, 8)
    bytes_ = (bits << np.arange(8, dtype=np.uint8)).sum(axis=3, dtype=np.uint8)
    return bytes_.view(np.uint64).reshape(p, nwords)


@dataclass
class EvalResult:
    top1_error_pct: float
    loss: float
    latency_mean_s: float
    latencies: list


def top1_error(probs: np.ndarray, labels: np.ndarray, rng) -> float:
    """Top-1 error in percent; exact ties are broken with the supplied rng."""
    maxv = probs.max(axis=1, keepdims=True)
    pred = probs.argmax(axis=1)
    ties = (probs == maxv).sum(axis=1)
    for i in np.flatnonzero(ties > 1):
        pred[i] = rng.choice(np.flatnonzero(probs[i] == maxv[i]))
    return float(100.0 * np.mean(pred != labels))


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    p = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.clip(p, 1e-12, None)).mean())


def predict(net: NetworkDef, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    chunks = [run_forward(net, x[i:i + batch_size])[0]
              for i in range(0, len(x), batch_size)]
    return np.concatenate(chunks, axis=0)


def evaluate(net: NetworkDef, x: np.ndarray, labels: np.ndarray,
             passes: int = 1, seed: int = 0, batch_size: int = 256) -> EvalResult:
    """Top-1 error, mean cross-entropy, and mean latency over timed passes."""
    if len(x) == 0:
        raise ShapeError("evaluation subset is empty")
    latencies = []
    probs = None
    for _ in range(max(1, passes)):
        t0 = time.perf_counter()
        out = predict(net, x, batch_size)
        latencies.append(time.perf_counter() - t0)
        if probs is None:
            probs = out
    rng = np.random.default_rng(seed)
    return EvalResult(
        top1_error_pct=top1_error(probs, labels, rng),
        loss=cross_entropy(probs, labels),
        latency_mean_s=float(np.mean(latencies)),
        latencies=latencies,
    )
