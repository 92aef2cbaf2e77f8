"""Quantization-aware training with shadow full-precision weights.

The network's stored tensors *are* the shadow weights; every forward pass
re-quantizes them (the engine does this per layer), and gradients reach the
shadows through the straight-through estimator.  SGD with momentum is the
optimizer; the learning rate starts at ``lr0`` and drops by ``decay_factor``
every ``decay_every`` epochs (every epoch during fine-tuning).  Shadow
weights of 1-bit layers are clipped to [-1, 1] after each update to keep
the STE window meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from qnnprune import engine
from qnnprune.data import Dataset
from qnnprune.errors import TrainingDiverged
from qnnprune.network import NetworkDef
from qnnprune.quantize import scheme_from_name

TRAINED_ARRAYS = ("weight", "bias", "gamma", "beta", "slope")


@dataclass
class TrainConfig:
    lr0: float = 0.005
    lr_decay_factor: float = 10.0
    decay_every: int = 10
    epochs: int = 10
    momentum: float = 0.9
    batch_size: int = 100
    seed: int = 0

    def lr_at(self, epoch: int) -> float:
        return self.lr0 / self.lr_decay_factor ** (epoch // self.decay_every)


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    train_error_pct: list = field(default_factory=list)
    val_error_pct: list = field(default_factory=list)


def _param_mask(layer, name: str):
    """Boolean mask of trainable entries; masked units stay frozen."""
    if name == "weight":
        if layer.kind == "conv":
            m = (layer.out_mask[:, None] & layer.in_mask[None, :]) & layer.kernel_mask
            return m[:, :, None, None]
        return layer.out_mask[:, None] & layer.in_mask[None, :]
    return layer.out_mask


class _Sgd:
    def __init__(self, momentum: float):
        self.momentum = momentum
        self.velocity: dict = {}

    def step(self, net: NetworkDef, grads: dict, lr: float):
        for i, layer_grads in grads.items():
            layer = net.layers[i]
            for name, g in layer_grads.items():
                g = g * _param_mask(layer, name)
                key = (i, name)
                v = self.velocity.get(key)
                v = g if v is None else self.momentum * v + g
                self.velocity[key] = v
                arr = getattr(layer, name)
                arr -= (lr * v).astype(arr.dtype)
                if name == "weight" and layer.scheme is not None:
                    if scheme_from_name(layer.scheme).weight_bits == 1:
                        np.clip(arr, -1.0, 1.0, out=arr)


def _loss_grad(probs: np.ndarray, labels: np.ndarray):
    n = len(labels)
    loss = engine.cross_entropy(probs, labels)
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


def train(net: NetworkDef, dataset: Dataset, cfg: TrainConfig,
          val: Dataset | None = None) -> History:
    """SGD training loop; mutates ``net`` in place and returns the history.

    Raises :class:`TrainingDiverged` (with the last finite-loss snapshot
    attached) if the loss goes non-finite.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = _Sgd(cfg.momentum)
    hist = History()
    n = len(dataset)
    checkpoint = net.copy()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        losses = []
        errors = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = dataset.x[idx], dataset.y[idx]
            probs, caches = engine.run_forward(net, xb, training=True)
            loss, dlogits = _loss_grad(probs, yb)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became {loss} at epoch {epoch}", checkpoint=checkpoint)
            grads = engine.run_backward(net, caches, dlogits)
            opt.step(net, grads, lr)
            losses.append(loss)
            errors.append(np.mean(probs.argmax(axis=1) != yb))
        hist.train_loss.append(float(np.mean(losses)))
        hist.train_error_pct.append(float(100.0 * np.mean(errors)))
        if val is not None:
            res = engine.evaluate(net, val.x, val.y, passes=1, seed=cfg.seed)
            hist.val_error_pct.append(res.top1_error_pct)
        checkpoint = net.copy()
    return hist


def finetune(net: NetworkDef, dataset: Dataset, epochs: int,
             cfg: TrainConfig, val: Dataset | None = None) -> History:
    """Fine-tune with the training schedule but decaying every epoch."""
    if epochs <= 0:
        return History()
    ft = replace(cfg, epochs=epochs, decay_every=1)
    return train(net, dataset, ft, val=val)
