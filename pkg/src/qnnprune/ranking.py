"""Importance orderings for kernels and filters of quantized layers.

Scores are real-vs-quantized distances; the prune-first order is the
descending sort of the scores with ties broken by ascending unit index.
Filter ranking comes in two flavours: scoring each filter on its own
weights, and the interaction ranking that scores filter ``k`` of a layer by
averaging the kernel-wise distances of the kernels in the *next* layer that
read output channel ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from qnnprune import metrics, quantize
from qnnprune.errors import ShapeError
from qnnprune.quantize import QuantScheme


@dataclass
class RankResult:
    layer: str
    unit_kind: str       # "kernel" or "filter"
    scores: dict         # unit -> distance
    order: list          # prune-first (descending distance)

    def prune_first(self, count: int) -> list:
        return self.order[:count]


def _order(scores: dict) -> list:
    return sorted(scores, key=lambda u: (-scores[u], u if isinstance(u, tuple) else (u,)))


def rank_kernels(layer_weights: np.ndarray, scheme: QuantScheme,
                 metric: str, layer: str = "") -> RankResult:
    """Score every (c, k) kernel of a conv layer against its quantization."""
    w = np.asarray(layer_weights)
    if w.ndim != 4:
        raise ShapeError("kernel ranking requires a K x C x h x w conv weight")
    q = quantize.quantize_weight_values(w, scheme)
    scores = {}
    for k in range(w.shape[0]):
        for c in range(w.shape[1]):
            scores[(c, k)] = metrics.distance(w[k, c], q[k, c], metric)
    return RankResult(layer, "kernel", scores, _order(scores))


def rank_filters_own(layer_weights: np.ndarray, scheme: QuantScheme,
                     metric: str, layer: str = "") -> RankResult:
    """Score each filter on its own flattened weights."""
    w = np.asarray(layer_weights)
    if w.ndim < 2:
        raise ShapeError("filter ranking requires a conv or fc weight tensor")
    q = quantize.quantize_weight_values(w, scheme)
    scores = {k: metrics.distance(w[k].reshape(-1), q[k].reshape(-1), metric)
              for k in range(w.shape[0])}
    return RankResult(layer, "filter", scores, _order(scores))


def rank_filters_interaction(next_layer_weights: np.ndarray,
                             next_scheme: QuantScheme, metric: str,
                             layer: str = "") -> RankResult:
    """Rank the CURRENT layer's filters through the next layer's kernels.

    Filter ``k`` scores the mean distance of kernels ``(j, k)`` over all
    next-layer filters ``j``.  A fully-connected next layer is treated as
    1x1 kernels, one column per input channel.
    """
    w = np.asarray(next_layer_weights)
    if w.ndim == 2:
        w = w[:, :, None, None]
    if w.ndim != 4:
        raise ShapeError("interaction ranking requires the next layer's "
                         "conv (K x C x h x w) or fc (K x C) weights")
    q = quantize.quantize_weight_values(w, next_scheme)
    n_filters, n_channels = w.shape[:2]
    scores = {}
    for k in range(n_channels):
        d = [metrics.distance(w[j, k], q[j, k], metric) for j in range(n_filters)]
        scores[k] = float(np.mean(d))
    return RankResult(layer, "filter", scores, _order(scores))
