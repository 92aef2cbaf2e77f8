"""End-to-end pruning: rank, search ratios per layer, cut, fine-tune, report.

Prunable layers are visited in the configured direction (``up`` walks from
the input side).  For each one the ranking is interaction-based through the
next quantized conv/fc consumer; a layer feeding a full-precision
classifier falls back to scoring its own weights.  A GP ratio search picks
the pruning ratio, the chosen mask is applied permanently, and a short
fine-tune runs whenever the layer lost a non-trivial fraction of its
filters (above the trigger percentage).  A final longer fine-tune follows,
with the best validation accuracy reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from qnnprune import engine, ranking
from qnnprune.bayesopt import BoConfig, optimize_layer_ratio, prune_count_for_ratio
from qnnprune.data import Dataset
from qnnprune.errors import QnnError
from qnnprune.network import (NetworkDef, account, apply_filter_prune,
                              channel_spaces, shrink, validate)
from qnnprune.quantize import scheme_from_name
from qnnprune.train import TrainConfig, finetune


@dataclass
class PruneRunConfig:
    direction: str = "up"            # up: input side first; down: reverse
    metric: str = "angle"
    finetune_trigger_pct: float = 5.0
    finetune_epochs: int = 5
    final_finetune_epochs: int = 10
    calib_size: int = 500
    speedup_passes: int = 10
    seed: int = 0
    bo: BoConfig = field(default_factory=BoConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class LayerPruneRecord:
    layer: str
    ranking_mode: str
    live_before: int
    ratio: float
    pruned_count: int
    finetuned: bool
    trace: list


@dataclass
class PruneReport:
    original_acc_pct: float
    retrain_acc_pct: float
    pruned_ratio_pct: float          # in bits, against the unpruned baseline
    memory_mib: float
    speedup: float
    layer_rows: list                 # (id, params, size_mib, ratio_pct)
    records: list


class PipelineError(QnnError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


def _classifier_index(net: NetworkDef) -> int:
    return net.conv_fc_indices()[-1]


def prunable_layers(net: NetworkDef) -> list[int]:
    """Conv/fc layers eligible for filter pruning.

    Excludes pooling/softmax by construction, downsample shortcuts (their
    masks follow the block they merge with), layers already at one live
    filter, and the classifier, whose outputs are the class logits.
    """
    classifier = _classifier_index(net)
    chosen = []
    for i in net.conv_fc_indices():
        l = net.layers[i]
        if i == classifier or l.is_shortcut:
            continue
        if int(l.out_mask.sum()) <= 1:
            continue
        chosen.append(i)
    return chosen


def _next_consumer(net: NetworkDef, idx: int):
    space_of, spaces = channel_spaces(net)
    consumers = sorted(spaces[space_of[idx]].consumers)
    return net.layers[consumers[0]] if consumers else None


def rank_for_pruning(net: NetworkDef, idx: int, metric: str):
    """Prune-first order (absolute filter indices) and the mode used.

    Interaction ranking through the next quantized consumer is the default;
    the layer before a full-precision classifier (or any layer without a
    usable quantized consumer) is ranked on its own weights.
    """
    layer = net.layers[idx]
    live = layer.live_out()
    consumer = _next_consumer(net, idx)
    if consumer is not None and consumer.scheme is not None:
        c_lo = consumer.live_out()
        c_li = consumer.live_in()
        w_next = consumer.weight[np.ix_(c_lo, c_li)]
        if w_next.shape[1] == len(live):
            res = ranking.rank_filters_interaction(
                w_next, scheme_from_name(consumer.scheme), metric, layer.id)
            return [int(live[p]) for p in res.order], "interaction"
    if layer.scheme is None:
        return None, "skipped"  # full-precision layer with no quantized consumer
    w_own = layer.weight[np.ix_(live, layer.live_in())]
    res = ranking.rank_filters_own(
        w_own, scheme_from_name(layer.scheme), metric, layer.id)
    return [int(live[p]) for p in res.order], "own"


def prune_network(net: NetworkDef, train_ds: Dataset, val_ds: Dataset,
                  cfg: PruneRunConfig):
    """Run the full pipeline in place; returns ``(net, PruneReport)``."""
    validate(net)
    if cfg.direction not in ("up", "down"):
        raise QnnError(f"unknown direction '{cfg.direction}'")
    rng = np.random.default_rng(cfg.seed)
    baseline = account(net)
    baseline_rows = {row.id: row for row in baseline.layers}
    original_net = net.copy()

    calib_n = min(cfg.calib_size, len(train_ds))
    calib_idx = rng.choice(len(train_ds), size=calib_n, replace=False)
    calib = train_ds.subset(np.sort(calib_idx))

    original = engine.evaluate(net, val_ds.x, val_ds.y, passes=1, seed=cfg.seed)
    original_acc = 100.0 - original.top1_error_pct

    order = prunable_layers(net)
    if cfg.direction == "down":
        order = order[::-1]

    records = []
    checkpoint = net.copy()
    try:
        for idx in order:
            layer = net.layers[idx]
            live_before = int(layer.out_mask.sum())
            if live_before <= 1:
                continue
            prune_order, mode = rank_for_pruning(net, idx, cfg.metric)
            if prune_order is None:
                records.append(LayerPruneRecord(layer.id, mode, live_before,
                                                0.0, 0, False, []))
                continue
            ratio, trace = optimize_layer_ratio(
                net, layer.id, prune_order, calib.x, calib.y, cfg.bo,
                baseline=baseline, eval_seed=cfg.seed)
            count = prune_count_for_ratio(ratio, live_before)
            finetuned = False
            if count:
                apply_filter_prune(net, layer.id, prune_order[:count])
                pruned_pct = 100.0 * count / live_before
                if pruned_pct > cfg.finetune_trigger_pct:
                    finetune(net, train_ds, cfg.finetune_epochs, cfg.train)
                    finetuned = True
            records.append(LayerPruneRecord(layer.id, mode, live_before,
                                            ratio if count else 0.0, count,
                                            finetuned, trace))
            checkpoint = net.copy()

        if cfg.final_finetune_epochs > 0:
            hist = finetune(net, train_ds, cfg.final_finetune_epochs,
                            cfg.train, val=val_ds)
            retrain_acc = 100.0 - min(hist.val_error_pct)
        else:
            final = engine.evaluate(net, val_ds.x, val_ds.y, passes=1,
                                    seed=cfg.seed)
            retrain_acc = 100.0 - final.top1_error_pct
    except QnnError as e:
        raise PipelineError(f"pruning aborted: {e}", checkpoint=checkpoint) from e

    after = account(net)
    pruned_ratio = 100.0 * (1.0 - after.total_bits / baseline.total_bits)
    speedup = _measure_speedup(original_net, net, calib, cfg)

    rows = []
    by_layer = {rec.layer: rec for rec in records}
    for row in after.layers:
        rec = by_layer.get(row.id)
        base_bits = baseline_rows[row.id].bits
        bit_ratio = 100.0 * (1.0 - row.bits / base_bits) if base_bits else 0.0
        chosen = 100.0 * rec.pruned_count / rec.live_before if rec else bit_ratio
        rows.append((row.id, row.params, row.size_mib, chosen))

    report = PruneReport(
        original_acc_pct=original_acc,
        retrain_acc_pct=retrain_acc,
        pruned_ratio_pct=pruned_ratio,
        memory_mib=after.total_mib,
        speedup=speedup,
        layer_rows=rows,
        records=records,
    )
    return net, report


def _measure_speedup(original: NetworkDef, pruned: NetworkDef,
                     calib: Dataset, cfg: PruneRunConfig) -> float:
    """Median wall-clock of the original net over the pruned (shrunk) one."""
    compact = shrink(pruned)
    t_orig = engine.evaluate(original, calib.x, calib.y,
                             passes=cfg.speedup_passes, seed=cfg.seed)
    t_new = engine.evaluate(compact, calib.x, calib.y,
                            passes=cfg.speedup_passes, seed=cfg.seed)
    med_orig = float(np.median(t_orig.latencies))
    med_new = float(np.median(t_new.latencies))
    return med_orig / med_new if med_new > 0 else float("inf")
