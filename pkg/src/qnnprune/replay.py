"""Bit accounting for a network description under published layer ratios.

Given per-layer filter pruning percentages (as reported in layer-wise
pruning tables), compute the fraction of model bits removed when only
surviving connections are stored: a weight survives when its output filter
is live *and* its input channel is live.  Downsample shortcut convs follow
the ratio of the conv they merge with; where residual adds join channel
sets pruned by different amounts, the overlapping (nested) interpretation
is used, so a merged channel dies only if every producer pruned it.
"""

from __future__ import annotations

import math

from qnnprune.network import INPUT_SPACE, NetworkDef, channel_spaces


def replay_ratios(net: NetworkDef, ratios_pct: dict) -> dict:
    """Pruned-percentage summary for published per-layer ratios.

    ``ratios_pct`` maps conv/fc layer ids to the percentage of their output
    filters pruned.  Returns a dict with ``bits_pruned_pct``,
    ``params_pruned_pct``, ``total_bits`` and ``total_params``.
    """
    space_of, spaces = channel_spaces(net)
    index = {l.id: i for i, l in enumerate(net.layers)}
    dead: dict[int, int] = {}
    for lid, pct in ratios_pct.items():
        i = index[lid]
        dead[i] = round(pct / 100.0 * net.layers[i].n_out)
    for i, l in enumerate(net.layers):
        if l.kind == "conv" and l.is_shortcut and i not in dead:
            partners = [p for p in spaces[space_of[i]].producers
                        if p != i and p in dead]
            if partners:
                dead[i] = dead[min(partners)]

    def space_live(root: int) -> int:
        if root == INPUT_SPACE:
            return net.in_channels
        sp = spaces[root]
        return sp.channels - min(dead.get(p, 0) for p in sp.producers)

    def channel_live(idx: int) -> int:
        """Live channels seen just below a bn/prelu layer."""
        j = idx
        while net.layers[j].kind not in ("conv", "fc", "residual_add"):
            j = net.layers[j].inputs[0]
        if net.layers[j].kind == "residual_add":
            return space_live(space_of[j])
        return net.layers[j].n_out - dead.get(j, 0)

    live_bits = full_bits = live_params = full_params = 0
    for i, l in enumerate(net.layers):
        if l.kind in ("conv", "fc"):
            k_full = l.n_out
            k_live = k_full - dead.get(i, 0)
            in_root = INPUT_SPACE if l.inputs[0] == -1 else space_of[l.inputs[0]]
            c_full = spaces[in_root].channels
            c_live = space_live(in_root)
            per = (l.weight.shape[2] * l.weight.shape[3]
                   if l.kind == "conv" else l.weight.shape[1] // c_full)
            wb = l.weight_bits()
            live_bits += k_live * c_live * per * wb
            full_bits += k_full * c_full * per * wb
            live_params += k_live * c_live * per
            full_params += k_full * c_full * per
            extra = int(l.bias is not None) + int(l.scheme == "xnor")
            live_bits += 32 * extra * k_live
            full_bits += 32 * extra * k_full
            live_params += extra * k_live
            full_params += extra * k_full
        elif l.kind in ("bn", "prelu"):
            c_full = l.n_out
            c_live = channel_live(l.inputs[0])
            per = 4 if l.kind == "bn" else 1
            live_bits += 32 * per * c_live
            full_bits += 32 * per * c_full
            live_params += per * c_live
            full_params += per * c_full
    return {
        "bits_pruned_pct": 100.0 * (1.0 - live_bits / full_bits),
        "params_pruned_pct": 100.0 * (1.0 - live_params / full_params),
        "total_bits": full_bits,
        "total_params": full_params,
        "total_mib": full_bits / 8 / 2**20,
    }
