"""Command-line interface.

Subcommands: ``train``, ``prune``, ``rank``, ``eval``, ``account``, and
``make-data`` for the bundled synthetic dataset.  Exit codes: 0 on success,
1 on usage errors, 2 on runtime failures.

A dataset directory either contains ``train/`` and ``val/`` QDS1
subdirectories or is itself a single QDS1 directory (then a deterministic
90/10 split provides validation where one is needed).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from qnnprune import config as cfgmod
from qnnprune import data as datamod
from qnnprune import engine, modelio, ranking, report, zoo
from qnnprune.errors import QnnError
from qnnprune.network import account, channel_spaces
from qnnprune.pipeline import prune_network
from qnnprune.quantize import scheme_from_name
from qnnprune.train import train as train_loop


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _load_data(data_dir, values, need_val=False, seed=0):
    root = Path(data_dir)
    mean, std = cfgmod.norm_constants(values)
    if (root / "train").is_dir():
        train = datamod.load_qds1(root / "train", mean, std)
        val = None
        if (root / "val").is_dir():
            val = datamod.load_qds1(root / "val", mean, std)
    else:
        train = datamod.load_qds1(root, mean, std)
        val = None
    if val is None and need_val:
        rng = np.random.default_rng(seed)
        idx = rng.permutation(len(train))
        cut = max(1, len(train) // 10)
        val = train.subset(idx[:cut])
        train = train.subset(idx[cut:])
    return train, val


def _load_model(path, need_shadow=False):
    if str(path).startswith("zoo:"):
        return _builtin_model(str(path))
    net = modelio.load_model(path)
    sidecar = modelio.shadow_path(path)
    if sidecar.exists():
        modelio.load_shadow(net, sidecar)
    elif need_shadow:
        raise QnnError(
            f"{path}: shadow sidecar {sidecar} required for this command "
            f"(real-valued weights are needed to rank or retrain)")
    return net


def _builtin_model(spec: str):
    """Bundled descriptors, e.g. ``zoo:resnet18:xnor`` or ``zoo:desk4:bnn``."""
    parts = spec.split(":")
    if len(parts) == 2:
        parts.append("bnn")
    _, arch, scheme = parts[:3]
    if arch == "resnet18":
        return zoo.resnet18_imagenet(scheme)
    if arch == "desk4":
        return zoo.desk4(scheme)
    if arch == "desk-residual":
        return zoo.desk_residual(scheme)
    raise QnnError(f"unknown builtin model '{spec}'")


def _cmd_train(args):
    values = cfgmod.parse_config(args.config)
    net = cfgmod.build_network(values)
    tc = cfgmod.train_config(values)
    train_ds, val_ds = _load_data(args.data, values)
    hist = train_loop(net, train_ds, tc, val=val_ds)
    modelio.save_model(net, args.out)
    last_err = hist.train_error_pct[-1] if hist.train_error_pct else float("nan")
    print(f"trained {tc.epochs} epochs; final train error "
          f"{last_err:.2f}%; model -> {args.out}")
    if hist.val_error_pct:
        print(f"validation error {hist.val_error_pct[-1]:.2f}%")
    return 0


def _cmd_prune(args):
    values = cfgmod.parse_config(args.config) if args.config else {}
    cfg = cfgmod.prune_run_config(values)
    cfg.metric = args.metric
    cfg.direction = {"up": "up", "down": "down"}[args.direction]
    cfg.bo.alpha1 = args.alpha1
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    net = _load_model(args.model, need_shadow=True)
    train_ds, val_ds = _load_data(args.data, values, need_val=True,
                                  seed=cfg.seed)
    baseline = account(net)
    net, rep = prune_network(net, train_ds, val_ds, cfg)
    modelio.save_model(net, args.out)
    if args.report:
        report.write_report_csv(rep, args.report)
        report.write_trace_csv(rep.records, _sibling(args.report, "_trace.csv"))
        report.report_figures(rep, baseline, account(net), args.report)
    print(f"original acc {rep.original_acc_pct:.2f}%  "
          f"retrain acc {rep.retrain_acc_pct:.2f}%  "
          f"pruned {rep.pruned_ratio_pct:.2f}% of bits  "
          f"memory {rep.memory_mib:.3f} MiB  speedup {rep.speedup:.2f}x")
    return 0


def _sibling(path, suffix) -> str:
    p = Path(path)
    return str(p.with_name(p.stem + suffix))


def _remap_units(res, unit_map):
    res.scores = {unit_map(u): s for u, s in res.scores.items()}
    res.order = [unit_map(u) for u in res.order]
    return res


def _cmd_rank(args):
    net = _load_model(args.model, need_shadow=True)
    idx = net.index_of(args.layer)
    layer = net.layers[idx]
    metric = args.metric
    if args.mode == "kernel":
        if layer.kind != "conv":
            raise QnnError(f"'{args.layer}' is not a conv layer")
        scheme = _require_scheme(layer)
        lo, li = layer.live_out(), layer.live_in()
        res = ranking.rank_kernels(layer.weight[np.ix_(lo, li)], scheme,
                                   metric, layer.id)
        _remap_units(res, lambda u: (int(li[u[0]]), int(lo[u[1]])))
    elif args.mode == "filter-own":
        scheme = _require_scheme(layer)
        lo = layer.live_out()
        w = layer.weight[lo][:, layer.live_in()]
        res = ranking.rank_filters_own(w, scheme, metric, layer.id)
        _remap_units(res, lambda u: int(lo[u]))
    else:
        space_of, spaces = channel_spaces(net)
        consumers = sorted(spaces[space_of[idx]].consumers)
        if not consumers:
            raise QnnError(f"'{args.layer}' has no consumer to rank through")
        nxt = net.layers[consumers[0]]
        scheme = _require_scheme(nxt)
        lo = layer.live_out()
        w = nxt.weight[np.ix_(nxt.live_out(), nxt.live_in())]
        if w.shape[1] != len(lo):
            raise QnnError(
                f"consumer '{nxt.id}' reads {w.shape[1]} inputs but "
                f"'{layer.id}' has {len(lo)} live filters")
        res = ranking.rank_filters_interaction(w, scheme, metric, layer.id)
        _remap_units(res, lambda u: int(lo[u]))
    if args.out:
        report.write_rank_csv(res, args.out)
        report.rank_figure(res, _sibling(args.out, ".png"))
        print(f"wrote {args.out}")
    else:
        sys.stdout.write("layer,unit,score,rank\n")
        for rank, unit in enumerate(res.order):
            unit_s = ":".join(str(u) for u in unit) if isinstance(unit, tuple) else unit
            sys.stdout.write(f"{res.layer},{unit_s},{res.scores[unit]:.8g},{rank}\n")
    return 0


def _require_scheme(layer):
    if layer.scheme is None:
        raise QnnError(f"layer '{layer.id}' is full precision; quantization "
                       f"distances are undefined for it")
    return scheme_from_name(layer.scheme)


def _cmd_eval(args):
    net = _load_model(args.model)
    values = {}
    train_ds, val_ds = _load_data(args.data, values)
    ds = val_ds if val_ds is not None else train_ds
    res = engine.evaluate(net, ds.x, ds.y, passes=args.passes, seed=args.seed)
    print(f"top-1 error {res.top1_error_pct:.2f}%  "
          f"accuracy {100 - res.top1_error_pct:.2f}%  "
          f"loss {res.loss:.4f}  "
          f"latency {res.latency_mean_s * 1e3:.1f} ms/pass over {args.passes} passes")
    return 0


def _cmd_account(args):
    net = _load_model(args.model)
    rep = account(net)
    print(report.format_size_table(rep))
    if args.csv:
        report.write_size_csv(rep, args.csv)
        report.sizes_figure(rep, _sibling(args.csv, "_sizes.png"))
        print(f"wrote {args.csv}")
    return 0


def _cmd_make_data(args):
    train_dir, val_dir = datamod.write_synthetic_dataset(
        args.out, n_train=args.train_n, n_val=args.val_n, seed=args.seed)
    print(f"wrote {train_dir} ({args.train_n} samples) and "
          f"{val_dir} ({args.val_n} samples)")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="qnnprune",
                description="Prune quantized neural networks with "
                            "distance-based rankings and a GP ratio search.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="pre-train a quantized net")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=_cmd_train)

    pr = sub.add_parser("prune", help="full pruning pipeline")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--metric", choices=["angle", "euclid"], default="angle")
    pr.add_argument("--alpha1", type=float, default=1.0)
    pr.add_argument("--direction", choices=["up", "down"], default="up")
    pr.add_argument("--out", required=True)
    pr.add_argument("--report", default=None)
    pr.add_argument("--config", default=None)
    pr.add_argument("--seed", type=int, default=None)
    pr.set_defaults(func=_cmd_prune)

    rk = sub.add_parser("rank", help="emit unit rankings as CSV")
    rk.add_argument("--model", required=True)
    rk.add_argument("--layer", required=True)
    rk.add_argument("--mode", required=True,
                    choices=["kernel", "filter-own", "filter-interaction"])
    rk.add_argument("--metric", choices=["angle", "euclid"], default="angle")
    rk.add_argument("--out", default=None)
    rk.set_defaults(func=_cmd_rank)

    ev = sub.add_parser("eval", help="accuracy and latency")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--passes", type=int, default=10)
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(func=_cmd_eval)

    ac = sub.add_parser("account", help="per-layer size table")
    ac.add_argument("--model", required=True)
    ac.add_argument("--csv", default=None)
    ac.set_defaults(func=_cmd_account)

    md = sub.add_parser("make-data", help="generate the synthetic dataset")
    md.add_argument("--out", required=True)
    md.add_argument("--train-n", type=int, default=5000)
    md.add_argument("--val-n", type=int, default=1000)
    md.add_argument("--seed", type=int, default=7)
    md.set_defaults(func=_cmd_make_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except (QnnError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
