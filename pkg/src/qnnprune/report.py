"""CSV emission and figure rendering for rankings, searches, and reports.

Every delimited output has a figure twin: rank CSVs get a score-vs-rank
curve, pruning reports get a per-layer size chart and the ratio-search
scatter, rendered with the Agg backend next to the CSV file.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from qnnprune.network import SizeReport  # noqa: E402
from qnnprune.pipeline import PruneReport  # noqa: E402
from qnnprune.ranking import RankResult  # noqa: E402


def _unit_str(unit) -> str:
    if isinstance(unit, tuple):
        return ":".join(str(u) for u in unit)
    return str(unit)


def write_rank_csv(result: RankResult, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "unit", "score", "rank"])
        for rank, unit in enumerate(result.order):
            w.writerow([result.layer, _unit_str(unit),
                        f"{result.scores[unit]:.8g}", rank])


def rank_figure(result: RankResult, path):
    scores = [result.scores[u] for u in result.order]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(scores)), scores, lw=1.2)
    ax.set_xlabel("prune-first rank")
    ax.set_ylabel("distance")
    ax.set_title(f"{result.layer or 'layer'}: {result.unit_kind} distances")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_trace_csv(records, path):
    """One row per ratio observation across all searched layers."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "step", "ratio", "error_pct", "params_pct",
                    "size_pct", "loss", "mu", "sigma"])
        for rec in records:
            for o in rec.trace:
                w.writerow([rec.layer, o.step, f"{o.ratio:.6g}",
                            f"{o.error_pct:.6g}", f"{o.params_pct:.6g}",
                            f"{o.size_pct:.6g}", f"{o.loss:.6g}",
                            f"{o.mu:.6g}", f"{o.sigma:.6g}"])


def write_size_csv(report: SizeReport, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "kind", "params", "bits", "size_mib",
                    "pruned_ratio_pct"])
        for row in report.layers:
            w.writerow([row.id, row.kind, row.params, row.bits,
                        f"{row.size_mib:.6f}", f"{row.pruned_ratio_pct:.4f}"])
        w.writerow(["total", "", report.total_params, report.total_bits,
                    f"{report.total_mib:.6f}", f"{report.pruned_pct:.4f}"])


def format_size_table(report: SizeReport) -> str:
    lines = [f"{'layer':<14}{'kind':<8}{'params':>12}{'size (MiB)':>12}"
             f"{'pruned %':>10}"]
    for row in report.layers:
        lines.append(f"{row.id:<14}{row.kind:<8}{row.params:>12,d}"
                     f"{row.size_mib:>12.3f}{row.pruned_ratio_pct:>10.2f}")
    lines.append(f"{'total':<14}{'':<8}{report.total_params:>12,d}"
                 f"{report.total_mib:>12.3f}{report.pruned_pct:>10.2f}")
    return "\n".join(lines)


def write_report_csv(report: PruneReport, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["original_acc_pct", "retrain_acc_pct", "pruned_ratio_pct",
                    "memory_mib", "speedup"])
        w.writerow([f"{report.original_acc_pct:.4f}",
                    f"{report.retrain_acc_pct:.4f}",
                    f"{report.pruned_ratio_pct:.4f}",
                    f"{report.memory_mib:.6f}", f"{report.speedup:.3f}"])
        w.writerow([])
        w.writerow(["layer", "params", "size_mib", "ratio_pct"])
        for lid, params, size_mib, ratio in report.layer_rows:
            w.writerow([lid, params, f"{size_mib:.6f}", f"{ratio:.4f}"])


def report_figures(report: PruneReport, baseline: SizeReport,
                   after: SizeReport, base_path):
    """Render the size chart and the ratio-search scatter next to the CSV."""
    base = Path(base_path)
    stem = base.with_suffix("")

    base_rows = [(r.id, r.bits) for r in baseline.layers
                 if r.kind in ("conv", "fc")]
    after_bits = {r.id: r.bits for r in after.layers}
    names = [rid for rid, _ in base_rows]
    before = [bits / 8 / 2**10 for _, bits in base_rows]
    now = [after_bits.get(rid, 0) / 8 / 2**10 for rid, _ in base_rows]
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(names)), 4))
    x = range(len(names))
    ax.bar([i - 0.2 for i in x], before, width=0.4, label="before")
    ax.bar([i + 0.2 for i in x], now, width=0.4, label="after")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=8)
    ax.set_ylabel("weight storage (KiB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(f"{stem}_sizes.png", dpi=120)
    plt.close(fig)

    searched = [rec for rec in report.records if rec.trace]
    if searched:
        cols = min(3, len(searched))
        rows = (len(searched) + cols - 1) // cols
        fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 3 * rows),
                                 squeeze=False)
        for ax in axes.flat[len(searched):]:
            ax.axis("off")
        for ax, rec in zip(axes.flat, searched):
            xs = [o.ratio for o in rec.trace]
            ys = [o.loss for o in rec.trace]
            ax.plot(xs, ys, "o", ms=4)
            ax.axvline(rec.ratio, color="tab:red", lw=1, ls="--")
            ax.set_title(rec.layer, fontsize=9)
            ax.set_xlabel("ratio")
            ax.set_ylabel("loss")
        fig.tight_layout()
        fig.savefig(f"{stem}_search.png", dpi=120)
        plt.close(fig)


def sizes_figure(report: SizeReport, path):
    rows = [r for r in report.layers if r.kind in ("conv", "fc")]
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(rows)), 4))
    ax.bar(range(len(rows)), [r.size_mib for r in rows])
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([r.id for r in rows], rotation=60, ha="right",
                       fontsize=8)
    ax.set_ylabel("size (MiB)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
