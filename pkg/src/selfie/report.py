"""Result aggregation: per-run rows, mean +/- std summary tables, and
matplotlib figures rendered next to the delimited output.
"""

from __future__ import annotations

import csv
import math
import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

RESULTS_HEADER = ["dataset", "fraction", "init", "seed", "accuracy"]
MISSING = "—"


def append_result(path: str, dataset: str, fraction: float, init: str,
                  seed: int, accuracy: float) -> None:
    fresh = not os.path.exists(path)
    with open(path, "a", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if fresh:
            writer.writerow(RESULTS_HEADER)
        writer.writerow([dataset, f"{fraction:.9g}", init, seed, f"{accuracy:.9g}"])


def read_results(paths: list[str]) -> list[dict]:
    rows = []
    for path in paths:
        with open(path, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                rows.append({"dataset": row["dataset"],
                             "fraction": float(row["fraction"]),
                             "init": row["init"],
                             "seed": int(row["seed"]),
                             "accuracy": float(row["accuracy"])})
    return rows


def mean_std(values: list[float]) -> tuple[float, float]:
    """Mean and population standard deviation (std over exactly these runs)."""
    n = len(values)
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / n
    return mean, math.sqrt(var)


def format_cell(values: list[float]) -> str:
    mean, std = mean_std(values)
    return f"{mean:.2f} ± {std:.2f}"


def format_delta(pretrained_mean: float, supervised_mean: float) -> str:
    return f"{pretrained_mean - supervised_mean:+.2f}"


def summarize(rows: list[dict]) -> dict:
    """{(dataset, fraction): {"supervised": [...], "pretrained": [...]}}.

    Any init other than "random" counts as pretrained.
    """
    table: dict = defaultdict(lambda: {"supervised": [], "pretrained": []})
    for row in rows:
        kind = "supervised" if row["init"] == "random" else "pretrained"
        table[(row["dataset"], row["fraction"])][kind].append(row["accuracy"])
    return dict(table)


def report_table(paths: list[str]) -> tuple[str, list[str]]:
    """Aligned text table (rows = dataset x fraction, columns = supervised /
    pretrained / delta); returns (table, warnings for missing cells)."""
    summary = summarize(read_results(paths))
    warnings = []
    header = ["dataset", "fraction", "supervised", "pretrained", "Δ"]
    lines = [header]
    for (dataset, fraction) in sorted(summary):
        cells = summary[(dataset, fraction)]
        sup, pre = cells["supervised"], cells["pretrained"]
        row = [dataset, f"{fraction:g}"]
        row.append(format_cell(sup) if sup else MISSING)
        row.append(format_cell(pre) if pre else MISSING)
        if sup and pre:
            row.append(format_delta(mean_std(pre)[0], mean_std(sup)[0]))
        else:
            row.append(MISSING)
            missing = "supervised" if not sup else "pretrained"
            warnings.append(f"warning: no {missing} runs for "
                            f"{dataset} @ fraction {fraction:g}")
        lines.append(row)
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    rendered = []
    for line in lines:
        rendered.append("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip())
    return "\n".join(rendered) + "\n", warnings


def write_summary_csv(paths: list[str], out_path: str) -> None:
    summary = summarize(read_results(paths))
    with open(out_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["dataset", "fraction", "supervised_mean", "supervised_std",
                         "pretrained_mean", "pretrained_std", "delta"])
        for (dataset, fraction) in sorted(summary):
            cells = summary[(dataset, fraction)]
            sup, pre = cells["supervised"], cells["pretrained"]
            sup_m, sup_s = mean_std(sup) if sup else (float("nan"),) * 2
            pre_m, pre_s = mean_std(pre) if pre else (float("nan"),) * 2
            delta = pre_m - sup_m if sup and pre else float("nan")
            writer.writerow([dataset, f"{fraction:g}", f"{sup_m:.9g}", f"{sup_s:.9g}",
                             f"{pre_m:.9g}", f"{pre_s:.9g}", f"{delta:.9g}"])


def read_metrics(path: str) -> dict[str, dict[str, list[float]]]:
    """{split: {"step": [...], "loss": [...], "accuracy": [...], "lr": [...]}}"""
    out: dict = defaultdict(lambda: defaultdict(list))
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            split = row["split"]
            out[split]["step"].append(float(row["step"]))
            out[split]["loss"].append(float(row["loss"]))
            out[split]["accuracy"].append(float(row["accuracy"]))
            out[split]["lr"].append(float(row["lr"]))
    return {k: dict(v) for k, v in out.items()}


def plot_training_curves(metrics_paths: list[str], out_path: str) -> None:
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(11, 4))
    for path in metrics_paths:
        name = os.path.splitext(os.path.basename(path))[0]
        for split, series in read_metrics(path).items():
            label = f"{name}/{split}"
            ax_loss.plot(series["step"], series["loss"], label=label)
            ax_acc.plot(series["step"], series["accuracy"], label=label)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_acc.set_xlabel("step")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1.02)
    if metrics_paths:
        ax_loss.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_summary_bars(results_paths: list[str], out_path: str) -> None:
    summary = summarize(read_results(results_paths))
    keys = sorted(summary)
    fig, ax = plt.subplots(figsize=(max(5, 1.8 * len(keys)), 4))
    xs = range(len(keys))
    for off, kind in ((-0.18, "supervised"), (0.18, "pretrained")):
        means, stds = [], []
        for key in keys:
            vals = summary[key][kind]
            m, s = mean_std(vals) if vals else (float("nan"), 0.0)
            means.append(m)
            stds.append(s)
        ax.bar([x + off for x in xs], means, width=0.34, yerr=stds,
               capsize=3, label=kind)
    ax.set_xticks(list(xs))
    ax.set_xticklabels([f"{d}\n{f:g}" for d, f in keys], fontsize=8)
    ax.set_ylabel("test accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def write_report(out_dir: str, results_paths: list[str],
                 metrics_paths: list[str]) -> tuple[list[str], list[str]]:
    """Render table + CSV + figures into out_dir; returns (paths, warnings)."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    table, warnings = report_table(results_paths)
    table_path = os.path.join(out_dir, "report.txt")
    with open(table_path, "w", encoding="utf-8") as f:
        f.write(table)
    written.append(table_path)
    csv_path = os.path.join(out_dir, "report.csv")
    write_summary_csv(results_paths, csv_path)
    written.append(csv_path)
    bars = os.path.join(out_dir, "summary_bars.png")
    plot_summary_bars(results_paths, bars)
    written.append(bars)
    if metrics_paths:
        curves = os.path.join(out_dir, "training_curves.png")
        plot_training_curves(metrics_paths, curves)
        written.append(curves)
    return written, warnings
