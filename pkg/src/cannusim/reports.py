"""Report generation: delimited tables plus rendered figures.

Regeneration from the same records is idempotent; floats in records.csv use
shortest-round-trip repr so the file is byte-stable across runs.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .harness import CSV_COLUMNS, BatchReport, TrialRecord
from .perception import MetricsTable

__all__ = ["records_csv_text", "write_all", "write_records_csv",
           "write_timing_table", "write_metrics_table", "write_report_json",
           "render_figures", "read_records_csv"]


def records_csv_text(records: list[TrialRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(r.csv_row())
    return buf.getvalue()


def write_records_csv(records: list[TrialRecord], path) -> None:
    Path(path).write_text(records_csv_text(records))


def read_records_csv(path) -> list[TrialRecord]:
    out = []
    with open(path) as f:
        for row in csv.DictReader(f):
            verdict = int(row["verdict"])
            ground = int(row["ground_truth"])
            out.append(TrialRecord(
                trial_id=row["trial_id"], mode=row["mode"], seed=int(row["seed"]),
                navigation_s=float(row["navigation_s"]), puncture_s=float(row["puncture_s"]),
                attempts=int(row["attempts"]), verdict=verdict, ground_truth=ground,
                gt_reason="", outcome_class=row["outcome_class"],
                abort_reason=row["abort_reason"]))
    return out


def write_timing_table(report: BatchReport, path) -> None:
    """Timing summary: average, median and sample standard deviation of
    navigation and puncture time, one block per mode."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["Mode", "Metric", "Navigation Time (seconds)", "Puncture Time (seconds)"])
        for mode, stats in report.mode_stats.items():
            nav, pun = stats["navigation"], stats["puncture"]
            w.writerow([mode, "Average", f"{nav['mean']:.2f}", f"{pun['mean']:.2f}"])
            w.writerow([mode, "Median", f"{nav['median']:.2f}", f"{pun['median']:.2f}"])
            w.writerow([mode, "Standard Deviation", f"{nav['std']:.2f}", f"{pun['std']:.2f}"])


def write_metrics_table(metrics: MetricsTable, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["Metric", "Class 0 (Failure)", "Class 1 (Success)"])
        for name, c0, c1 in metrics.rows():
            fmt = (lambda v: v if isinstance(v, str) else
                   (str(v) if isinstance(v, int) else f"{v:.2f}"))
            w.writerow([name, fmt(c0), fmt(c1)])


def write_report_json(report: BatchReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def render_figures(report: BatchReport, out_dir) -> list[Path]:
    """Per-trial timing bars and the outcome confusion matrix as PNGs."""
    out = Path(out_dir)
    written = []

    fig, ax = plt.subplots(figsize=(9, 4))
    modes = sorted({r.mode for r in report.records})
    width = 0.8 / max(1, 2 * len(modes))
    for mi, mode in enumerate(modes):
        rows = [r for r in report.records if r.mode == mode]
        idx = range(len(rows))
        ax.bar([i + mi * 2 * width for i in idx], [r.navigation_s for r in rows],
               width=width, label=f"{mode} navigation")
        ax.bar([i + (mi * 2 + 1) * width for i in idx], [r.puncture_s for r in rows],
               width=width, label=f"{mode} puncture")
    ax.set_xlabel("trial")
    ax.set_ylabel("time (s)")
    ax.set_title("Navigation and puncture time per trial")
    ax.legend(fontsize=8)
    fig.tight_layout()
    p = out / "fig_times.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    written.append(p)

    counts = {"TP": 0, "TN": 0, "FP": 0, "FN": 0}
    for r in report.records:
        if r.mode == "auto" or len({x.mode for x in report.records}) == 1:
            counts[r.outcome_class] += 1
    fig, ax = plt.subplots(figsize=(4, 4))
    grid = [[counts["TN"], counts["FP"]], [counts["FN"], counts["TP"]]]
    im = ax.imshow(grid, cmap="Blues")
    for i in range(2):
        for j in range(2):
            ax.text(j, i, str(grid[i][j]), ha="center", va="center")
    ax.set_xticks([0, 1], ["claimed 0", "claimed 1"])
    ax.set_yticks([0, 1], ["truth 0", "truth 1"])
    ax.set_title("Puncture claims vs air-injection truth")
    fig.colorbar(im, shrink=0.8)
    fig.tight_layout()
    p = out / "fig_outcomes.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    written.append(p)
    return written


def write_all(report: BatchReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records_csv(report.records, out / "records.csv")
    write_report_json(report, out / "report.json")
    write_timing_table(report, out / "tableI.csv")
    if report.metrics is not None:
        write_metrics_table(report.metrics, out / "tableII.csv")
    render_figures(report, out)
