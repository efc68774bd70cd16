"""Comparison report over a set of run directories.

Aggregates each run's metrics.csv (mode="both" rows) into a methods x
datasets table of MAE/RMSE mean +/- sample std over seeds, writes
report/summary.csv and report/summary.md (best cell per dataset column in
bold), and renders one loss-curve plot per run. Emission is deterministic:
regenerating from the same CSVs is byte-identical.
"""

import concurrent.futures
import math
import multiprocessing
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ReportError
from .runner import read_losses_csv, read_metrics_csv


def _aggregate(values):
    n = len(values)
    mean = sum(values) / n
    if n > 1:
        var = sum((v - mean) ** 2 for v in values) / (n - 1)
        std = math.sqrt(var)
    else:
        std = 0.0
    return mean, std


def collect_runs(run_dirs):
    missing = [d for d in run_dirs if not os.path.isfile(os.path.join(d, "metrics.csv"))]
    if missing:
        raise ReportError("missing run metrics: " + ", ".join(sorted(missing)))
    groups = {}
    for d in run_dirs:
        for row in read_metrics_csv(os.path.join(d, "metrics.csv")):
            if row["mode"] != "both":
                continue
            key = (row["dataset"], row["method"])
            groups.setdefault(key, []).append(row)
    return groups


def emit_report(run_dirs, out_dir, jobs=1):
    groups = collect_runs(run_dirs)
    os.makedirs(out_dir, exist_ok=True)
    plots_dir = os.path.join(out_dir, "plots")
    os.makedirs(plots_dir, exist_ok=True)

    summary = []
    for (dataset, method) in sorted(groups):
        rows = groups[(dataset, method)]
        mae_mean, mae_std = _aggregate([r["mae_mm"] for r in rows])
        rmse_mean, rmse_std = _aggregate([r["rmse_mm"] for r in rows])
        summary.append(
            {
                "dataset": dataset,
                "method": method,
                "n_runs": len(rows),
                "mae_mm_mean": mae_mean,
                "mae_mm_std": mae_std,
                "rmse_mm_mean": rmse_mean,
                "rmse_mm_std": rmse_std,
            }
        )

    csv_path = os.path.join(out_dir, "summary.csv")
    with open(csv_path, "w") as fh:
        fh.write("dataset,method,n_runs,mae_mm_mean,mae_mm_std,rmse_mm_mean,rmse_mm_std\n")
        for s in summary:
            fh.write(
                f"{s['dataset']},{s['method']},{s['n_runs']},"
                f"{s['mae_mm_mean']:.6f},{s['mae_mm_std']:.6f},"
                f"{s['rmse_mm_mean']:.6f},{s['rmse_mm_std']:.6f}\n"
            )

    md_path = os.path.join(out_dir, "summary.md")
    _write_markdown(summary, md_path)

    tasks = []
    for d in sorted(run_dirs):
        losses_path = os.path.join(d, "losses.csv")
        if os.path.isfile(losses_path):
            tasks.append((losses_path, os.path.join(plots_dir, os.path.basename(d.rstrip("/")) + ".png")))
    if jobs > 1 and len(tasks) > 1:
        ctx = multiprocessing.get_context("spawn")
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            list(pool.map(_plot_worker, tasks))
    else:
        for task in tasks:
            _plot_worker(task)

    return {"summary_csv": csv_path, "summary_md": md_path, "plots_dir": plots_dir}


def _write_markdown(summary, path):
    datasets = sorted({s["dataset"] for s in summary})
    methods = sorted({s["method"] for s in summary})
    cells = {(s["dataset"], s["method"]): s for s in summary}
    best = {}
    for ds in datasets:
        maes = {m: cells[(ds, m)]["mae_mm_mean"] for m in methods if (ds, m) in cells}
        if maes:
            best[ds] = min(maes, key=maes.get)

    lines = ["# Method comparison (MAE mm, mean ± std over runs)", ""]
    lines.append("| method | " + " | ".join(datasets) + " |")
    lines.append("|---" * (len(datasets) + 1) + "|")
    for m in methods:
        row = [m]
        for ds in datasets:
            s = cells.get((ds, m))
            if s is None:
                row.append("-")
                continue
            text = f"{s['mae_mm_mean']:.2f} ± {s['mae_mm_std']:.2f}"
            if best.get(ds) == m:
                text = f"**{text}**"
            row.append(text)
        lines.append("| " + " | ".join(row) + " |")
    lines.append("")
    lines.append("RMSE (mm):")
    lines.append("")
    lines.append("| method | " + " | ".join(datasets) + " |")
    lines.append("|---" * (len(datasets) + 1) + "|")
    for m in methods:
        row = [m]
        for ds in datasets:
            s = cells.get((ds, m))
            row.append("-" if s is None else f"{s['rmse_mm_mean']:.2f} ± {s['rmse_mm_std']:.2f}")
        lines.append("| " + " | ".join(row) + " |")
    lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))


def _plot_worker(task):
    _plot_losses(*task)


def _plot_losses(losses_path, out_path):
    rows = read_losses_csv(losses_path)
    if not rows:
        return
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, [r["total"] for r in rows], label="total")
    for key in ("l_z", "l_sm", "l_proxy"):
        if any(r[key] != 0.0 for r in rows):
            ax.plot(steps, [r[key] for r in rows], label=key, alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    fig.tight_layout()
    # Strip the software tag so regeneration is byte-identical across versions.
    fig.savefig(out_path, dpi=100, metadata={"Software": None})
    plt.close(fig)
