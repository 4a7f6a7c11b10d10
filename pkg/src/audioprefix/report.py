"""Report rendering: metric reports as JSON + CSV with a bar-chart
figure, training histories as loss/lr curves."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricReport  # noqa: E402


def write_metric_report(report: MetricReport, out_dir, stem: str = "report") -> dict:
    """Write <stem>.json, <stem>.csv and <stem>.png; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    csv_path = out_dir / f"{stem}.csv"
    png_path = out_dir / f"{stem}.png"

    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))

    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "score"])
        for name in sorted(report.scores):
            writer.writerow([name, f"{report.scores[name]:.6f}"])

    names = sorted(report.scores)
    values = [report.scores[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(names)), 3.2))
    ax.bar(range(len(names)), values, color="#4878a8")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("score")
    ax.set_title("caption metrics")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"json": json_path, "csv": csv_path, "png": png_path}


def plot_history(history_path, out_png) -> Path:
    steps, losses, lrs = [], [], []
    epochs, val_losses = [], []
    with open(history_path, encoding="utf-8") as fh:
        for line in fh:
            entry = json.loads(line)
            if "train_loss" in entry:
                steps.append(entry["step"])
                losses.append(entry["train_loss"])
                lrs.append(entry["lr"])
            elif "val_loss" in entry:
                epochs.append(entry["epoch"])
                val_losses.append(entry["val_loss"])

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(steps, losses, lw=0.8, label="train")
    if val_losses:
        # place validation points at their epoch-end steps
        spe = max(1, (steps[-1] if steps else 1) // max(1, len(val_losses)))
        ax1.plot([min((e + 1) * spe, steps[-1]) for e in range(len(val_losses))],
                 val_losses, "o-", ms=3, label="val")
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax2.plot(steps, lrs, lw=0.8, color="#a85448")
    ax2.set_xlabel("step")
    ax2.set_ylabel("learning rate")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def write_retrieval_report(recalls: dict[int, float], out_dir,
                           stem: str = "retrieval") -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    csv_path = out_dir / f"{stem}.csv"
    png_path = out_dir / f"{stem}.png"

    json_path.write_text(json.dumps(
        {f"recall_at_{k}": v for k, v in sorted(recalls.items())}, indent=2))
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "recall"])
        for k in sorted(recalls):
            writer.writerow([k, f"{recalls[k]:.6f}"])

    ks = sorted(recalls)
    fig, ax = plt.subplots(figsize=(4, 3.2))
    ax.plot(ks, [recalls[k] for k in ks], "o-")
    ax.set_xlabel("k")
    ax.set_ylabel("recall@k")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"json": json_path, "csv": csv_path, "png": png_path}
