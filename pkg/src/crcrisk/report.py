"""Figures and summary tables rendered from run-directory CSV files."""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from .evalstat import METRICS
from .errors import MissingArtifactError

_SAVE = {"format": "png", "dpi": 100, "metadata": {"Software": None}}


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "crcrisk"
    return plt


def read_rows(path):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def metric_summary(rows):
    """pipeline -> metric -> (mean, std) from per-repeat report rows."""
    by = defaultdict(lambda: defaultdict(list))
    for r in rows:
        for m in METRICS:
            by[r["pipeline"]][m].append(float(r[m]))
    out = {}
    for p, ms in by.items():
        out[p] = {m: (float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0) for m, v in ms.items()}
    return out


def plot_auc(summary, path):
    plt = _pyplot()
    names = list(summary)
    means = [summary[n]["auc"][0] for n in names]
    stds = [summary[n]["auc"][1] for n in names]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names) + 2), 3.5))
    ax.bar(range(len(names)), means, yerr=stds, capsize=4, color="#4c72b0")
    ax.axhline(0.5, color="grey", lw=0.8, ls="--")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("test AUC (mean, sd)")
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_shapley(rows, path, k=10):
    plt = _pyplot()
    rows = rows[:k][::-1]
    fig, ax = plt.subplots(figsize=(5, 0.35 * len(rows) + 1.2))
    ax.barh(range(len(rows)), [float(r["mean"]) for r in rows], xerr=[float(r["std"]) for r in rows],
            color="#c44e52", capsize=3)
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels([r["group"] for r in rows], fontsize=8)
    ax.set_xlabel("mean |Shapley value|")
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_losses(rows, path):
    plt = _pyplot()
    by = defaultdict(list)
    for r in rows:
        by[r["stage"]].append((int(r["step"]), float(r["loss"])))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for stage, pts in by.items():
        steps, losses = zip(*pts)
        ax.plot(steps, losses, lw=1, label=stage)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def build_report(run_dir, out_dir):
    """Render whatever the run directory holds; returns the written paths."""
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if (run_dir / "report.csv").exists():
        summary = metric_summary(read_rows(run_dir / "report.csv"))
        with open(out_dir / "metrics_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pipeline"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")])
            for p, ms in summary.items():
                w.writerow([p] + [f"{ms[m][i]:.6f}" for m in METRICS for i in (0, 1)])
        plot_auc(summary, out_dir / "auc.png")
        written += [out_dir / "metrics_summary.csv", out_dir / "auc.png"]
    if (run_dir / "shapley.csv").exists():
        plot_shapley(read_rows(run_dir / "shapley.csv"), out_dir / "shapley_top10.png")
        written.append(out_dir / "shapley_top10.png")
    if (run_dir / "training_log.csv").exists():
        plot_losses(read_rows(run_dir / "training_log.csv"), out_dir / "loss.png")
        written.append(out_dir / "loss.png")
    if not written:
        raise MissingArtifactError(f"{run_dir} holds no report.csv, shapley.csv or training_log.csv")
    return written
